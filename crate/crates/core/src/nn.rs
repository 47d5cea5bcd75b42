//! Parameter sets, checkpoint files, seeded initialization and Adam.
//!
//! Checkpoints are `magic, u32 layer count`, then per layer `u32 c, u32 h,
//! u32 w` and `c*h*w` little-endian f32 values. Parameters live in f64 while
//! training and are rounded to f32 on write.

use std::io::{Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Registers every tensor as a graph variable, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.variable(t.clone())).collect()
    }

    /// Registers every tensor as a constant (gradient-stopped).
    pub fn bind_frozen(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    pub fn to_bytes(&self, magic: &[u8; 4]) -> Vec<u8> {
        let mut out = magic.to_vec();
        out.extend((self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            for d in [t.shape.c, t.shape.h, t.shape.w] {
                out.extend((d as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend((v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(magic: &[u8; 4], bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let mut m = [0u8; 4];
        read_exact(&mut cur, &mut m)?;
        if &m != magic {
            return Err(Error::Format {
                offset: 0,
                message: format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(&m), String::from_utf8_lossy(magic)),
            });
        }
        let n = read_u32(&mut cur)? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let (c, h, w) = (read_u32(&mut cur)?, read_u32(&mut cur)?, read_u32(&mut cur)?);
            let len = (c as usize)
                .checked_mul(h as usize)
                .and_then(|v| v.checked_mul(w as usize))
                .filter(|&l| l <= bytes.len())
                .ok_or_else(|| Error::Format {
                    offset: cur.position() as usize - 12,
                    message: "layer shape too large for file".into(),
                })?;
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                let at = cur.position() as usize;
                let mut b = [0u8; 4];
                read_exact(&mut cur, &mut b)?;
                let v = f32::from_le_bytes(b);
                if !v.is_finite() {
                    return Err(Error::Format {
                        offset: at,
                        message: "non-finite weight".into(),
                    });
                }
                data.push(v as f64);
            }
            tensors.push(Tensor::new(Shape::new(c as usize, h as usize, w as usize), data)?);
        }
        if (cur.position() as usize) != bytes.len() {
            return Err(Error::Format {
                offset: cur.position() as usize,
                message: "trailing bytes after last layer".into(),
            });
        }
        Ok(Self { tensors })
    }

    pub fn write(&self, magic: &[u8; 4], path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes(magic)).map_err(|e| Error::io(path, e))
    }

    pub fn read(magic: &[u8; 4], path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(magic, &bytes)
    }

    /// Checks that layer shapes match a reference layout.
    pub fn check_layout(&self, layout: &[Shape]) -> Result<()> {
        let got: Vec<Shape> = self.tensors.iter().map(|t| t.shape).collect();
        if got != layout {
            return Err(Error::shape(layout, got));
        }
        Ok(())
    }

    /// Rounds every value through f32, matching what a checkpoint stores.
    pub fn rounded(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::new_unchecked(t.shape, t.data.iter().map(|&v| v as f32 as f64).collect()))
                .collect(),
        }
    }
}

fn read_exact(cur: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    let at = cur.position() as usize;
    cur.read_exact(buf).map_err(|_| Error::Format {
        offset: at,
        message: "truncated".into(),
    })
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(cur, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Kind of seeded initialization for one layer.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Normal with sd `sqrt(2 / fan_in)`, fan_in = `h * w` of the weight shape.
    He,
    Zeros,
    Constant(f64),
}

pub fn init_params(layout: &[(Shape, Init)], seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = layout
        .iter()
        .map(|&(shape, init)| match init {
            Init::He => {
                let sd = (2.0 / (shape.h * shape.w) as f64).sqrt();
                let n = Normal::new(0.0, sd).expect("positive sd");
                Tensor::new_unchecked(shape, (0..shape.len()).map(|_| n.sample(&mut rng)).collect())
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Constant(v) => Tensor::filled(shape, v),
        })
        .collect();
    ParamSet { tensors }
}

/// Scales `grads` in place so their global L2 norm is at most `clip`.
/// Returns the norm before and after.
pub fn clip_global_norm(grads: &mut [Tensor], clip: f64) -> (f64, f64) {
    let norm = grads
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > clip {
        let k = clip / norm;
        for t in grads.iter_mut() {
            t.data.iter_mut().for_each(|v| *v *= k);
        }
        let after = grads
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        (norm, after)
    } else {
        (norm, norm)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.tensors.len() {
            return Err(Error::shape(params.tensors.len(), grads.len()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.tensors.iter_mut().zip(grads).enumerate() {
            if p.shape != g.shape {
                return Err(Error::shape(p.shape, g.shape));
            }
            for (j, (w, &gr)) in p.data.iter_mut().zip(&g.data).enumerate() {
                let m = &mut self.m[i][j];
                let v = &mut self.v[i][j];
                *m = self.beta1 * *m + (1.0 - self.beta1) * gr;
                *v = self.beta2 * *v + (1.0 - self.beta2) * gr * gr;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Adds `src` into `acc` elementwise (fixed order reduction helper).
pub fn accumulate(acc: &mut [Tensor], src: &[Tensor]) {
    for (a, s) in acc.iter_mut().zip(src) {
        for (x, y) in a.data.iter_mut().zip(&s.data) {
            *x += y;
        }
    }
}

pub fn scale_all(ts: &mut [Tensor], k: f64) {
    for t in ts {
        t.data.iter_mut().for_each(|v| *v *= k);
    }
}
