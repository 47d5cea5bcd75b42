//! Toy-scale prompt-conditioned segmenter.
//!
//! Pipeline: per-channel affine pre-encoder, three stride-2 conv blocks
//! (the last one is the attribution tap `E`), a residual channel MLP
//! (`E' = E + MLP(E)`), a box head on `E`, a decoder on `E` plus the
//! rasterized box, an auxiliary decoder on `E'`, and a confidence head on
//! the auxiliary probabilities.

use crate::attribution::{surrogate_scalar, xai_field, EncoderTap, XaiField};
use crate::autodiff::{sigmoid, Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};
use crate::fields::{Field2D, Mask2D};
use crate::nn::{init_params, Init, ParamSet};

pub const MAGIC: &[u8; 4] = b"SEGM";
/// Encoder channels at the tap.
pub const TAP_CHANNELS: usize = 32;
/// Clamp applied to the confidence map before taking its logit.
pub const MODULATION_DELTA: f64 = 1e-4;

// parameter indices
const PRE_SCALE: usize = 0;
const PRE_SHIFT: usize = 1;
const ENC: usize = 2; // 3 x (w, b)
const REF: usize = 8; // 2 x (w, b)
const BOX: usize = 12; // (w, b)
const DEC: usize = 14; // 3 x (w, b)
const AUX: usize = 20; // 3 x (w, b)
const CONF: usize = 26; // 2 x (w, b)

fn conv(cout: usize, cin: usize, k: usize) -> [(Shape, Init); 2] {
    [
        (Shape::new(cout, cin, k * k), Init::He),
        (Shape::new(cout, 1, 1), Init::Zeros),
    ]
}

fn layout() -> Vec<(Shape, Init)> {
    let mut l = vec![
        (Shape::new(1, 1, 1), Init::Constant(2.0)),
        (Shape::new(1, 1, 1), Init::Constant(-1.0)),
    ];
    l.extend(conv(16, 1, 3));
    l.extend(conv(32, 16, 3));
    l.extend(conv(TAP_CHANNELS, 32, 3));
    l.extend(conv(TAP_CHANNELS, TAP_CHANNELS, 1));
    // zero last refinement layer: E' == E at initialization
    l.push((Shape::new(TAP_CHANNELS, TAP_CHANNELS, 1), Init::Zeros));
    l.push((Shape::new(TAP_CHANNELS, 1, 1), Init::Zeros));
    l.extend(conv(4, TAP_CHANNELS, 1));
    l.extend(conv(16, TAP_CHANNELS + 1, 3));
    l.extend(conv(8, 16, 3));
    l.extend(conv(1, 8, 3));
    l.extend(conv(16, TAP_CHANNELS, 3));
    l.extend(conv(8, 16, 3));
    l.extend(conv(1, 8, 3));
    l.extend(conv(8, 1, 3));
    l.extend(conv(1, 8, 3));
    l
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub params: ParamSet,
}

/// Node handles of one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outputs {
    /// Main logits `[1, H, W]`.
    pub s: NodeId,
    /// Auxiliary logits; absent when the auxiliary branch is skipped.
    pub a: Option<NodeId>,
    pub m_c: Option<NodeId>,
    /// Box `[4, 1, 1]` in `[0, 1]`, ordered `x_min, y_min, x_max, y_max`.
    pub b: NodeId,
    /// Tap: final encoder block output.
    pub e: NodeId,
    pub e_ref: NodeId,
    /// The rasterized box was degenerate.
    pub box_degenerate: bool,
}

impl ModelParams {
    pub fn init(seed: u64) -> Self {
        Self {
            params: init_params(&layout(), seed),
        }
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let shapes: Vec<Shape> = layout().iter().map(|l| l.0).collect();
        params.check_layout(&shapes)?;
        Ok(Self { params })
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_params(ParamSet::read(MAGIC, path)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        self.params.write(MAGIC, path)
    }

    pub fn count(&self) -> usize {
        self.params.count()
    }
}

fn check_input(x: &Field2D) -> Result<()> {
    let (h, w) = x.shape();
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Invalid(format!("input {h}x{w} is not divisible by 8")));
    }
    Ok(())
}

fn decode(g: &mut Graph, p: &[NodeId], base: usize, mut h: NodeId) -> Result<NodeId> {
    for stage in 0..3 {
        h = g.upsample2x(h);
        h = g.conv2d(h, p[base + 2 * stage], Some(p[base + 2 * stage + 1]), 1)?;
        if stage < 2 {
            h = g.relu(h);
        }
    }
    Ok(h)
}

/// Builds the full forward pass on `g`. `p` are the bound parameters (see
/// [`ParamSet::bind`]). With `aux = false` the auxiliary decoder and
/// confidence head are skipped.
pub fn forward(g: &mut Graph, p: &[NodeId], x: &Field2D, aux: bool) -> Result<Outputs> {
    check_input(x)?;
    let (h, w) = x.shape();
    let xi = g.constant(Tensor::from_field(x));
    let xs = g.mul(xi, p[PRE_SCALE])?;
    let mut e = g.add(xs, p[PRE_SHIFT])?;
    for k in 0..3 {
        e = g.conv2d(e, p[ENC + 2 * k], Some(p[ENC + 2 * k + 1]), 2)?;
        e = g.relu(e);
    }

    let r = g.conv2d(e, p[REF], Some(p[REF + 1]), 1)?;
    let r = g.relu(r);
    let r = g.conv2d(r, p[REF + 2], Some(p[REF + 3]), 1)?;
    let e_ref = g.add(e, r)?;

    let pooled = g.global_avg_pool(e);
    let bl = g.conv2d(pooled, p[BOX], Some(p[BOX + 1]), 1)?;
    let b = g.sigmoid(bl);

    let bv = g.value(b).data.clone();
    let (raster, box_degenerate) = rasterize_box([bv[0], bv[1], bv[2], bv[3]], h / 8, w / 8);
    let rn = g.constant(Tensor::from_field(&raster));
    let dec_in = g.concat(&[e, rn])?;
    let s = decode(g, p, DEC, dec_in)?;

    let (a, m_c) = if aux {
        let a = decode(g, p, AUX, e_ref)?;
        let pa = g.sigmoid(a);
        let c = g.conv2d(pa, p[CONF], Some(p[CONF + 1]), 1)?;
        let c = g.relu(c);
        let c = g.conv2d(c, p[CONF + 2], Some(p[CONF + 3]), 1)?;
        (Some(a), Some(g.sigmoid(c)))
    } else {
        (None, None)
    };
    Ok(Outputs {
        s,
        a,
        m_c,
        b,
        e,
        e_ref,
        box_degenerate,
    })
}

/// Binary box-interior channel. Columns span `floor(x_min W) .. ceil(x_max W)`
/// (half-open), rows likewise. Degenerate boxes give zeros and `true`.
pub fn rasterize_box(b: [f64; 4], h: usize, w: usize) -> (Field2D, bool) {
    let [x0, y0, x1, y1] = b;
    if x0 >= x1 || y0 >= y1 {
        return (Field2D::zeros(h, w), true);
    }
    let span = |lo: f64, hi: f64, n: usize| {
        let a = (lo.clamp(0.0, 1.0) * n as f64).floor() as usize;
        let b = ((hi.clamp(0.0, 1.0) * n as f64).ceil() as usize).min(n);
        (a, b)
    };
    let (c0, c1) = span(x0, x1, w);
    let (r0, r1) = span(y0, y1, h);
    let f = Field2D::from_fn(h, w, |r, c| ((r0..r1).contains(&r) && (c0..c1).contains(&c)) as u8 as f32);
    (f, false)
}

/// Tight normalized bounding box `(x_min, y_min, x_max, y_max)` with x the
/// column and a half-open upper edge. Empty masks give zeros and `true`.
pub fn box_from_mask(y: &Mask2D) -> ([f64; 4], bool) {
    let pts = y.points();
    if pts.is_empty() {
        return ([0.0; 4], true);
    }
    let (h, w) = (y.height() as f64, y.width() as f64);
    let rmin = pts.iter().map(|p| p.0).min().unwrap_or(0);
    let rmax = pts.iter().map(|p| p.0).max().unwrap_or(0);
    let cmin = pts.iter().map(|p| p.1).min().unwrap_or(0);
    let cmax = pts.iter().map(|p| p.1).max().unwrap_or(0);
    (
        [
            cmin as f64 / w,
            rmin as f64 / h,
            (cmax + 1) as f64 / w,
            (rmax + 1) as f64 / h,
        ],
        false,
    )
}

/// `s + kappa * logit(clamp(m_c, delta, 1 - delta))`, elementwise.
pub fn modulate(s: &[f64], m_c: &[f64], kappa: f64) -> Vec<f64> {
    s.iter()
        .zip(m_c)
        .map(|(&s, &m)| {
            if kappa == 0.0 {
                return s;
            }
            let m = m.clamp(MODULATION_DELTA, 1.0 - MODULATION_DELTA);
            s + kappa * (m / (1.0 - m)).ln()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub p_final: Field2D,
    pub p_raw: Field2D,
    pub m_c: Field2D,
    pub xai: XaiField,
    pub b: [f64; 4],
}

fn probs(v: &[f64], h: usize, w: usize) -> Result<Field2D> {
    Field2D::new(h, w, v.iter().map(|&x| sigmoid(x) as f32).collect())
}

pub fn infer(model: &ModelParams, x: &Field2D, kappa: f64) -> Result<Inference> {
    if !(kappa >= 0.0 && kappa.is_finite()) {
        return Err(Error::Invalid(format!("kappa must be a finite value >= 0, got {kappa}")));
    }
    let mut g = Graph::new();
    // variables, not constants: the tap must sit on a gradient path
    let p = model.params.bind(&mut g);
    let out = forward(&mut g, &p, x, true)?;
    let (h, w) = x.shape();
    let s = g.value(out.s).data.clone();
    let m_c = g.value(out.m_c.expect("aux branch requested")).data.clone();
    let sur = surrogate_scalar(&mut g, out.s)?;
    let xai = xai_field(&EncoderTap::capture(&g, out.e, sur)?, (h, w))?;
    let bv = &g.value(out.b).data;
    Ok(Inference {
        p_final: probs(&modulate(&s, &m_c, kappa), h, w)?,
        p_raw: probs(&s, h, w)?,
        m_c: Field2D::new(h, w, m_c.iter().map(|&v| v as f32).collect())?,
        xai,
        b: [bv[0], bv[1], bv[2], bv[3]],
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(h: usize, w: usize) -> Field2D {
        Field2D::from_fn(h, w, |r, c| ((r * 7 + c * 3) % 11) as f32 / 10.0)
    }

    #[test]
    fn shape_contract() {
        let m = ModelParams::init(1);
        assert!(m.count() < 100_000);
        for (h, w) in [(64, 64), (16, 32), (24, 16)] {
            let mut g = Graph::new();
            let p = m.params.bind(&mut g);
            let o = forward(&mut g, &p, &image(h, w), true).unwrap();
            for n in [o.s, o.a.unwrap(), o.m_c.unwrap()] {
                assert_eq!(g.shape(n), Shape::new(1, h, w));
            }
            assert_eq!(g.shape(o.e), Shape::new(TAP_CHANNELS, h / 8, w / 8));
            assert!(g.value(o.b).data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        assert!(forward(&mut g, &p, &image(20, 16), true).is_err());
    }

    #[test]
    fn refinement_starts_as_identity() {
        let m = ModelParams::init(2);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let o = forward(&mut g, &p, &image(32, 32), false).unwrap();
        assert_eq!(g.value(o.e), g.value(o.e_ref));
    }

    #[test]
    fn zero_input_with_zero_final_layer_gives_bias_plane() {
        let mut m = ModelParams::init(3);
        m.params.tensors[DEC + 4] = Tensor::zeros(Shape::new(1, 8, 9));
        m.params.tensors[DEC + 5] = Tensor::scalar(0.25);
        let mut g = Graph::new();
        let p = m.params.bind(&mut g);
        let o = forward(&mut g, &p, &Field2D::zeros(16, 16), false).unwrap();
        assert!(g.value(o.s).data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn deterministic_forward() {
        let run = || {
            let inf = infer(&ModelParams::init(4), &image(32, 32), 1.0).unwrap();
            (inf.p_final, inf.m_c)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn rasterize_examples() {
        let (f, d) = rasterize_box([0.0, 0.0, 1.0, 1.0], 8, 8);
        assert!(!d && f.data().iter().all(|&v| v == 1.0));
        let (f, d) = rasterize_box([0.5; 4], 8, 8);
        assert!(d && f.data().iter().all(|&v| v == 0.0));
        let (f, _) = rasterize_box([0.25, 0.25, 0.75, 0.75], 8, 8);
        let want = Field2D::from_fn(8, 8, |r, c| ((2..6).contains(&r) && (2..6).contains(&c)) as u8 as f32);
        assert_eq!(f, want);
    }

    #[test]
    fn box_examples() {
        assert_eq!(box_from_mask(&Mask2D::ones(8, 8)), ([0.0, 0.0, 1.0, 1.0], false));
        assert_eq!(box_from_mask(&Mask2D::zeros(8, 8)), ([0.0; 4], true));
        let (b, _) = box_from_mask(&Mask2D::from_points(8, 8, &[(2, 3)]));
        assert_eq!(b, [3.0 / 8.0, 2.0 / 8.0, 4.0 / 8.0, 3.0 / 8.0]);
        // a mask's own box rasterizes to a superset of the mask
        let y = Mask2D::from_fn(16, 16, |r, c| (3..9).contains(&r) && (5..12).contains(&c));
        let (f, _) = rasterize_box(box_from_mask(&y).0, 16, 16);
        assert_eq!(f, y.to_field());
    }

    #[test]
    fn modulation_examples() {
        let s = [0.3, -1.2, 4.0];
        assert_eq!(modulate(&s, &[0.9, 0.1, 0.7], 0.0), s.to_vec());
        let half = modulate(&s, &[0.5; 3], 3.0);
        assert_eq!(half, s.to_vec());
        let p = sigmoid(modulate(&[0.0], &[0.9], 1.0)[0]);
        assert!((p - 0.9).abs() < 1e-12);

        let inf = infer(&ModelParams::init(5), &image(16, 16), 0.0).unwrap();
        assert_eq!(inf.p_final, inf.p_raw);
        assert!((inf.xai.focus.field().sum() - 1.0).abs() < 1e-5);
        let inf = infer(&ModelParams::init(5), &image(32, 32), 1.0).unwrap();
        assert!(inf.xai.raw.sum() > 0.0, "attribution reached the tap");
    }
}
