use crate::error::{Error, Result};
use crate::fields::Field2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense `[C, H, W]` tensor, channel-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::shape(shape, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub(crate) fn new_unchecked(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape, v: f64) -> Self {
        Self {
            shape,
            data: vec![v; shape.len()],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self::filled(Shape::new(1, 1, 1), v)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn from_field(f: &Field2D) -> Self {
        Self {
            shape: Shape::new(1, f.height(), f.width()),
            data: f.data().iter().map(|&v| v as f64).collect(),
        }
    }

    /// Stack equally shaped fields as channels.
    pub fn from_fields(fields: &[&Field2D]) -> Result<Self> {
        let (h, w) = fields
            .first()
            .ok_or_else(|| Error::Invalid("no channels".into()))?
            .shape();
        let mut data = Vec::with_capacity(fields.len() * h * w);
        for f in fields {
            if f.shape() != (h, w) {
                return Err(Error::shape((h, w), f.shape()));
            }
            data.extend(f.data().iter().map(|&v| v as f64));
        }
        Ok(Self {
            shape: Shape::new(fields.len(), h, w),
            data,
        })
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let hw = self.shape.h * self.shape.w;
        &self.data[c * hw..(c + 1) * hw]
    }

    /// Channel `c` as an f32 field.
    pub fn to_field(&self, c: usize) -> Result<Field2D> {
        Field2D::new(
            self.shape.h,
            self.shape.w,
            self.channel(c).iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: Option<&Tensor>,
    k: usize,
    stride: usize,
) -> Tensor {
    let (cin, h, wd) = (x.shape.c, x.shape.h, x.shape.w);
    let cout = w.shape.c;
    let pad = k / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let o = &mut out[co * oh * ow..(co + 1) * oh * ow];
        if let Some(b) = b {
            o.iter_mut().for_each(|v| *v = b.data[co]);
        }
        for ci in 0..cin {
            let xin = &x.data[ci * h * wd..(ci + 1) * h * wd];
            let wk = &w.data[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(ow, wd, stride, kx, pad);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let orow = &mut o[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let src = &row[x0 + kx - pad..x1 + kx - pad];
                            for (ov, &xv) in orow[x0..x1].iter_mut().zip(src) {
                                *ov += wv * xv;
                            }
                        } else {
                            for ox in x0..x1 {
                                orow[ox] += wv * row[ox * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new_unchecked(Shape::new(cout, oh, ow), out)
}

/// Output columns `ox` with `0 <= ox*stride + kx - pad < in_w`.
fn valid_range(ow: usize, in_w: usize, stride: usize, kx: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad { 0 } else { (pad - kx).div_ceil(stride) };
    // ox*stride + kx - pad <= in_w - 1
    let hi_num = in_w as isize - 1 + pad as isize - kx as isize;
    let hi = if hi_num < 0 {
        0
    } else {
        ((hi_num as usize) / stride + 1).min(ow)
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_backward_input(
    g: &Tensor,
    w: &Tensor,
    in_shape: Shape,
    stride: usize,
    dx: &mut [f64],
) {
    let (cin, h, wd) = (in_shape.c, in_shape.h, in_shape.w);
    let (cout, oh, ow) = (g.shape.c, g.shape.h, g.shape.w);
    let k = (w.shape.w as f64).sqrt().round() as usize;
    let pad = k / 2;
    for co in 0..cout {
        let go = &g.data[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let dxi = &mut dx[ci * h * wd..(ci + 1) * h * wd];
            let wk = &w.data[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = wk[ky * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(ow, wd, stride, kx, pad);
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &mut dxi[iy as usize * wd..(iy as usize + 1) * wd];
                        let grow = &go[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let dst = &mut row[x0 + kx - pad..x1 + kx - pad];
                            for (d, &gv) in dst.iter_mut().zip(&grow[x0..x1]) {
                                *d += wv * gv;
                            }
                        } else {
                            for ox in x0..x1 {
                                row[ox * stride + kx - pad] += wv * grow[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_backward_weight(
    g: &Tensor,
    x: &Tensor,
    w_shape: Shape,
    stride: usize,
    dw: &mut [f64],
) {
    let (cin, h, wd) = (x.shape.c, x.shape.h, x.shape.w);
    let (cout, oh, ow) = (g.shape.c, g.shape.h, g.shape.w);
    let k = (w_shape.w as f64).sqrt().round() as usize;
    let pad = k / 2;
    for co in 0..cout {
        let go = &g.data[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..cin {
            let xin = &x.data[ci * h * wd..(ci + 1) * h * wd];
            let base = (co * cin + ci) * k * k;
            for ky in 0..k {
                for kx in 0..k {
                    let (x0, x1) = valid_range(ow, wd, stride, kx, pad);
                    let mut acc = 0.0;
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row = &xin[iy as usize * wd..(iy as usize + 1) * wd];
                        let grow = &go[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let src = &row[x0 + kx - pad..x1 + kx - pad];
                            acc += grow[x0..x1].iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                        } else {
                            for ox in x0..x1 {
                                acc += grow[ox] * row[ox * stride + kx - pad];
                            }
                        }
                    }
                    dw[base + ky * k + kx] += acc;
                }
            }
        }
    }
}

pub(crate) fn maxpool3_forward(x: &Tensor) -> (Tensor, Vec<u32>) {
    let Shape { c, h, w } = x.shape;
    let mut out = Vec::with_capacity(x.len());
    let mut arg = Vec::with_capacity(x.len());
    for ch in 0..c {
        let base = ch * h * w;
        for r in 0..h {
            for col in 0..w {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0;
                for dr in [-1isize, 0, 1] {
                    let rr = (r as isize + dr).clamp(0, h as isize - 1) as usize;
                    for dc in [-1isize, 0, 1] {
                        let cc = (col as isize + dc).clamp(0, w as isize - 1) as usize;
                        let i = base + rr * w + cc;
                        if x.data[i] > best {
                            best = x.data[i];
                            best_i = i;
                        }
                    }
                }
                out.push(best);
                arg.push(best_i as u32);
            }
        }
    }
    (Tensor::new_unchecked(x.shape, out), arg)
}

/// Source index pair and weight of the second tap, per output coordinate.
fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Half-pixel-center bilinear resize (`align_corners = false` convention).
pub fn bilinear_resize(x: &Tensor, h: usize, w: usize) -> Tensor {
    let s = x.shape;
    let ty = bilinear_taps(s.h, h);
    let tx = bilinear_taps(s.w, w);
    let mut out = Vec::with_capacity(s.c * h * w);
    for c in 0..s.c {
        let ch = x.channel(c);
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = ch[y0 * s.w + x0] * (1.0 - fx) + ch[y0 * s.w + x1] * fx;
                let bot = ch[y1 * s.w + x0] * (1.0 - fx) + ch[y1 * s.w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new_unchecked(Shape::new(s.c, h, w), out)
}

pub(crate) fn bilinear_backward(g: &[f64], s_in: Shape, s_out: Shape, dx: &mut [f64]) {
    let ty = bilinear_taps(s_in.h, s_out.h);
    let tx = bilinear_taps(s_in.w, s_out.w);
    let mut i = 0;
    for c in 0..s_in.c {
        let d = &mut dx[c * s_in.h * s_in.w..(c + 1) * s_in.h * s_in.w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let gv = g[i];
                i += 1;
                d[y0 * s_in.w + x0] += gv * (1.0 - fy) * (1.0 - fx);
                d[y0 * s_in.w + x1] += gv * (1.0 - fy) * fx;
                d[y1 * s_in.w + x0] += gv * fy * (1.0 - fx);
                d[y1 * s_in.w + x1] += gv * fy * fx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, w: &Tensor, k: usize, stride: usize) -> Tensor {
        let pad = k as isize / 2;
        let (cin, h, wd) = (x.shape.c, x.shape.h as isize, x.shape.w as isize);
        let cout = w.shape.c;
        let oh = ((h + 2 * pad - k as isize) / stride as isize + 1) as usize;
        let ow = ((wd + 2 * pad - k as isize) / stride as isize + 1) as usize;
        let mut out = vec![0.0; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad;
                                let ix = (ox * stride + kx) as isize - pad;
                                if iy >= 0 && iy < h && ix >= 0 && ix < wd {
                                    acc += w.data[((co * cin + ci) * k + ky) * k + kx]
                                        * x.data[(ci * h as usize + iy as usize) * wd as usize + ix as usize];
                                }
                            }
                        }
                    }
                    out[(co * oh + oy) * ow + ox] = acc;
                }
            }
        }
        Tensor::new_unchecked(Shape::new(cout, oh, ow), out)
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn conv_matches_naive() {
        for &(h, w, k, stride) in &[(5, 7, 3, 1), (8, 8, 3, 2), (7, 5, 3, 2), (6, 6, 5, 1), (4, 4, 1, 1)] {
            let x = Tensor::new(Shape::new(2, h, w), pseudo(2 * h * w, 1)).unwrap();
            let wt = Tensor::new(Shape::new(3, 2, k * k), pseudo(6 * k * k, 2)).unwrap();
            let fast = conv2d_forward(&x, &wt, None, k, stride);
            let slow = naive_conv(&x, &wt, k, stride);
            assert_eq!(fast.shape, slow.shape);
            for (a, b) in fast.data.iter().zip(&slow.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_same_size_is_identity() {
        let x = Tensor::new(Shape::new(1, 3, 4), pseudo(12, 3)).unwrap();
        assert_eq!(bilinear_resize(&x, 3, 4), x);
    }

    #[test]
    fn bilinear_preserves_constants() {
        let x = Tensor::filled(Shape::new(2, 4, 4), 0.7);
        let y = bilinear_resize(&x, 32, 32);
        assert!(y.data.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }
}
