//! Differentiable training losses, written as graph builders.
//!
//! Every function appends nodes to the caller's [`Graph`] and returns the
//! scalar loss node. Ground-truth masks and attribution fields enter as
//! constants; only predictions carry gradient.

use crate::autodiff::{Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};
use crate::fields::Mask2D;

/// Loss coefficients shared by the curriculum stages.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_div: f64,
    pub lambda_c: f64,
    pub gamma_aux: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_div: 0.2,
            lambda_c: 1.0,
            gamma_aux: 0.5,
            alpha1: 0.1,
            alpha2: 0.5,
            beta1: 0.5,
            beta2: 0.1,
            beta3: 0.2,
            eps: 1e-6,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_div", self.lambda_div),
            ("lambda_c", self.lambda_c),
            ("gamma_aux", self.gamma_aux),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
            ("beta3", self.beta3),
        ];
        for (name, v) in named {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

pub fn mask_constant(g: &mut Graph, y: &Mask2D) -> NodeId {
    g.constant(Tensor::from_field(&y.to_field()))
}

fn check_same(g: &Graph, a: NodeId, b: NodeId) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::shape(g.shape(a), g.shape(b)));
    }
    Ok(())
}

/// `1 - (2 sum(a*b) + eps) / (sum a + sum b + eps)`
pub fn dice_form(g: &mut Graph, a: NodeId, b: NodeId, eps: f64) -> Result<NodeId> {
    check_same(g, a, b)?;
    let ab = g.mul(a, b)?;
    let inter = g.sum(ab);
    let num = g.scale(inter, 2.0);
    let num = g.offset(num, eps);
    let sa = g.sum(a);
    let sb = g.sum(b);
    let den = g.add(sa, sb)?;
    let den = g.offset(den, eps);
    let ratio = g.div(num, den)?;
    Ok(g.one_minus(ratio))
}

/// Mass-overlap between probabilities and the unnormalized attribution field.
pub fn l_ovlp(g: &mut Graph, p: NodeId, phi: NodeId, eps: f64) -> Result<NodeId> {
    if g.value(phi).data.iter().any(|&v| v < 0.0) {
        return Err(Error::Invalid("attribution field has negative entries".into()));
    }
    let phi = g.stop_gradient(phi);
    dice_form(g, p, phi, eps)
}

/// Pixel-mean of `p~ ln(p~ + eps) - p~ ln(phi~ + eps)` with `p~ = p / (sum p + eps)`
/// built in-graph and `phi~` held constant.
pub fn l_div(g: &mut Graph, p: NodeId, phi_focus: NodeId, eps: f64) -> Result<NodeId> {
    check_same(g, p, phi_focus)?;
    let phi = g.stop_gradient(phi_focus);
    let mass = g.sum(p);
    let mass = g.offset(mass, eps);
    let pn = g.div(p, mass)?;
    let log_p = g.log(pn, eps);
    let log_phi = g.log(phi, eps);
    let diff = g.sub(log_p, log_phi)?;
    let terms = g.mul(pn, diff)?;
    Ok(g.mean(terms))
}

/// `l_ovlp + lambda_div * l_div`
pub fn l_align(
    g: &mut Graph,
    p: NodeId,
    phi: NodeId,
    phi_focus: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    let ov = l_ovlp(g, p, phi, w.eps)?;
    if w.lambda_div == 0.0 {
        return Ok(ov);
    }
    let dv = l_div(g, p, phi_focus, w.eps)?;
    let dv = g.scale(dv, w.lambda_div);
    g.add(ov, dv)
}

pub const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// `sqrt((Dx f)^2 + (Dy f)^2 + eps)` with zero-padded 3x3 Sobel kernels.
pub fn gradient_magnitude(g: &mut Graph, f: NodeId, eps: f64) -> Result<NodeId> {
    gradient_magnitude_with(g, f, eps, &SOBEL_X, &SOBEL_Y)
}

pub fn gradient_magnitude_with(
    g: &mut Graph,
    f: NodeId,
    eps: f64,
    kx: &[f64; 9],
    ky: &[f64; 9],
) -> Result<NodeId> {
    let wx = g.constant(Tensor::new(Shape::new(1, 1, 9), kx.to_vec())?);
    let wy = g.constant(Tensor::new(Shape::new(1, 1, 9), ky.to_vec())?);
    let dx = g.conv2d(f, wx, None, 1)?;
    let dy = g.conv2d(f, wy, None, 1)?;
    let dx2 = g.mul(dx, dx)?;
    let dy2 = g.mul(dy, dy)?;
    let s = g.add(dx2, dy2)?;
    Ok(g.sqrt(s, eps))
}

/// Dice-form agreement of Sobel gradient magnitudes.
pub fn l_edge(g: &mut Graph, p_star: NodeId, y: &Mask2D, eps: f64) -> Result<NodeId> {
    let yn = mask_constant(g, y);
    check_same(g, p_star, yn)?;
    let gp = gradient_magnitude(g, p_star, eps)?;
    let gy = gradient_magnitude(g, yn, eps)?;
    dice_form(g, gp, gy, eps)
}

fn soft_open(g: &mut Graph, x: NodeId) -> NodeId {
    let e = g.minpool3(x);
    g.maxpool3(e)
}

/// Iterative soft skeleton: erosion by 3x3 min-pooling, opening by
/// min-then-max pooling, accumulating `relu(x - open(x))` residues.
pub fn soft_skeleton(g: &mut Graph, p: NodeId, iterations: usize) -> Result<NodeId> {
    let opened = soft_open(g, p);
    let d = g.sub(p, opened)?;
    let mut skel = g.relu(d);
    let mut cur = p;
    for _ in 0..iterations {
        cur = g.minpool3(cur);
        let opened = soft_open(g, cur);
        let d = g.sub(cur, opened)?;
        let delta = g.relu(d);
        let keep = g.one_minus(skel);
        let add = g.mul(delta, keep)?;
        let add = g.relu(add);
        skel = g.add(skel, add)?;
    }
    Ok(g.clamp(skel, 0.0, 1.0))
}

pub fn l_cline(g: &mut Graph, p: NodeId, y: &Mask2D, iterations: usize, eps: f64) -> Result<NodeId> {
    let yn = mask_constant(g, y);
    check_same(g, p, yn)?;
    let sp = soft_skeleton(g, p, iterations)?;
    let sy = soft_skeleton(g, yn, iterations)?;
    dice_form(g, sp, sy, eps)
}

/// Equal-weight mix of the edge and centerline terms.
pub fn l_anat(g: &mut Graph, p: NodeId, y: &Mask2D, iterations: usize, eps: f64) -> Result<NodeId> {
    let e = l_edge(g, p, y, eps)?;
    let c = l_cline(g, p, y, iterations, eps)?;
    let s = g.add(e, c)?;
    Ok(g.scale(s, 0.5))
}

/// Mean binary cross-entropy `-mean[t ln(q + eps) + (1 - t) ln(1 - q + eps)]`.
pub fn bce(g: &mut Graph, q: NodeId, target: NodeId, eps: f64) -> Result<NodeId> {
    check_same(g, q, target)?;
    let lq = g.log(q, eps);
    let a = g.mul(target, lq)?;
    let one_q = g.one_minus(q);
    let lnq = g.log(one_q, eps);
    let one_t = g.one_minus(target);
    let b = g.mul(one_t, lnq)?;
    let s = g.add(a, b)?;
    let m = g.mean(s);
    Ok(g.scale(m, -1.0))
}

/// Region loss on logits: half BCE plus half soft Dice on `sigmoid(s)`.
pub fn l_region(g: &mut Graph, s: NodeId, y: &Mask2D, eps: f64) -> Result<NodeId> {
    let yn = mask_constant(g, y);
    check_same(g, s, yn)?;
    let p = g.sigmoid(s);
    let b = bce(g, p, yn, eps)?;
    let d = dice_form(g, p, yn, eps)?;
    let t = g.add(b, d)?;
    Ok(g.scale(t, 0.5))
}

/// BCE between the confidence map and the gradient-stopped probabilities.
pub fn l_conf(g: &mut Graph, m_c: NodeId, p_star: NodeId, eps: f64) -> Result<NodeId> {
    let target = g.stop_gradient(p_star);
    bce(g, m_c, target, eps)
}

/// Mean absolute deviation between `[4,1,1]` box vectors.
pub fn l_box(g: &mut Graph, b: NodeId, b_gt: [f64; 4]) -> Result<NodeId> {
    let gt = g.constant(Tensor::new(g.shape(b), b_gt.to_vec())?);
    let d = g.sub(b, gt)?;
    let a = g.abs(d);
    Ok(g.mean(a))
}
