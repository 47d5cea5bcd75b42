//! Gradient-weighted attribution fields from the final encoder block.
//!
//! Channel weights are spatial means of the tapped gradients; the coarse map
//! is the ReLU of the weighted channel sum, lifted to output resolution by
//! bilinear resize and normalized by its total mass.

use crate::autodiff::{bilinear_resize, Graph, NodeId, Shape, Tensor};
use crate::error::{Error, Result};
use crate::fields::Field2D;

pub const DEFAULT_EPS: f64 = 1e-6;

/// Non-negative field with unit mass.
#[derive(Clone, Debug, PartialEq)]
pub struct FocusField(Field2D);

impl FocusField {
    /// Validates non-negativity and `sum == 1 +- 1e-5`.
    pub fn new(f: Field2D) -> Result<Self> {
        if f.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("focus field has negative entries".into()));
        }
        let s = f.sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::Invalid(format!("focus field mass {s} is not 1")));
        }
        Ok(Self(f))
    }

    /// `f / (sum f + eps)`; falls back to uniform when the mass is below `eps`.
    /// The flag reports that fallback.
    pub fn normalize(f: &Field2D, eps: f64) -> Result<(Self, bool)> {
        if f.data().iter().any(|&v| v < 0.0) {
            return Err(Error::Invalid("cannot normalize a field with negative entries".into()));
        }
        let mass = f.sum();
        if mass < eps {
            let n = f.len() as f32;
            return Ok((Self(Field2D::filled(f.height(), f.width(), 1.0 / n)), true));
        }
        let denom = mass + eps;
        Ok((Self(f.map(|v| (v as f64 / denom) as f32)), false))
    }

    pub fn field(&self) -> &Field2D {
        &self.0
    }

    pub fn into_field(self) -> Field2D {
        self.0
    }
}

/// Activations and gradients captured at the final encoder block.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTap {
    pub activations: Tensor,
    pub gradients: Option<Tensor>,
}

impl EncoderTap {
    pub fn new(activations: Tensor, gradients: Option<Tensor>) -> Result<Self> {
        if let Some(g) = &gradients {
            if g.shape != activations.shape {
                return Err(Error::shape(activations.shape, g.shape));
            }
        }
        Ok(Self {
            activations,
            gradients,
        })
    }

    /// Reads the tapped node's value and its gradient w.r.t. `surrogate` from a
    /// live graph without disturbing accumulated gradients.
    pub fn capture(g: &Graph, tap: NodeId, surrogate: NodeId) -> Result<Self> {
        if tap.0 >= g.len() || surrogate.0 >= g.len() {
            return Err(Error::Invalid("tap or surrogate not in this graph".into()));
        }
        let grads = g.grad_of(surrogate, &[tap])?.remove(0);
        Self::new(g.value(tap).clone(), Some(grads))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct XaiField {
    /// Lifted, gated map (non-negative).
    pub raw: Field2D,
    pub focus: FocusField,
    /// Set when the raw map had (near) zero mass and `focus` is uniform.
    pub degenerate: bool,
}

pub fn channel_weights(tap: &EncoderTap) -> Result<Vec<f64>> {
    let g = tap
        .gradients
        .as_ref()
        .ok_or_else(|| Error::Invalid("encoder tap gradients not populated".into()))?;
    let hw = (g.shape.h * g.shape.w) as f64;
    Ok((0..g.shape.c)
        .map(|c| g.channel(c).iter().sum::<f64>() / hw)
        .collect())
}

/// Coarse gated map `relu(sum_c w_c A_c)` at encoder resolution.
pub fn coarse_map(tap: &EncoderTap) -> Result<Tensor> {
    let w = channel_weights(tap)?;
    let s = tap.activations.shape;
    let mut acc = vec![0.0; s.h * s.w];
    for (c, &wc) in w.iter().enumerate() {
        for (a, &v) in acc.iter_mut().zip(tap.activations.channel(c)) {
            *a += wc * v;
        }
    }
    acc.iter_mut().for_each(|v| *v = v.max(0.0));
    Tensor::new(Shape::new(1, s.h, s.w), acc)
}

pub fn xai_field(tap: &EncoderTap, out_shape: (usize, usize)) -> Result<XaiField> {
    xai_field_with_eps(tap, out_shape, DEFAULT_EPS)
}

pub fn xai_field_with_eps(tap: &EncoderTap, out_shape: (usize, usize), eps: f64) -> Result<XaiField> {
    let s = tap.activations.shape;
    let (h, w) = out_shape;
    if h < s.h || w < s.w {
        return Err(Error::Invalid(format!(
            "output shape {out_shape:?} smaller than encoder map {}x{}",
            s.h, s.w
        )));
    }
    let coarse = coarse_map(tap)?;
    let lifted = bilinear_resize(&coarse, h, w);
    let raw = lifted.to_field(0)?;
    let mass: f64 = lifted.sum();
    let (focus, degenerate) = if mass < eps {
        (
            FocusField(Field2D::filled(h, w, 1.0 / (h * w) as f32)),
            true,
        )
    } else {
        // mass >= eps already rules out a blow-up; dividing by the exact mass
        // keeps the unit sum independent of scale
        let data = lifted.data.iter().map(|&v| (v / mass) as f32).collect();
        (FocusField(Field2D::new(h, w, data)?), false)
    };
    Ok(XaiField {
        raw,
        focus,
        degenerate,
    })
}

/// Sum of logits over pixels predicted positive (`sigmoid(s) > 0.5`, i.e.
/// `s > 0`); when nothing is positive, the sum of probabilities instead.
pub fn surrogate_scalar(g: &mut Graph, logits: NodeId) -> Result<NodeId> {
    if logits.0 >= g.len() {
        return Err(Error::Invalid("logits node is not part of this graph".into()));
    }
    let v = g.value(logits);
    if v.data.iter().any(|&x| x > 0.0) {
        let mask = Tensor::new(v.shape, v.data.iter().map(|&x| (x > 0.0) as u8 as f64).collect())?;
        let m = g.constant(mask);
        let sel = g.mul(logits, m)?;
        Ok(g.sum(sel))
    } else {
        let p = g.sigmoid(logits);
        Ok(g.sum(p))
    }
}
