use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Smallest perturbation used to look for nearby non-smooth points.
const KINK_WINDOW: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub checked: usize,
    /// Coordinates skipped because a probe crossed a relu/pool/clamp kink.
    pub excluded: usize,
}

fn eval<F>(f: &F, x: &Tensor) -> Result<(f64, u64)>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let xi = g.variable(x.clone());
    let root = f(&mut g, xi)?;
    let v = g.scalar(root);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check probe".into()));
    }
    Ok((v, g.branch_signature()))
}

/// Compares reverse-mode gradients against central differences
/// `(f(x + h e) - f(x - h e)) / 2h`, coordinate by coordinate. Relative error
/// is `|a - b| / max(1, |a|, |b|)`.
pub fn grad_check<F>(f: F, x0: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if h <= 0.0 {
        return Err(Error::Invalid("grad_check step must be positive".into()));
    }
    let mut g = Graph::new();
    let x = g.variable(x0.clone());
    let root = f(&mut g, x)?;
    if !g.scalar(root).is_finite() {
        return Err(Error::NonFinite("grad_check base point".into()));
    }
    let base_sig = g.branch_signature();
    g.backward(root)?;
    let analytic = g.grad(x);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        pass: true,
        checked: 0,
        excluded: 0,
    };
    let window = h.max(KINK_WINDOW);
    let mut probe = x0.clone();
    for i in 0..x0.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let (fp, sp) = eval(&f, &probe)?;
        probe.data[i] = orig - h;
        let (fm, sm) = eval(&f, &probe)?;
        let mut smooth = sp == base_sig && sm == base_sig;
        if smooth && window > h {
            probe.data[i] = orig + window;
            let (_, s1) = eval(&f, &probe)?;
            probe.data[i] = orig - window;
            let (_, s2) = eval(&f, &probe)?;
            smooth = s1 == base_sig && s2 == base_sig;
        }
        probe.data[i] = orig;
        if !smooth {
            report.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data[i];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.max_rel_err = report.max_rel_err.max(rel);
        report.checked += 1;
    }
    report.pass = report.max_rel_err < tol;
    Ok(report)
}
