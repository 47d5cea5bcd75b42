//! Self-checks run by `xaiseg verify`: reverse-mode gradients against central
//! differences for every training loss, and the distance/morphology metrics
//! against brute-force enumeration.
//!
//! The edge-loss kernels are injectable so a corrupted operator can be shown
//! to slip past the gradient suite (gradients stay self-consistent) while the
//! metric suite catches it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Graph, NodeId, Shape, Tensor};
use crate::error::Result;
use crate::fields::{boundary, dilate, distance_transform, Mask2D, MaskStack};
use crate::losses::{
    dice_form, gradient_magnitude_with, l_align, l_box, l_cline, l_conf, l_div, l_ovlp, l_region, mask_constant,
    LossWeights, SOBEL_X, SOBEL_Y,
};
use crate::pairnet::{l_pair, PairNet};
use crate::probe::{chamfer, hd95, percentile};

pub const GRAD_TOL: f64 = 1e-3;
pub const GRAD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Copy, Debug)]
pub struct Kernels {
    pub x: [f64; 9],
    pub y: [f64; 9],
}

impl Default for Kernels {
    fn default() -> Self {
        Self { x: SOBEL_X, y: SOBEL_Y }
    }
}

fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> Mask2D {
    Mask2D::from_fn(h, w, |_, _| rng.random_bool(density))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape, scale: f64) -> Tensor {
    Tensor::new(shape, (0..shape.len()).map(|_| rng.random_range(-scale..scale)).collect()).expect("sized")
}

fn edge_with(g: &mut Graph, p: NodeId, y: &Mask2D, eps: f64, k: &Kernels) -> Result<NodeId> {
    let yn = mask_constant(g, y);
    let gp = gradient_magnitude_with(g, p, eps, &k.x, &k.y)?;
    let gy = gradient_magnitude_with(g, yn, eps, &k.x, &k.y)?;
    dice_form(g, gp, gy, eps)
}

type LossFn = Box<dyn Fn(&mut Graph, NodeId) -> Result<NodeId>>;

/// Gradient checks of each loss on `n` random 8x8 inputs. Probabilities are
/// parameterized as `sigmoid(x)` so every probe stays inside (0, 1).
pub fn grad_suite(n: usize, seed: u64, kernels: &Kernels) -> Result<Vec<CheckLine>> {
    let w = LossWeights::default();
    let eps = w.eps;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 8, 8);
    let net = PairNet::init(seed);
    let mut out = Vec::new();
    let names = [
        "l_ovlp", "l_div", "l_align", "l_edge", "l_cline", "l_anat", "lambda_main", "l_conf", "l_box", "l_pair",
    ];
    for name in names {
        let mut worst = 0f64;
        let mut excluded = 0;
        let mut checked = 0;
        let mut pass = true;
        for _ in 0..n {
            let y = random_mask(&mut rng, 8, 8, 0.4);
            let phi = Tensor::new(shape, (0..64).map(|_| rng.random_range(0.0..1.0)).collect())?;
            let phi_sum: f64 = phi.data.iter().sum();
            let focus = Tensor::new(shape, phi.data.iter().map(|v| v / phi_sum).collect())?;
            let target = Tensor::new(shape, (0..64).map(|_| rng.random_range(0.0..1.0)).collect())?;
            let ctx = MaskStack::new((0..3).map(|_| random_mask(&mut rng, 8, 8, 0.4)).collect())?;
            let box_gt = [0.1, 0.2, 0.7, 0.9];
            let k = *kernels;
            let net = net.clone();
            let wc = w.clone();
            let f: LossFn = match name {
                "l_ovlp" => Box::new(move |g, x| {
                    let p = g.sigmoid(x);
                    let ph = g.constant(phi.clone());
                    l_ovlp(g, p, ph, eps)
                }),
                "l_div" => Box::new(move |g, x| {
                    let p = g.sigmoid(x);
                    let fo = g.constant(focus.clone());
                    l_div(g, p, fo, eps)
                }),
                "l_align" => Box::new(move |g, x| {
                    let p = g.sigmoid(x);
                    let ph = g.constant(phi.clone());
                    let fo = g.constant(focus.clone());
                    l_align(g, p, ph, fo, &wc)
                }),
                "l_edge" => Box::new(move |g, x| {
                    let p = g.sigmoid(x);
                    edge_with(g, p, &y, eps, &k)
                }),
                "l_cline" => Box::new(move |g, x| {
                    let p = g.sigmoid(x);
                    l_cline(g, p, &y, 3, eps)
                }),
                "l_anat" => Box::new(move |g, x| {
                    let p = g.sigmoid(x);
                    let e = edge_with(g, p, &y, eps, &k)?;
                    let c = l_cline(g, p, &y, 3, eps)?;
                    let s = g.add(e, c)?;
                    Ok(g.scale(s, 0.5))
                }),
                "lambda_main" => Box::new(move |g, x| l_region(g, x, &y, eps)),
                "l_conf" => Box::new(move |g, x| {
                    let m = g.sigmoid(x);
                    let t = g.constant(target.clone());
                    l_conf(g, m, t, eps)
                }),
                "l_box" => Box::new(move |g, x| {
                    let b = g.sigmoid(x);
                    l_box(g, b, box_gt)
                }),
                _ => Box::new(move |g, x| {
                    let p = g.sigmoid(x);
                    Ok(l_pair(g, &[(1, p)], &ctx, &net, 1.0)?.node)
                }),
            };
            let x0 = if name == "l_box" {
                random_tensor(&mut rng, Shape::new(4, 1, 1), 2.0)
            } else {
                random_tensor(&mut rng, shape, 2.0)
            };
            let r = grad_check(f, &x0, GRAD_STEP, GRAD_TOL)?;
            worst = worst.max(r.max_rel_err);
            excluded += r.excluded;
            checked += r.checked;
            pass &= r.pass;
        }
        out.push(CheckLine {
            name: format!("grad {name}"),
            pass: pass && checked > 0,
            detail: format!("max_rel_err={worst:.3e} checked={checked} kink_excluded={excluded}"),
        });
    }
    Ok(out)
}

fn brute_boundary(y: &Mask2D) -> Mask2D {
    let (h, w) = y.shape();
    let on = |r: isize, c: isize| r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w && y.get(r as usize, c as usize);
    Mask2D::from_fn(h, w, |r, c| {
        let (r, c) = (r as isize, c as isize);
        on(r, c) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dr, dc)| !on(r + dr, c + dc))
    })
}

fn brute_dilate(y: &Mask2D, rad: usize) -> Mask2D {
    let pts = y.points();
    Mask2D::from_fn(y.height(), y.width(), |r, c| {
        pts.iter().any(|&(a, b)| a.abs_diff(r) <= rad && b.abs_diff(c) <= rad)
    })
}

fn brute_min_sq(p: (usize, usize), set: &[(usize, usize)]) -> u64 {
    set.iter()
        .map(|&(a, b)| (a.abs_diff(p.0).pow(2) + b.abs_diff(p.1).pow(2)) as u64)
        .min()
        .expect("non-empty set")
}

fn brute_directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> Vec<f64> {
    a.iter().map(|&p| (brute_min_sq(p, b) as f64).sqrt()).collect()
}

fn brute_chamfer(a: &Mask2D, b: &Mask2D) -> f64 {
    let (pa, pb) = (a.points(), b.points());
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => 0.0,
        (false, false) => {
            let ab = brute_directed(&pa, &pb);
            let ba = brute_directed(&pb, &pa);
            0.5 * (ab.iter().sum::<f64>() / ab.len() as f64 + ba.iter().sum::<f64>() / ba.len() as f64)
        }
        _ => (a.height() + a.width()) as f64,
    }
}

fn brute_hd95(a: &Mask2D, b: &Mask2D) -> f64 {
    let (ba, bb) = (brute_boundary(a), brute_boundary(b));
    let (pa, pb) = (ba.points(), bb.points());
    match (pa.is_empty(), pb.is_empty()) {
        (true, true) => 0.0,
        (false, false) => percentile(&brute_directed(&pa, &pb), 0.95).max(percentile(&brute_directed(&pb, &pa), 0.95)),
        _ => (a.height() + a.width()) as f64,
    }
}

/// Sobel magnitude by direct double loop with zero padding.
fn brute_edge_loss(p: &[f64], y: &Mask2D, eps: f64) -> f64 {
    let (h, w) = y.shape();
    let mag = |f: &dyn Fn(usize, usize) -> f64| -> Vec<f64> {
        let at = |r: isize, c: isize| {
            if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
                0.0
            } else {
                f(r as usize, c as usize)
            }
        };
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h as isize {
            for c in 0..w as isize {
                let gx = at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1)
                    - at(r - 1, c - 1) - 2.0 * at(r, c - 1) - at(r + 1, c - 1);
                let gy = at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1)
                    - at(r - 1, c - 1) - 2.0 * at(r - 1, c) - at(r - 1, c + 1);
                out.push((gx * gx + gy * gy + eps).sqrt());
            }
        }
        out
    };
    let gp = mag(&|r, c| p[r * w + c]);
    let gy = mag(&|r, c| y.get(r, c) as u8 as f64);
    let inter: f64 = gp.iter().zip(&gy).map(|(a, b)| a * b).sum();
    1.0 - (2.0 * inter + eps) / (gp.iter().sum::<f64>() + gy.iter().sum::<f64>() + eps)
}

/// Distance/morphology metrics on `n` random mask pairs up to 32x32 versus
/// brute force (exact equality), plus the edge-operator fixture.
pub fn metric_suite(n: usize, seed: u64, kernels: &Kernels) -> Result<Vec<CheckLine>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fails = [0usize; 6];
    let mut edge_err = 0f64;
    for _ in 0..n {
        let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
        let density = rng.random_range(0.0..0.6);
        let a = random_mask(&mut rng, h, w, density);
        let b = random_mask(&mut rng, h, w, density);
        let r = rng.random_range(0..4);
        fails[0] += (boundary(&a) != brute_boundary(&a)) as usize;
        fails[1] += (dilate(&a, r) != brute_dilate(&a, r)) as usize;
        let dt = distance_transform(&a);
        let pts = a.points();
        let want: Vec<f32> = (0..h * w)
            .map(|i| {
                if pts.is_empty() {
                    (h + w) as f32
                } else {
                    (brute_min_sq((i / w, i % w), &pts) as f64).sqrt() as f32
                }
            })
            .collect();
        fails[2] += (dt.distances.data() != want.as_slice()) as usize;
        let (ba, bb) = (boundary(&a), boundary(&b));
        fails[3] += (chamfer(&ba, &bb)?.value != brute_chamfer(&ba, &bb)) as usize;
        fails[4] += (hd95(&a, &b)?.value != brute_hd95(&a, &b)) as usize;

        if h >= 3 && w >= 3 {
            let p: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.0..1.0)).collect();
            let mut g = Graph::new();
            let pn = g.constant(Tensor::new(Shape::new(1, h, w), p.clone())?);
            let l = edge_with(&mut g, pn, &b, 1e-6, kernels)?;
            let err = (g.scalar(l) - brute_edge_loss(&p, &b, 1e-6)).abs();
            edge_err = edge_err.max(err);
            fails[5] += (err > 1e-9) as usize;
        }
    }
    let names = ["boundary", "dilate", "distance_transform", "chamfer", "hd95", "edge_operator"];
    Ok(names
        .iter()
        .zip(fails)
        .map(|(name, f)| CheckLine {
            name: format!("metric {name}"),
            pass: f == 0,
            detail: if *name == "edge_operator" {
                format!("mismatches={f}/{n} max_abs_err={edge_err:.3e}")
            } else {
                format!("mismatches={f}/{n}")
            },
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suites_pass_with_true_kernels() {
        let k = Kernels::default();
        for line in grad_suite(2, 1, &k).unwrap().into_iter().chain(metric_suite(40, 1, &k).unwrap()) {
            assert!(line.pass, "{line:?}");
        }
    }

    #[test]
    fn wrong_sobel_is_caught_by_metrics_only() {
        let mut k = Kernels::default();
        k.x[3] = -1.0;
        assert!(grad_suite(2, 2, &k).unwrap().iter().all(|l| l.pass));
        let m = metric_suite(40, 2, &k).unwrap();
        let edge = m.iter().find(|l| l.name == "metric edge_operator").unwrap();
        assert!(!edge.pass);
    }
}
