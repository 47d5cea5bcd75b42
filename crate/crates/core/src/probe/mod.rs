//! Failure-analysis indices and evaluation metrics.
//!
//! Everything here is non-differentiable and computed in f64 on finished
//! predictions. Natural logarithms throughout, so divergence bounds read
//! `ln 2`. Distances are in pixels.

mod report;

pub use report::{ProbeReport, SliceProbe};

use crate::attribution::FocusField;
use crate::error::{Error, Result};
use crate::fields::{boundary, dilate, squared_distance_transform, Field2D, Mask2D, MaskStack};

pub const DEFAULT_EPS: f64 = 1e-6;

fn check_shape(a: (usize, usize), b: (usize, usize)) -> Result<()> {
    if a != b {
        return Err(Error::shape(a, b));
    }
    Ok(())
}

/// Jensen-Shannon divergence with `0 ln 0 = 0`; lies in `[0, ln 2]`.
pub fn jsd(p: &FocusField, q: &FocusField) -> Result<f64> {
    check_shape(p.field().shape(), q.field().shape())?;
    Ok(jsd_slices(p.field().data(), q.field().data()))
}

fn jsd_slices(p: &[f32], q: &[f32]) -> f64 {
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (a, b) = (a as f64, b as f64);
        let m = 0.5 * (a + b);
        if a > 0.0 {
            kl_p += a * (a / m).ln();
        }
        if b > 0.0 {
            kl_q += b * (b / m).ln();
        }
    }
    // rounding can leave tiny negatives or overshoot ln 2
    (0.5 * kl_p + 0.5 * kl_q).clamp(0.0, std::f64::consts::LN_2)
}

fn check_nonneg(f: &Field2D, what: &str) -> Result<()> {
    if f.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Invalid(format!("{what} has negative entries")));
    }
    Ok(())
}

fn masked_mass(f: &Field2D, y: &Mask2D, inside: bool) -> f64 {
    f.data()
        .iter()
        .zip(y.data())
        .filter(|(_, &m)| (m == 1) == inside)
        .map(|(&v, _)| v as f64)
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocusOverlap {
    pub foi: f64,
    pub fmi: f64,
    /// The attribution field had zero mass.
    pub degenerate: bool,
}

/// Share of attribution mass inside the mask and its complement.
pub fn foi_fmi(phi: &Field2D, y: &Mask2D, eps: f64) -> Result<FocusOverlap> {
    check_shape(phi.shape(), y.shape())?;
    check_nonneg(phi, "attribution field")?;
    let total = phi.sum();
    let foi = masked_mass(phi, y, true) / (total + eps);
    Ok(FocusOverlap {
        foi,
        fmi: 1.0 - foi,
        degenerate: total == 0.0,
    })
}

/// Mass on the mask complement, `sum f(1-y) / (sum f + eps)`.
pub fn leak(f: &Field2D, y: &Mask2D, eps: f64) -> Result<f64> {
    check_shape(f.shape(), y.shape())?;
    check_nonneg(f, "leak input")?;
    Ok(masked_mass(f, y, false) / (f.sum() + eps))
}

/// Attribution mass within the `r`-dilated one-pixel boundary band.
pub fn bcov(phi: &Field2D, y: &Mask2D, r: usize, eps: f64) -> Result<f64> {
    check_shape(phi.shape(), y.shape())?;
    check_nonneg(phi, "attribution field")?;
    let band = dilate(&boundary(y), r);
    Ok(masked_mass(phi, &band, true) / (phi.sum() + eps))
}

/// Result of a boundary-distance metric. `one_empty` marks the sentinel case.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Distance {
    pub value: f64,
    pub both_empty: bool,
    pub one_empty: bool,
}

/// Distances from each set pixel of `from` to the nearest set pixel of `to`,
/// in row-major order of `from`.
fn directed_distances(from: &Mask2D, to_sq: &[u64]) -> Vec<f64> {
    from.data()
        .iter()
        .zip(to_sq)
        .filter(|(&m, _)| m == 1)
        .map(|(_, &d)| (d as f64).sqrt())
        .collect()
}

fn empty_case(a: &Mask2D, b: &Mask2D) -> Option<Distance> {
    match (a.is_blank(), b.is_blank()) {
        (true, true) => Some(Distance {
            value: 0.0,
            both_empty: true,
            one_empty: false,
        }),
        (true, false) | (false, true) => Some(Distance {
            value: (a.height() + a.width()) as f64,
            both_empty: false,
            one_empty: true,
        }),
        _ => None,
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Symmetric mean nearest-point distance between two point sets (usually
/// boundaries), `(mean_a min_b + mean_b min_a) / 2`.
pub fn chamfer(a: &Mask2D, b: &Mask2D) -> Result<Distance> {
    check_shape(a.shape(), b.shape())?;
    if let Some(d) = empty_case(a, b) {
        return Ok(d);
    }
    let da = squared_distance_transform(a).expect("non-empty");
    let db = squared_distance_transform(b).expect("non-empty");
    let ab = directed_distances(a, &db);
    let ba = directed_distances(b, &da);
    Ok(Distance {
        value: 0.5 * (mean(&ab) + mean(&ba)),
        both_empty: false,
        one_empty: false,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Consistency {
    /// Mean boundary chamfer over valid consecutive pairs (0 if none).
    pub e_cons: f64,
    pub valid_pairs: usize,
    /// Pairs skipped because either slice was empty.
    pub excluded_pairs: usize,
}

/// Slice-to-slice consistency energy of a stack of binary predictions.
pub fn e_cons(stack: &MaskStack) -> Result<Consistency> {
    if stack.depth() < 2 {
        return Err(Error::Invalid("consistency needs at least two slices".into()));
    }
    let bounds: Vec<Mask2D> = stack.slices().iter().map(boundary).collect();
    let mut total = 0.0;
    let mut valid = 0;
    let mut excluded = 0;
    for w in bounds.windows(2) {
        if w[0].is_blank() || w[1].is_blank() {
            excluded += 1;
            continue;
        }
        total += chamfer(&w[0], &w[1])?.value;
        valid += 1;
    }
    Ok(Consistency {
        e_cons: if valid > 0 { total / valid as f64 } else { 0.0 },
        valid_pairs: valid,
        excluded_pairs: excluded,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Overlap {
    pub iou: f64,
    pub dice: f64,
    pub both_empty: bool,
}

pub fn iou_dice(pred: &Mask2D, truth: &Mask2D) -> Result<Overlap> {
    check_shape(pred.shape(), truth.shape())?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        inter += (a & b) as usize;
        union += (a | b) as usize;
    }
    if union == 0 {
        return Ok(Overlap {
            iou: 1.0,
            dice: 1.0,
            both_empty: true,
        });
    }
    let total = pred.count() + truth.count();
    Ok(Overlap {
        iou: inter as f64 / union as f64,
        dice: 2.0 * inter as f64 / total as f64,
        both_empty: false,
    })
}

/// Percentile with linear interpolation between closest ranks
/// (`pos = q (n - 1)` on the sorted values).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    v[lo] + (v[hi] - v[lo]) * frac
}

/// 95th-percentile Hausdorff distance between mask boundaries: the larger of
/// the two directed 95th percentiles.
pub fn hd95(pred: &Mask2D, truth: &Mask2D) -> Result<Distance> {
    check_shape(pred.shape(), truth.shape())?;
    let (bp, bt) = (boundary(pred), boundary(truth));
    if let Some(d) = empty_case(&bp, &bt) {
        return Ok(d);
    }
    let dp = squared_distance_transform(&bp).expect("non-empty");
    let dt = squared_distance_transform(&bt).expect("non-empty");
    let forward = percentile(&directed_distances(&bp, &dt), 0.95);
    let backward = percentile(&directed_distances(&bt, &dp), 0.95);
    Ok(Distance {
        value: forward.max(backward),
        both_empty: false,
        one_empty: false,
    })
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation: Pearson correlation of average-tie ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::shape(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(Error::Invalid("spearman needs at least two points".into()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("spearman input".into()));
    }
    let (rx, ry) = (ranks(xs), ranks(ys));
    let (mx, my) = (mean(&rx), mean(&ry));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Invalid("spearman undefined for constant input".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    fn focus(v: &[f32]) -> FocusField {
        FocusField::new(Field2D::new(1, v.len(), v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn jsd_examples() {
        let a = focus(&[0.25, 0.25, 0.5]);
        assert_eq!(jsd(&a, &a).unwrap(), 0.0);
        let d = jsd(&focus(&[1.0, 0.0]), &focus(&[0.0, 1.0])).unwrap();
        assert!((d - LN_2).abs() < 1e-12);
        // 0.5*[0.5 ln(2/3) + 0.5 ln 2] + 0.5*ln(4/3)
        let want = 0.5 * (0.5 * (0.5f64 / 0.75).ln() + 0.5 * (0.5f64 / 0.25).ln())
            + 0.5 * (1.0f64 / 0.75).ln();
        let d = jsd(&focus(&[0.5, 0.5]), &focus(&[1.0, 0.0])).unwrap();
        assert!((d - want).abs() < 1e-12);
        assert!((d - 0.21576).abs() < 1e-5);
    }

    #[test]
    fn foi_examples() {
        let phi = Field2D::from_rows(&[&[0.2, 0.3], &[0.1, 0.4]]).unwrap();
        let y = Mask2D::from_rows(&[&[1, 0], &[0, 1]]).unwrap();
        let f = foi_fmi(&phi, &y, 0.0).unwrap();
        assert!((f.foi - 0.6).abs() < 1e-6 && (f.fmi - 0.4).abs() < 1e-6);
        assert!((leak(&phi, &y, 0.0).unwrap() - 0.4).abs() < 1e-6);

        let inside = foi_fmi(&Field2D::from_rows(&[&[1.0, 0.0]]).unwrap(), &Mask2D::from_rows(&[&[1, 0]]).unwrap(), 1e-6).unwrap();
        assert!((inside.foi - 1.0).abs() < 1e-5);

        let zero = foi_fmi(&Field2D::zeros(2, 2), &y, 1e-6).unwrap();
        assert_eq!((zero.foi, zero.fmi, zero.degenerate), (0.0, 1.0, true));
        assert!(foi_fmi(&Field2D::from_rows(&[&[-1.0, 0.0]]).unwrap(), &Mask2D::zeros(1, 2), 1e-6).is_err());
    }

    #[test]
    fn leak_examples() {
        let y = Mask2D::from_rows(&[&[1, 1, 0]]).unwrap();
        assert_eq!(leak(&Field2D::from_rows(&[&[0.3, 0.7, 0.0]]).unwrap(), &y, 1e-6).unwrap(), 0.0);
        let out = leak(&Field2D::from_rows(&[&[0.0, 0.0, 5.0]]).unwrap(), &y, 1e-6).unwrap();
        assert!((out - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bcov_examples() {
        let y = Mask2D::from_points(3, 3, &[(1, 1)]);
        let uni = Field2D::filled(3, 3, 1.0);
        assert!((bcov(&uni, &y, 1, 1e-6).unwrap() - 1.0).abs() < 1e-6);

        let y = Mask2D::from_fn(8, 8, |r, c| (2..6).contains(&r) && (2..6).contains(&c));
        let far = Field2D::from_fn(8, 8, |r, c| if r == 7 && c == 7 { 1.0 } else { 0.0 });
        assert_eq!(bcov(&far, &y, 1, 1e-6).unwrap(), 0.0);

        // band oracle: pixels within Chebyshev 1 of the 4x4 square's 12-pixel ring
        let ring: Vec<(usize, usize)> = y.points().into_iter().filter(|&(r, c)| r == 2 || r == 5 || c == 2 || c == 5).collect();
        let band = (0..64)
            .filter(|i| {
                let (r, c) = (i / 8, i % 8);
                ring.iter().any(|&(a, b)| a.abs_diff(r) <= 1 && b.abs_diff(c) <= 1)
            })
            .count();
        let uni = Field2D::filled(8, 8, 1.0);
        let got = bcov(&uni, &y, 1, 1e-6).unwrap();
        assert!((got - band as f64 / 64.0).abs() < 1e-6, "{got} vs {band}/64");
    }

    #[test]
    fn chamfer_examples() {
        let a = Mask2D::from_points(4, 4, &[(0, 0), (2, 3)]);
        assert_eq!(chamfer(&a, &a).unwrap().value, 0.0);
        let a = Mask2D::from_points(1, 4, &[(0, 0)]);
        let b = Mask2D::from_points(1, 4, &[(0, 3)]);
        assert_eq!(chamfer(&a, &b).unwrap().value, 3.0);
        let a = Mask2D::from_points(1, 3, &[(0, 0), (0, 2)]);
        let b = Mask2D::from_points(1, 3, &[(0, 1)]);
        assert_eq!(chamfer(&a, &b).unwrap().value, 1.0);
        let e = chamfer(&Mask2D::zeros(3, 4), &b.clone().transpose().transpose()).unwrap_err();
        assert!(matches!(e, Error::Shape { .. }));
        let one = chamfer(&Mask2D::zeros(1, 3), &b).unwrap();
        assert!(one.one_empty && one.value == 4.0);
        let both = chamfer(&Mask2D::zeros(1, 3), &Mask2D::zeros(1, 3)).unwrap();
        assert!(both.both_empty && both.value == 0.0);
    }

    #[test]
    fn e_cons_examples() {
        let m = Mask2D::from_fn(6, 6, |r, c| (1..4).contains(&r) && (1..5).contains(&c));
        let s = MaskStack::new(vec![m.clone(), m.clone(), m]).unwrap();
        assert_eq!(e_cons(&s).unwrap().e_cons, 0.0);
        // single-pixel masks are their own boundaries
        let a = Mask2D::from_points(1, 3, &[(0, 0), (0, 2)]);
        let b = Mask2D::from_points(1, 3, &[(0, 1)]);
        let s = MaskStack::new(vec![a.clone(), b]).unwrap();
        let c = e_cons(&s).unwrap();
        assert_eq!((c.e_cons, c.valid_pairs), (1.0, 1));
        assert!(e_cons(&MaskStack::new(vec![a.clone()]).unwrap()).is_err());
        let s = MaskStack::new(vec![a, Mask2D::zeros(1, 3)]).unwrap();
        let c = e_cons(&s).unwrap();
        assert_eq!((c.valid_pairs, c.excluded_pairs), (0, 1));
    }

    #[test]
    fn overlap_examples() {
        let sq = |c0: usize| Mask2D::from_fn(8, 8, |r, c| (2..6).contains(&r) && (c0..c0 + 2).contains(&c));
        let a = sq(2);
        let o = iou_dice(&a, &a).unwrap();
        assert_eq!((o.iou, o.dice), (1.0, 1.0));
        let o = iou_dice(&sq(0), &sq(4)).unwrap();
        assert_eq!((o.iou, o.dice), (0.0, 0.0));
        // two 8-pixel rectangles sharing 4 pixels
        let a = Mask2D::from_fn(8, 8, |r, c| (2..4).contains(&r) && (2..6).contains(&c));
        let b = Mask2D::from_fn(8, 8, |r, c| (2..4).contains(&r) && (4..8).contains(&c));
        let o = iou_dice(&a, &b).unwrap();
        assert!((o.iou - 4.0 / 12.0).abs() < 1e-12 && (o.dice - 0.5).abs() < 1e-12);
        let e = iou_dice(&Mask2D::zeros(2, 2), &Mask2D::zeros(2, 2)).unwrap();
        assert!(e.both_empty && e.iou == 1.0 && e.dice == 1.0);
    }

    #[test]
    fn hd95_examples() {
        let a = Mask2D::from_fn(16, 16, |r, c| (4..12).contains(&r) && (4..12).contains(&c));
        assert_eq!(hd95(&a, &a).unwrap().value, 0.0);
        let p = Mask2D::from_points(8, 8, &[(1, 1)]);
        let q = Mask2D::from_points(8, 8, &[(4, 5)]);
        assert_eq!(hd95(&p, &q).unwrap().value, 5.0);
        let b = Mask2D::from_fn(16, 16, |r, c| (4..12).contains(&r) && (6..14).contains(&c));
        assert_eq!(hd95(&a, &b).unwrap().value, 2.0);
    }

    #[test]
    fn percentile_interpolates() {
        assert_eq!(percentile(&[0.0, 10.0], 0.95), 9.5);
        assert_eq!(percentile(&[3.0], 0.95), 3.0);
    }

    #[test]
    fn spearman_examples() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // ranks (1, 2.5, 2.5, 4) vs (1, 2, 3, 4): cov 4.5 / sqrt(4.5 * 5)
        let r = spearman(&[1.0, 2.0, 2.0, 3.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r - 4.5 / (4.5f64 * 5.0).sqrt()).abs() < 1e-12);
        assert!((r - 0.9487).abs() < 1e-4);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }
}
