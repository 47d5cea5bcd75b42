use super::{Field2D, Mask2D};

/// One-pixel inner boundary: a set pixel with at least one 4-neighbor that is
/// unset or outside the frame.
pub fn boundary(y: &Mask2D) -> Mask2D {
    let (h, w) = y.shape();
    Mask2D::from_fn(h, w, |r, c| {
        if !y.get(r, c) {
            return false;
        }
        r == 0 || c == 0 || r + 1 == h || c + 1 == w
            || !y.get(r - 1, c)
            || !y.get(r + 1, c)
            || !y.get(r, c - 1)
            || !y.get(r, c + 1)
    })
}

/// `r` applications of the 3x3 square structuring element, i.e. every pixel
/// within Chebyshev distance `r` of a set pixel.
pub fn dilate(y: &Mask2D, r: usize) -> Mask2D {
    if r == 0 {
        return y.clone();
    }
    let (h, w) = y.shape();
    // separable: horizontal pass then vertical pass
    let mut horiz = Mask2D::zeros(h, w);
    for row in 0..h {
        let mut last: Option<usize> = None;
        let mut next_on = vec![usize::MAX; w];
        let mut nxt = usize::MAX;
        for col in (0..w).rev() {
            if y.get(row, col) {
                nxt = col;
            }
            next_on[col] = nxt;
        }
        for col in 0..w {
            if y.get(row, col) {
                last = Some(col);
            }
            let near_left = last.is_some_and(|l| col - l <= r);
            let near_right = next_on[col] != usize::MAX && next_on[col] - col <= r;
            horiz.set(row, col, near_left || near_right);
        }
    }
    let mut out = Mask2D::zeros(h, w);
    for col in 0..w {
        let mut last: Option<usize> = None;
        let mut next_on = vec![usize::MAX; h];
        let mut nxt = usize::MAX;
        for row in (0..h).rev() {
            if horiz.get(row, col) {
                nxt = row;
            }
            next_on[row] = nxt;
        }
        for row in 0..h {
            if horiz.get(row, col) {
                last = Some(row);
            }
            let near_up = last.is_some_and(|l| row - l <= r);
            let near_down = next_on[row] != usize::MAX && next_on[row] - row <= r;
            out.set(row, col, near_up || near_down);
        }
    }
    out
}

/// Exact Euclidean distance map plus a flag for the empty-mask case.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMap {
    pub distances: Field2D,
    /// Set when the mask had no pixels; every distance is then `H + W`.
    pub empty: bool,
}

/// Exact squared Euclidean distance from every pixel to the nearest set
/// pixel, as integers. `None` when the mask is empty.
///
/// Two-pass lower-envelope-of-parabolas transform: columns first, then rows,
/// each in linear time.
pub fn squared_distance_transform(y: &Mask2D) -> Option<Vec<u64>> {
    let (h, w) = y.shape();
    if y.is_blank() {
        return None;
    }
    // column pass: vertical squared distance, None if the column is empty
    let mut col_sq: Vec<Option<u64>> = vec![None; h * w];
    let mut pts = Vec::with_capacity(h.max(w));
    let mut vals = Vec::with_capacity(h.max(w));
    let mut out = vec![0u64; h.max(w)];
    for c in 0..w {
        pts.clear();
        vals.clear();
        for r in 0..h {
            if y.get(r, c) {
                pts.push(r as i64);
                vals.push(0u64);
            }
        }
        if pts.is_empty() {
            continue;
        }
        lower_envelope(&pts, &vals, h, &mut out);
        for r in 0..h {
            col_sq[r * w + c] = Some(out[r]);
        }
    }
    let mut result = vec![0u64; h * w];
    for r in 0..h {
        pts.clear();
        vals.clear();
        for c in 0..w {
            if let Some(v) = col_sq[r * w + c] {
                pts.push(c as i64);
                vals.push(v);
            }
        }
        // every row sees at least one non-empty column since the mask is non-blank
        lower_envelope(&pts, &vals, w, &mut out);
        result[r * w..(r + 1) * w].copy_from_slice(&out[..w]);
    }
    Some(result)
}

/// `out[q] = min_k (q - pts[k])^2 + vals[k]` for `q in 0..n`; `pts` ascending.
fn lower_envelope(pts: &[i64], vals: &[u64], n: usize, out: &mut [u64]) {
    // parabola k: f(q) = (q - p_k)^2 + v_k; all quantities are small integers
    // so the intersections are exact in f64
    let inter = |i: usize, j: usize| -> f64 {
        let (pi, pj) = (pts[i] as f64, pts[j] as f64);
        let (vi, vj) = (vals[i] as f64, vals[j] as f64);
        ((vj + pj * pj) - (vi + pi * pi)) / (2.0 * (pj - pi))
    };
    let mut hull: Vec<usize> = Vec::with_capacity(pts.len());
    let mut starts: Vec<f64> = Vec::with_capacity(pts.len());
    for k in 0..pts.len() {
        loop {
            match hull.last() {
                None => {
                    hull.push(k);
                    starts.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&top) => {
                    let s = inter(top, k);
                    if s <= *starts.last().unwrap() {
                        hull.pop();
                        starts.pop();
                    } else {
                        hull.push(k);
                        starts.push(s);
                        break;
                    }
                }
            }
        }
    }
    let mut idx = 0;
    for (q, slot) in out.iter_mut().enumerate().take(n) {
        let qf = q as f64;
        while idx + 1 < hull.len() && starts[idx + 1] < qf {
            idx += 1;
        }
        let k = hull[idx];
        let d = q as i64 - pts[k];
        *slot = (d * d) as u64 + vals[k];
    }
}

/// Exact Euclidean distance to the nearest set pixel. An empty mask yields
/// the finite sentinel `H + W` everywhere with `empty` set.
pub fn distance_transform(y: &Mask2D) -> DistanceMap {
    let (h, w) = y.shape();
    match squared_distance_transform(y) {
        Some(sq) => DistanceMap {
            distances: Field2D {
                height: h,
                width: w,
                data: sq.iter().map(|&v| (v as f64).sqrt() as f32).collect(),
            },
            empty: false,
        },
        None => DistanceMap {
            distances: Field2D::filled(h, w, (h + w) as f32),
            empty: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute_sq(y: &Mask2D) -> Vec<u64> {
        let pts = y.points();
        let (h, w) = y.shape();
        let mut out = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                out.push(
                    pts.iter()
                        .map(|&(pr, pc)| {
                            let dr = r as i64 - pr as i64;
                            let dc = c as i64 - pc as i64;
                            (dr * dr + dc * dc) as u64
                        })
                        .min()
                        .unwrap(),
                );
            }
        }
        out
    }

    fn brute_dilate(y: &Mask2D, r: usize) -> Mask2D {
        let pts = y.points();
        let (h, w) = y.shape();
        Mask2D::from_fn(h, w, |i, j| {
            pts.iter()
                .any(|&(a, b)| a.abs_diff(i).max(b.abs_diff(j)) <= r)
        })
    }

    #[test]
    fn boundary_cases() {
        let full = Mask2D::ones(3, 3);
        let b = boundary(&full);
        assert_eq!(b.count(), 8);
        assert!(!b.get(1, 1));
        let single = Mask2D::from_points(3, 3, &[(1, 1)]);
        assert_eq!(boundary(&single), single);
        assert!(boundary(&Mask2D::zeros(4, 4)).is_blank());
    }

    #[test]
    fn dilate_cases() {
        let m = Mask2D::from_points(5, 5, &[(2, 2)]);
        assert_eq!(dilate(&m, 0), m);
        let d1 = dilate(&m, 1);
        assert_eq!(d1.count(), 9);
        assert!(d1.get(1, 1) && d1.get(3, 3) && !d1.get(0, 0));
        assert_eq!(dilate(&m, 2), Mask2D::ones(5, 5));
    }

    #[test]
    fn distance_cases() {
        let m = Mask2D::from_points(5, 5, &[(0, 0)]);
        assert_eq!(distance_transform(&m).distances.get(3, 4), 5.0);
        let all = distance_transform(&Mask2D::ones(4, 4));
        assert!(all.distances.data().iter().all(|&v| v == 0.0));
        let two = Mask2D::from_points(1, 5, &[(0, 0), (0, 4)]);
        assert_eq!(distance_transform(&two).distances.get(0, 2), 2.0);
        let empty = distance_transform(&Mask2D::zeros(3, 4));
        assert!(empty.empty);
        assert!(empty.distances.data().iter().all(|&v| v == 7.0));
    }

    fn mask_strategy(max: usize) -> impl Strategy<Value = Mask2D> {
        (1..=max, 1..=max, 0.0f64..1.0).prop_flat_map(|(h, w, density)| {
            proptest::collection::vec(proptest::bool::weighted(density.max(0.02)), h * w)
                .prop_map(move |bits| {
                    Mask2D::new(h, w, bits.into_iter().map(|b| b as u8).collect()).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn edt_matches_brute_force(y in mask_strategy(16)) {
            match squared_distance_transform(&y) {
                None => prop_assert!(y.is_blank()),
                Some(sq) => prop_assert_eq!(sq, brute_sq(&y)),
            }
        }

        #[test]
        fn dilate_matches_chebyshev(y in mask_strategy(12), r in 0usize..4) {
            prop_assert_eq!(dilate(&y, r), brute_dilate(&y, r));
        }

        #[test]
        fn boundary_and_dilate_are_monotone(y in mask_strategy(12), r1 in 0usize..3, extra in 0usize..3) {
            prop_assert!(boundary(&y).is_subset_of(&y));
            prop_assert!(dilate(&y, r1).is_subset_of(&dilate(&y, r1 + extra)));
        }
    }
}
