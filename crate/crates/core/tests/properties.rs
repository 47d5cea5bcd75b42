use proptest::prelude::*;

use xaiseg::evaluate::{evaluate, Predictor, Target};
use xaiseg::fields::Mask2D;
use xaiseg::model::{box_from_mask, modulate, rasterize_box};
use xaiseg::pairnet::sample_pairs;
use xaiseg::phantom::{generate, generate_dataset, DatasetConfig, PhantomSpec};
use xaiseg::probe::{chamfer, iou_dice};

fn spec(complex: bool, seed: u64, depth: usize) -> PhantomSpec {
    if complex {
        PhantomSpec::complex(32, 32, depth, seed)
    } else {
        PhantomSpec::easy(32, 32, depth, seed)
    }
}

fn small(seed: u64, complex: bool) -> PhantomSpec {
    PhantomSpec {
        radius: (6.0, 9.0),
        ..spec(complex, seed, 4)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn lumen_inside_outer_region(seed in any::<u64>(), complex in any::<bool>()) {
        let v = generate(&small(seed, complex)).unwrap();
        for (l, w) in v.lumen_masks.slices().iter().zip(v.wall_masks.slices()) {
            prop_assert!(l.is_subset_of(w));
            prop_assert!(!l.is_blank());
        }
        prop_assert!(v.images.slices().iter().all(|f| f.data().iter().all(|x| x.is_finite())));
    }

    #[test]
    fn generation_is_seeded(seed in any::<u64>()) {
        prop_assert_eq!(generate(&small(seed, true)).unwrap(), generate(&small(seed, true)).unwrap());
    }

    #[test]
    fn pair_labels_follow_adjacency(seed in any::<u64>(), n_neg in 0usize..8) {
        let v = generate(&small(seed, false)).unwrap();
        let s = sample_pairs(&v.wall_masks, "v", n_neg, seed).unwrap();
        for p in &s.samples {
            prop_assert_eq!(p.label, p.j == p.i + 1);
        }
        prop_assert_eq!(s.samples.iter().filter(|p| p.label).count(), 3);
    }

    #[test]
    fn modulation_is_monotone_in_confidence(
        s in -15.0f64..15.0,
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
        kappa in 0.0f64..5.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let out = modulate(&[s, s], &[lo, hi], kappa);
        prop_assert!(out[0] <= out[1]);
    }

    #[test]
    fn box_round_trip_covers_mask(r0 in 0usize..16, c0 in 0usize..16, dh in 1usize..16, dw in 1usize..16) {
        let (r1, c1) = ((r0 + dh).min(32), (c0 + dw).min(32));
        let y = Mask2D::from_fn(32, 32, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c));
        let (b, empty) = box_from_mask(&y);
        prop_assert!(!empty);
        let (raster, degenerate) = rasterize_box(b, 32, 32);
        prop_assert!(!degenerate);
        let m = Mask2D::from_fn(32, 32, |r, c| raster.get(r, c) > 0.5);
        prop_assert_eq!(iou_dice(&m, &y).unwrap().iou, 1.0);
    }

    #[test]
    fn chamfer_is_symmetric(seed in any::<u64>()) {
        let v = generate(&small(seed, true)).unwrap();
        let (a, b) = (v.wall_masks.get(0), v.wall_masks.get(3));
        prop_assert_eq!(chamfer(a, b).unwrap().value, chamfer(b, a).unwrap().value);
    }
}

#[test]
fn consecutive_slices_are_closer_than_distant_ones() {
    let v = generate(&PhantomSpec {
        drift: 1.0,
        ..PhantomSpec::easy(64, 64, 24, 11)
    })
    .unwrap();
    let m = v.wall_masks.slices();
    let mean = |gap: usize| {
        let d: Vec<f64> = (0..m.len() - gap).map(|i| chamfer(&m[i], &m[i + gap]).unwrap().value).collect();
        d.iter().sum::<f64>() / d.len() as f64
    };
    let near = mean(1);
    let far = (2..6).map(mean).fold(f64::INFINITY, f64::min);
    assert!(near < far, "near {near} far {far}");
}

#[test]
fn oracle_evaluation_is_perfect_on_every_tier() {
    let mut c = DatasetConfig::default_config();
    c.set("n_volumes", 4).unwrap();
    c.set("split", 0.5).unwrap();
    c.set("depth", 3).unwrap();
    let data = generate_dataset(&DatasetConfig::from_config(&c).unwrap()).unwrap();
    for t in [Target::Wall, Target::Lumen] {
        let rows = evaluate(&Predictor::Oracle, &data, t).unwrap();
        assert_eq!(rows.len(), 12);
        assert!(rows.iter().all(|r| r.dice == 1.0 && r.hd95 == 0.0));
    }
}
