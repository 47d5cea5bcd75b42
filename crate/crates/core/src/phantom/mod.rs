//! Seeded synthetic aneurysm-like slice stacks.
//!
//! Each volume is a tube of circular cross-section whose center wanders with
//! a constant per-slice step along a smoothly turning heading, and whose outer
//! radius and wall thickness vary linearly with depth. The complex tier uses
//! thin, low-contrast walls and adds distractor vessels at wall intensity.

mod dataset;

pub use dataset::{generate_dataset, make_dataset, DatasetConfig, Manifest, ManifestEntry, Split};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::fields::{Field2D, FieldStack, Mask2D, MaskStack};

/// Largest wall/background contrast allowed on the complex tier, in noise sigmas.
pub const COMPLEX_CONTRAST_SIGMAS: f64 = 2.0;
/// Largest wall thickness lower bound allowed on the complex tier.
pub const COMPLEX_MAX_WALL_MIN: f64 = 2.0;
/// Standard deviation of the per-slice heading change, in radians.
const HEADING_STEP_SD: f64 = 0.35;
const MAX_ATTEMPTS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Tier {
    Easy,
    Complex,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Easy => "general",
            Tier::Complex => "complex",
        })
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" | "easy" => Ok(Tier::Easy),
            "complex" => Ok(Tier::Complex),
            other => Err(Error::Invalid(format!("unknown tier `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub seed: u64,
    /// Center displacement per slice, in pixels.
    pub drift: f64,
    pub radius: (f64, f64),
    pub wall: (f64, f64),
    pub mu_background: f64,
    pub mu_wall: f64,
    pub mu_lumen: f64,
    pub noise_sigma: f64,
    pub distractors: usize,
    pub distractor_radius: (f64, f64),
    pub distractor_intensity: (f64, f64),
    pub tier: Tier,
    /// Rasterize the wall mask as the ring between outer and lumen circles
    /// instead of the full outer disk.
    pub annulus_only: bool,
}

impl PhantomSpec {
    pub fn easy(height: usize, width: usize, depth: usize, seed: u64) -> Self {
        Self {
            height,
            width,
            depth,
            seed,
            drift: 1.5,
            radius: (10.0, 16.0),
            wall: (3.0, 5.0),
            mu_background: 0.2,
            mu_wall: 0.45,
            mu_lumen: 0.8,
            noise_sigma: 0.05,
            distractors: 0,
            distractor_radius: (3.0, 5.0),
            distractor_intensity: (0.40, 0.50),
            tier: Tier::Easy,
            annulus_only: false,
        }
    }

    pub fn complex(height: usize, width: usize, depth: usize, seed: u64) -> Self {
        Self {
            wall: (1.0, 2.0),
            mu_wall: 0.28,
            distractors: 2,
            distractor_intensity: (0.23, 0.33),
            tier: Tier::Complex,
            ..Self::easy(height, width, depth, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: String| {
            Err(Error::Spec {
                field: field.into(),
                message,
            })
        };
        if self.height < 8 || self.width < 8 {
            return bad("height", format!("frame {}x{} is smaller than 8x8", self.height, self.width));
        }
        if self.depth == 0 {
            return bad("depth", "must be >= 1".into());
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return bad("drift", format!("{} is not a non-negative number", self.drift));
        }
        let (r0, r1) = self.radius;
        let (w0, w1) = self.wall;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad("radius", format!("range ({r0}, {r1}) is not ordered and positive"));
        }
        if !(w0 >= 1.0 && w0 <= w1 && w1.is_finite()) {
            return bad("wall", format!("range ({w0}, {w1}) must be ordered with min >= 1"));
        }
        if r0 - w1 < 1.0 {
            return bad("wall", format!("lumen radius R - w can drop to {} (< 1)", r0 - w1));
        }
        if 2.0 * r1 + 4.0 > self.height.min(self.width) as f64 {
            return bad("radius", format!("max radius {r1} does not fit a {}x{} frame", self.height, self.width));
        }
        for (name, v) in [
            ("mu_background", self.mu_background),
            ("mu_wall", self.mu_wall),
            ("mu_lumen", self.mu_lumen),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(name, format!("{v} is outside [0, 1]"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma", format!("{} is not a non-negative number", self.noise_sigma));
        }
        let (d0, d1) = self.distractor_radius;
        if self.distractors > 0 && !(d0 >= 1.0 && d0 <= d1) {
            return bad("distractor_radius", format!("range ({d0}, {d1}) must be ordered with min >= 1"));
        }
        let (i0, i1) = self.distractor_intensity;
        if !(0.0 <= i0 && i0 <= i1 && i1 <= 1.0) {
            return bad("distractor_intensity", format!("range ({i0}, {i1}) must be ordered within [0, 1]"));
        }
        if self.tier == Tier::Complex {
            if w0 > COMPLEX_MAX_WALL_MIN {
                return bad("wall", format!("complex tier needs min wall <= {COMPLEX_MAX_WALL_MIN}, got {w0}"));
            }
            let contrast = (self.mu_wall - self.mu_background).abs();
            if contrast > COMPLEX_CONTRAST_SIGMAS * self.noise_sigma {
                return bad(
                    "mu_wall",
                    format!(
                        "complex tier needs |mu_wall - mu_background| <= {COMPLEX_CONTRAST_SIGMAS} sigma, got {contrast}"
                    ),
                );
            }
        }
        Ok(())
    }
}

/// Per-slice analytic geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceGeometry {
    /// (row, col)
    pub center: (f64, f64),
    pub outer: f64,
    pub lumen: f64,
    /// (row, col, radius)
    pub distractors: Vec<(f64, f64, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomVolume {
    pub images: FieldStack,
    pub wall_masks: MaskStack,
    pub lumen_masks: MaskStack,
    pub geometry: Vec<SliceGeometry>,
}

pub fn disk(h: usize, w: usize, center: (f64, f64), radius: f64) -> Mask2D {
    let r2 = radius * radius;
    Mask2D::from_fn(h, w, |r, c| {
        let dy = r as f64 - center.0;
        let dx = c as f64 - center.1;
        dy * dy + dx * dx <= r2
    })
}

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

fn smooth3(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let l = v[i.saturating_sub(1)];
            let r = v[(i + 1).min(v.len() - 1)];
            0.25 * l + 0.5 * v[i] + 0.25 * r
        })
        .collect()
}

fn fits(center: (f64, f64), radius: f64, h: usize, w: usize) -> bool {
    center.0 - radius >= 1.0
        && center.1 - radius >= 1.0
        && center.0 + radius <= h as f64 - 2.0
        && center.1 + radius <= w as f64 - 2.0
}

fn draw_path(spec: &PhantomSpec, rng: &mut ChaCha8Rng, outer: &[f64]) -> Option<Vec<(f64, f64)>> {
    let (h, w) = (spec.height as f64, spec.width as f64);
    let jitter = h.min(w) / 8.0;
    let mut c = (
        h / 2.0 + rng.random_range(-jitter..=jitter),
        w / 2.0 + rng.random_range(-jitter..=jitter),
    );
    let normal = Normal::new(0.0, HEADING_STEP_SD).expect("valid sd");
    let turns: Vec<f64> = (0..spec.depth).map(|_| normal.sample(rng)).collect();
    let turns = smooth3(&turns);
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut path = Vec::with_capacity(spec.depth);
    for (k, t) in turns.iter().enumerate() {
        if k > 0 {
            heading += t;
            c.0 += spec.drift * heading.sin();
            c.1 += spec.drift * heading.cos();
        }
        if !fits(c, outer[k], spec.height, spec.width) {
            return None;
        }
        path.push(c);
    }
    Some(path)
}

fn draw_distractors(
    spec: &PhantomSpec,
    rng: &mut ChaCha8Rng,
    path: &[(f64, f64)],
    outer: &[f64],
) -> Option<Vec<(f64, f64, f64, f64)>> {
    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
    for _ in 0..spec.distractors {
        let mut ok = None;
        for _ in 0..MAX_ATTEMPTS {
            let rad = rng.random_range(spec.distractor_radius.0..=spec.distractor_radius.1);
            let cy = rng.random_range(rad + 1.0..=spec.height as f64 - rad - 2.0);
            let cx = rng.random_range(rad + 1.0..=spec.width as f64 - rad - 2.0);
            let mu = rng.random_range(spec.distractor_intensity.0..=spec.distractor_intensity.1);
            // keep a 2-pixel gap to the target on every slice and to other distractors
            let clear_target = path.iter().zip(outer).all(|(&(py, px), &r)| {
                ((cy - py).powi(2) + (cx - px).powi(2)).sqrt() >= r + rad + 2.0
            });
            let clear_others = placed
                .iter()
                .all(|&(y, x, r, _)| ((cy - y).powi(2) + (cx - x).powi(2)).sqrt() >= r + rad + 2.0);
            if clear_target && clear_others {
                ok = Some((cy, cx, rad, mu));
                break;
            }
        }
        placed.push(ok?);
    }
    Some(placed)
}

pub fn generate(spec: &PhantomSpec) -> Result<PhantomVolume> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w, d) = (spec.height, spec.width, spec.depth);
    let t = |k: usize| if d > 1 { k as f64 / (d - 1) as f64 } else { 0.0 };

    let mut layout = None;
    for _ in 0..MAX_ATTEMPTS {
        let (ra, rb) = (
            rng.random_range(spec.radius.0..=spec.radius.1),
            rng.random_range(spec.radius.0..=spec.radius.1),
        );
        let (wa, wb) = (
            rng.random_range(spec.wall.0..=spec.wall.1),
            rng.random_range(spec.wall.0..=spec.wall.1),
        );
        let outer: Vec<f64> = (0..d).map(|k| lerp(ra, rb, t(k))).collect();
        let lumen: Vec<f64> = (0..d).map(|k| outer[k] - lerp(wa, wb, t(k))).collect();
        let Some(path) = draw_path(spec, &mut rng, &outer) else {
            continue;
        };
        let Some(distractors) = draw_distractors(spec, &mut rng, &path, &outer) else {
            continue;
        };
        layout = Some((outer, lumen, path, distractors));
        break;
    }
    let (outer, lumen, path, distractors) = layout.ok_or_else(|| Error::Spec {
        field: "drift".into(),
        message: format!("could not fit the path and distractors in {MAX_ATTEMPTS} attempts"),
    })?;

    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Spec {
        field: "noise_sigma".into(),
        message: e.to_string(),
    })?;
    let mut images = Vec::with_capacity(d);
    let mut walls = Vec::with_capacity(d);
    let mut lumens = Vec::with_capacity(d);
    let mut geometry = Vec::with_capacity(d);
    for k in 0..d {
        let outer_disk = disk(h, w, path[k], outer[k]);
        let lumen_disk = disk(h, w, path[k], lumen[k]);
        let blobs: Vec<Mask2D> = distractors
            .iter()
            .map(|&(cy, cx, r, _)| disk(h, w, (cy, cx), r))
            .collect();
        let mut img = vec![0f32; h * w];
        for (i, px) in img.iter_mut().enumerate() {
            let (r, c) = (i / w, i % w);
            let mut mu = spec.mu_background;
            for (b, &(_, _, _, m)) in blobs.iter().zip(&distractors) {
                if b.get(r, c) {
                    mu = m;
                }
            }
            if outer_disk.get(r, c) {
                mu = spec.mu_wall;
            }
            if lumen_disk.get(r, c) {
                mu = spec.mu_lumen;
            }
            let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            *px = (mu + n).clamp(0.0, 1.0) as f32;
        }
        images.push(Field2D::new(h, w, img)?);
        let wall = if spec.annulus_only {
            Mask2D::from_fn(h, w, |r, c| outer_disk.get(r, c) && !lumen_disk.get(r, c))
        } else {
            outer_disk
        };
        walls.push(wall);
        lumens.push(lumen_disk);
        geometry.push(SliceGeometry {
            center: path[k],
            outer: outer[k],
            lumen: lumen[k],
            distractors: distractors.iter().map(|&(y, x, r, _)| (y, x, r)).collect(),
        });
    }
    Ok(PhantomVolume {
        images: FieldStack::new(images)?,
        wall_masks: MaskStack::new(walls)?,
        lumen_masks: MaskStack::new(lumens)?,
        geometry,
    })
}
