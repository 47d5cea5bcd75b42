use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{generate, PhantomSpec, PhantomVolume, Tier};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::fields::{read_mask_stack, read_stack, write_mask_stack, write_stack};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Invalid(format!("unknown split `{other}`"))),
        }
    }
}

/// Volume-level train/test split with a tier mix inside each side.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub n_volumes: usize,
    pub split: f64,
    pub complex_fraction: f64,
    pub seed: u64,
    pub easy: PhantomSpec,
    pub complex: PhantomSpec,
}

const DEFAULTS: &[(&str, &str)] = &[
    ("n_volumes", "10"),
    ("split", "0.8"),
    ("complex_fraction", "0.5"),
    ("seed", "7"),
    ("height", "64"),
    ("width", "64"),
    ("depth", "8"),
    ("drift", "1.5"),
    ("radius_min", "10"),
    ("radius_max", "16"),
    ("noise_sigma", "0.05"),
    ("mu_background", "0.2"),
    ("mu_lumen", "0.8"),
    ("annulus_only", "false"),
    ("distractor_radius_min", "3"),
    ("distractor_radius_max", "5"),
    ("distractor_intensity_spread", "0.05"),
    ("easy.wall_min", "3"),
    ("easy.wall_max", "5"),
    ("easy.mu_wall", "0.45"),
    ("easy.distractors", "0"),
    ("complex.wall_min", "1"),
    ("complex.wall_max", "2"),
    ("complex.mu_wall", "0.28"),
    ("complex.distractors", "2"),
];

impl DatasetConfig {
    pub fn default_config() -> RunConfig {
        RunConfig::with_defaults(DEFAULTS)
    }

    pub fn from_config(c: &RunConfig) -> Result<Self> {
        let (h, w, d): (usize, usize, usize) = (c.get("height")?, c.get("width")?, c.get("depth")?);
        let spread: f64 = c.get("distractor_intensity_spread")?;
        let tier_spec = |tier: Tier, prefix: &str| -> Result<PhantomSpec> {
            let mu_wall: f64 = c.get(&format!("{prefix}.mu_wall"))?;
            Ok(PhantomSpec {
                height: h,
                width: w,
                depth: d,
                seed: 0,
                drift: c.get("drift")?,
                radius: (c.get("radius_min")?, c.get("radius_max")?),
                wall: (c.get(&format!("{prefix}.wall_min"))?, c.get(&format!("{prefix}.wall_max"))?),
                mu_background: c.get("mu_background")?,
                mu_wall,
                mu_lumen: c.get("mu_lumen")?,
                noise_sigma: c.get("noise_sigma")?,
                distractors: c.get(&format!("{prefix}.distractors"))?,
                distractor_radius: (c.get("distractor_radius_min")?, c.get("distractor_radius_max")?),
                distractor_intensity: ((mu_wall - spread).max(0.0), (mu_wall + spread).min(1.0)),
                tier,
                annulus_only: c.get_bool("annulus_only")?,
            })
        };
        let cfg = Self {
            n_volumes: c.get("n_volumes")?,
            split: c.get("split")?,
            complex_fraction: c.get("complex_fraction")?,
            seed: c.get("seed")?,
            easy: tier_spec(Tier::Easy, "easy")?,
            complex: tier_spec(Tier::Complex, "complex")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, message: &str| {
            Err(Error::Spec {
                field: field.into(),
                message: message.into(),
            })
        };
        if self.n_volumes == 0 {
            return bad("n_volumes", "must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.split) {
            return bad("split", "must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.complex_fraction) {
            return bad("complex_fraction", "must lie in [0, 1]");
        }
        self.easy.validate()?;
        self.complex.validate()
    }

    /// Entry list and the spec of every volume, without generating anything.
    pub fn plan(&self) -> Result<Vec<(ManifestEntry, PhantomSpec)>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let n_train = (self.split * self.n_volumes as f64).round() as usize;
        let n_test = self.n_volumes - n_train;
        let mut out = Vec::with_capacity(self.n_volumes);
        for (split, count) in [(Split::Train, n_train), (Split::Test, n_test)] {
            let n_complex = (self.complex_fraction * count as f64).round() as usize;
            for k in 0..count {
                let tier = if k < count - n_complex { Tier::Easy } else { Tier::Complex };
                let seed: u64 = rng.random();
                let id = format!("vol{:03}", out.len());
                let base = match tier {
                    Tier::Easy => &self.easy,
                    Tier::Complex => &self.complex,
                };
                let spec = PhantomSpec { seed, ..base.clone() };
                let entry = ManifestEntry {
                    image: PathBuf::from(format!("{id}_image.f3d")),
                    wall: PathBuf::from(format!("{id}_wall.f3d")),
                    lumen: PathBuf::from(format!("{id}_lumen.f3d")),
                    id,
                    split,
                    tier,
                    seed,
                };
                out.push((entry, spec));
            }
        }
        Ok(out)
    }
}

/// Generates every planned volume in memory.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<(ManifestEntry, PhantomVolume)>> {
    cfg.plan()?
        .into_iter()
        .map(|(e, spec)| Ok((e, generate(&spec)?)))
        .collect()
}

/// Writes F3D1 triplets and `manifest.txt` into `dir`.
pub fn make_dataset(cfg: &DatasetConfig, run: &RunConfig, dir: &Path) -> Result<Manifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::new();
    for (e, spec) in cfg.plan()? {
        let v = generate(&spec)?;
        write_stack(&v.images, dir.join(&e.image))?;
        write_mask_stack(&v.wall_masks, dir.join(&e.wall))?;
        write_mask_stack(&v.lumen_masks, dir.join(&e.lumen))?;
        entries.push(e);
    }
    let m = Manifest {
        dir: dir.to_path_buf(),
        preamble: run.preamble(),
        entries,
    };
    m.write(&dir.join("manifest.txt"))?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub tier: Tier,
    pub seed: u64,
    pub image: PathBuf,
    pub wall: PathBuf,
    pub lumen: PathBuf,
}

/// One line per volume: `id split tier seed image wall lumen`, paths
/// relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    /// Comment lines echoing the generating config.
    pub preamble: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = self.preamble.clone();
        s.push_str("# id split tier seed image wall lumen\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {}",
                e.id,
                e.split,
                e.tier,
                e.seed,
                e.image.display(),
                e.wall.display(),
                e.lumen.display()
            );
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut preamble = String::new();
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.starts_with("# id ") {
                continue;
            }
            if line.starts_with('#') {
                preamble.push_str(line);
                preamble.push('\n');
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 {
                return Err(Error::Config(format!("manifest line {}: expected 7 fields", n + 1)));
            }
            let seed = f[3]
                .parse()
                .map_err(|_| Error::Config(format!("manifest line {}: bad seed", n + 1)))?;
            entries.push(ManifestEntry {
                id: f[0].into(),
                split: f[1].parse()?,
                tier: f[2].parse()?,
                seed,
                image: f[4].into(),
                wall: f[5].into(),
                lumen: f[6].into(),
            });
        }
        Ok(Self { dir, preamble, entries })
    }

    /// Reads one volume's stacks from disk (geometry is not stored).
    pub fn load(&self, e: &ManifestEntry) -> Result<PhantomVolume> {
        Ok(PhantomVolume {
            images: read_stack(self.dir.join(&e.image))?,
            wall_masks: read_mask_stack(self.dir.join(&e.wall))?,
            lumen_masks: read_mask_stack(self.dir.join(&e.lumen))?,
            geometry: Vec::new(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize) -> DatasetConfig {
        let mut c = DatasetConfig::default_config();
        c.set("n_volumes", n).unwrap();
        c.set("depth", 3).unwrap();
        DatasetConfig::from_config(&c).unwrap()
    }

    #[test]
    fn split_and_tiers() {
        let plan = cfg(10).plan().unwrap();
        let train: Vec<_> = plan.iter().filter(|(e, _)| e.split == Split::Train).collect();
        let test: Vec<_> = plan.iter().filter(|(e, _)| e.split == Split::Test).collect();
        assert_eq!((train.len(), test.len()), (8, 2));
        assert_eq!(test.iter().filter(|(e, _)| e.tier == Tier::Complex).count(), 1);
        assert!(plan.iter().all(|(e, s)| s.tier == e.tier && s.seed == e.seed));
        assert_eq!(plan, cfg(10).plan().unwrap());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = cfg(3);
        let m = make_dataset(&c, &DatasetConfig::default_config(), dir.path()).unwrap();
        let back = Manifest::read(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(back.entries, m.entries);
        let v = back.load(&back.entries[0]).unwrap();
        assert_eq!(v.images.depth(), 3);
        let fresh = generate(&c.plan().unwrap()[0].1).unwrap();
        assert_eq!(v.wall_masks, fresh.wall_masks);
        assert_eq!(v.images, fresh.images);
    }
}
