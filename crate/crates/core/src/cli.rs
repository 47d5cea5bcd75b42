//! Command-line front end. Every command resolves a [`RunConfig`] from
//! defaults, an optional config file and flags, and echoes it into its
//! outputs.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{sig9, RunConfig};
use crate::error::{Error, Result};
use crate::evaluate::{eval_csv, evaluate, probe_dataset, training_samples, Predictor, Target};
use crate::fields::{write_pgm, write_pgm_normalized, write_ppm_heat_overlay};
use crate::model::ModelParams;
use crate::pairnet::{accuracy, history_csv, sample_pairs, train_pairnet, PairNet, PairSample, PairTrainConfig};
use crate::phantom::{make_dataset, DatasetConfig, Manifest, ManifestEntry, PhantomVolume, Split, Tier};
use crate::trainer::{train, CurriculumConfig};
use crate::verify::{grad_suite, metric_suite, CheckLine, Kernels};

#[derive(Debug, Parser)]
#[command(name = "xaiseg", version, about = "Attribution-guided segmentation on synthetic aneurysm phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TargetArg {
    Wall,
    Lumen,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::Wall => Target::Wall,
            TargetArg::Lumen => Target::Lumen,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TierArg {
    General,
    Complex,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Grad,
    Metrics,
    All,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a phantom dataset (volumes plus manifest.txt).
    Phantom {
        /// key=value dataset spec; defaults apply to missing keys.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the slice-pair consistency classifier.
    TrainPairs {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value = "wall")]
        target: TargetArg,
        /// History CSV; defaults to `<out>.csv`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Train the segmenter with the two-stage curriculum.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pairnet: PathBuf,
        #[arg(long, value_enum)]
        target: TargetArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        no_xai: bool,
        #[arg(long)]
        no_anat: bool,
        #[arg(long)]
        no_refine: bool,
        #[arg(long)]
        no_pair: bool,
        /// Report CSV; defaults to `<out>.csv`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Overlap and distance metrics per slice and per tier.
    Eval {
        /// Checkpoint path, or `oracle` to score ground truth against itself.
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        target: TargetArg,
        #[arg(long, value_enum, default_value = "all")]
        tier: TierArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Logit modulation strength at inference.
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Failure-analysis report with attribution overlays.
    Probe {
        #[arg(long)]
        model: String,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        target: TargetArg,
        #[arg(long, default_value_t = 1)]
        r: usize,
        #[arg(long, value_enum, default_value = "all")]
        tier: TierArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = 1.0)]
        kappa: f64,
        #[arg(long, default_value_t = 1e-6)]
        eps: f64,
        #[arg(long)]
        out: PathBuf,
        /// Directory for overlays of the worst slices by Dice.
        #[arg(long)]
        overlays: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        worst_k: usize,
    },
    /// Gradient checks and brute-force metric oracles.
    Verify {
        #[arg(long, value_enum, default_value = "all")]
        suite: Suite,
        /// Random cases per check.
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Process exit status for an error: 1 for numeric failures, 2 otherwise.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) => 1,
        _ => 2,
    }
}

/// Runs one command, writing human-readable progress to `log`. Returns the
/// exit status on success paths (verify may report failed checks as 1).
pub fn run(cli: Cli, log: &mut dyn std::io::Write) -> Result<i32> {
    match cli.command {
        Command::Phantom { spec, out, seed } => {
            let mut c = DatasetConfig::default_config();
            if let Some(p) = spec {
                c.merge_file(&p)?;
            }
            if let Some(s) = seed {
                c.set("seed", s)?;
            }
            let m = make_dataset(&DatasetConfig::from_config(&c)?, &c, &out)?;
            say(log, format!("wrote {} volumes to {}", m.entries.len(), out.display()));
            Ok(0)
        }
        Command::TrainPairs {
            data,
            out,
            config,
            epochs,
            seed,
            target,
            history,
        } => {
            let mut c = PairTrainConfig::default_config();
            load_config(&mut c, config.as_deref())?;
            // flag-only key, echoed for reproducibility
            c.extend(&[("target", "wall")]);
            c.set("target", Target::from(target).name())?;
            if let Some(e) = epochs {
                c.set("epochs", e)?;
            }
            if let Some(s) = seed {
                c.set("seed", s)?;
            }
            let cfg = PairTrainConfig::from_config(&c)?;
            let target = Target::from(target);
            let manifest = Manifest::read(&data)?;
            let vols = load(&manifest, |_| true)?;
            let (train_set, held) = pair_sets(&vols, target, cfg.seed)?;
            let (net, hist) = train_pairnet(&train_set, &cfg)?;
            net.write(&out)?;
            std::fs::write(csv_path(&out, history), history_csv(&c.preamble(), &hist))
                .map_err(|e| Error::io(&out, e))?;
            if held.is_empty() {
                say(log, "held-out accuracy: undefined (no test volumes)".into());
            } else {
                say(log, format!("held-out accuracy: {}", sig9(accuracy(&net, &held)?)));
            }
            Ok(0)
        }
        Command::Train {
            data,
            pairnet,
            target,
            out,
            config,
            epochs,
            seed,
            no_xai,
            no_anat,
            no_refine,
            no_pair,
            report,
        } => {
            let mut c = CurriculumConfig::default_config();
            load_config(&mut c, config.as_deref())?;
            // flag-only key, echoed for reproducibility
            c.extend(&[("target", "wall")]);
            c.set("target", Target::from(target).name())?;
            if let Some(e) = epochs {
                c.set("epochs", e)?;
            }
            if let Some(s) = seed {
                c.set("seed", s)?;
            }
            for (flag, key) in [(no_xai, "no_xai"), (no_anat, "no_anat"), (no_refine, "no_refine"), (no_pair, "no_pair")] {
                if flag {
                    c.set(key, "true")?;
                }
            }
            let cfg = CurriculumConfig::from_config(&c)?;
            let net = PairNet::read(&pairnet)?;
            let manifest = Manifest::read(&data)?;
            let vols = load(&manifest, |e| e.split == Split::Train)?;
            let samples = training_samples(vols.iter().map(|(_, v)| v), target.into());
            let (model, mut rep) = train(&samples, &net, &cfg)?;
            model.write(&out)?;
            rep.checkpoint = Some(out.display().to_string());
            std::fs::write(csv_path(&out, report), rep.to_csv(&c.preamble(), &cfg)).map_err(|e| Error::io(&out, e))?;
            if let Some(last) = rep.records.last() {
                say(log, format!("epoch {} total loss {}", last.epoch, sig9(last.losses.total)));
            }
            say(log, format!("wrote {}", out.display()));
            Ok(0)
        }
        Command::Eval {
            model,
            data,
            target,
            tier,
            split,
            kappa,
            out,
        } => {
            let c = selection_config(&model, target, tier, split, kappa, &[]);
            let (params, vols) = prepare(&model, &data, tier, split)?;
            let pred = predictor(params.as_ref(), kappa);
            let rows = evaluate(&pred, &vols, target.into())?;
            std::fs::write(&out, eval_csv(&c.preamble(), &rows)).map_err(|e| Error::io(&out, e))?;
            say(log, format!("{} slices evaluated", rows.len()));
            Ok(0)
        }
        Command::Probe {
            model,
            data,
            target,
            r,
            tier,
            split,
            kappa,
            eps,
            out,
            overlays,
            worst_k,
        } => {
            let (r_s, eps_s, k_s) = (r.to_string(), sig9(eps), worst_k.to_string());
            let c = selection_config(
                &model,
                target,
                tier,
                split,
                kappa,
                &[("r", &r_s), ("eps", &eps_s), ("worst_k", &k_s)],
            );
            let (params, vols) = prepare(&model, &data, tier, split)?;
            let pred = predictor(params.as_ref(), kappa);
            let (report, mut kept) = probe_dataset(&pred, &vols, target.into(), r, eps)?;
            std::fs::write(&out, report.to_csv(&c.preamble())).map_err(|e| Error::io(&out, e))?;
            if let Some(dir) = overlays {
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                // stable: ties keep dataset order
                kept.sort_by(|a, b| a.dice.total_cmp(&b.dice));
                for s in kept.iter().take(worst_k) {
                    write_pgm(&s.image, dir.join(format!("{}_image.pgm", s.id)))?;
                    write_pgm_normalized(&s.phi, dir.join(format!("{}_phi.pgm", s.id)))?;
                    write_ppm_heat_overlay(&s.image, &s.phi, dir.join(format!("{}_overlay.ppm", s.id)))?;
                }
            }
            match (report.spearman_jsd_err, report.spearman_fmi_err) {
                (Some(a), Some(b)) => say(log, format!("spearman jsd/1-iou {} fmi/1-dice {}", sig9(a), sig9(b))),
                _ => say(log, "spearman: undefined_for_input".into()),
            }
            Ok(0)
        }
        Command::Verify { suite, n, seed } => {
            let k = Kernels::default();
            let mut lines: Vec<CheckLine> = Vec::new();
            if suite != Suite::Metrics {
                lines.extend(grad_suite(n, seed, &k)?);
            }
            if suite != Suite::Grad {
                lines.extend(metric_suite(n, seed, &k)?);
            }
            for l in &lines {
                say(log, format!("{} {}: {}", if l.pass { "PASS" } else { "FAIL" }, l.name, l.detail));
            }
            Ok(if lines.iter().all(|l| l.pass) { 0 } else { 1 })
        }
    }
}

fn say(log: &mut dyn std::io::Write, line: String) {
    let _ = writeln!(log, "{line}");
}

fn load_config(c: &mut RunConfig, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => c.merge_file(p),
        None => Ok(()),
    }
}

fn csv_path(out: &Path, given: Option<PathBuf>) -> PathBuf {
    given.unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".csv");
        PathBuf::from(s)
    })
}

fn load(m: &Manifest, keep: impl Fn(&ManifestEntry) -> bool) -> Result<Vec<(ManifestEntry, PhantomVolume)>> {
    m.entries
        .iter()
        .filter(|e| keep(e))
        .map(|e| Ok((e.clone(), m.load(e)?)))
        .collect()
}

/// Balanced pairs from train volumes and from test volumes (held out).
pub fn pair_sets(
    vols: &[(ManifestEntry, PhantomVolume)],
    target: Target,
    seed: u64,
) -> Result<(Vec<PairSample>, Vec<PairSample>)> {
    let (mut train_set, mut held) = (Vec::new(), Vec::new());
    for (k, (e, v)) in vols.iter().enumerate() {
        let masks = target.masks(v);
        let s = sample_pairs(masks, &e.id, masks.depth().saturating_sub(1), seed.wrapping_add(k as u64))?;
        match e.split {
            Split::Train => train_set.extend(s.samples),
            Split::Test => held.extend(s.samples),
        }
    }
    Ok((train_set, held))
}

fn selection_config(
    model: &str,
    target: TargetArg,
    tier: TierArg,
    split: SplitArg,
    kappa: f64,
    extra: &[(&str, &str)],
) -> RunConfig {
    let (tier, split) = (format!("{tier:?}").to_lowercase(), format!("{split:?}").to_lowercase());
    let kappa = sig9(kappa);
    let mut c = RunConfig::with_defaults(&[
        ("model", model),
        ("target", Target::from(target).name()),
        ("tier", &tier),
        ("split", &split),
        ("kappa", &kappa),
    ]);
    c.extend(extra);
    c
}

fn prepare(
    model: &str,
    data: &Path,
    tier: TierArg,
    split: SplitArg,
) -> Result<(Option<ModelParams>, Vec<(ManifestEntry, PhantomVolume)>)> {
    let params = match model {
        "oracle" => None,
        path => Some(ModelParams::read(Path::new(path))?),
    };
    let manifest = Manifest::read(data)?;
    let vols = load(&manifest, |e| {
        let tier_ok = match tier {
            TierArg::General => e.tier == Tier::Easy,
            TierArg::Complex => e.tier == Tier::Complex,
            TierArg::All => true,
        };
        let split_ok = match split {
            SplitArg::Train => e.split == Split::Train,
            SplitArg::Test => e.split == Split::Test,
            SplitArg::All => true,
        };
        tier_ok && split_ok
    })?;
    Ok((params, vols))
}

fn predictor(params: Option<&ModelParams>, kappa: f64) -> Predictor<'_> {
    match params {
        Some(params) => Predictor::Model { params, kappa },
        None => Predictor::Oracle,
    }
}
