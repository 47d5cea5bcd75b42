//! Dataset-level evaluation and probing shared by the CLI and the test suites.

use std::fmt::Write as _;
use std::str::FromStr;
use std::sync::Arc;

use crate::config::sig9;
use crate::error::{Error, Result};
use crate::fields::{binarize, Field2D, Mask2D, MaskStack};
use crate::model::{infer, ModelParams};
use crate::phantom::{ManifestEntry, PhantomVolume, Tier};
use crate::probe::{hd95, iou_dice, ProbeReport, SliceProbe};
use crate::trainer::TrainSample;

/// Which ground-truth mask a model segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Wall,
    Lumen,
}

impl Target {
    pub fn masks<'a>(&self, v: &'a PhantomVolume) -> &'a MaskStack {
        match self {
            Target::Wall => &v.wall_masks,
            Target::Lumen => &v.lumen_masks,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Target::Wall => "wall",
            Target::Lumen => "lumen",
        }
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wall" => Ok(Target::Wall),
            "lumen" => Ok(Target::Lumen),
            other => Err(Error::Invalid(format!("unknown target `{other}` (expected wall|lumen)"))),
        }
    }
}

/// Every slice of the given volumes as training samples.
pub fn training_samples<'a>(
    volumes: impl IntoIterator<Item = &'a PhantomVolume>,
    target: Target,
) -> Vec<TrainSample> {
    let mut out = Vec::new();
    for v in volumes {
        let ctx = Arc::new(target.masks(v).clone());
        for (i, img) in v.images.slices().iter().enumerate() {
            out.push(TrainSample {
                image: img.clone(),
                y: ctx.get(i).clone(),
                context: Arc::clone(&ctx),
                index: i,
            });
        }
    }
    out
}

/// Source of per-slice probabilities and attribution fields.
#[derive(Clone, Debug)]
pub enum Predictor<'a> {
    Model { params: &'a ModelParams, kappa: f64 },
    /// Ground truth as prediction and as attribution field.
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub p: Field2D,
    pub phi: Field2D,
}

impl Predictor<'_> {
    pub fn predict(&self, image: &Field2D, y: &Mask2D) -> Result<Prediction> {
        match self {
            Predictor::Model { params, kappa } => {
                let inf = infer(params, image, *kappa)?;
                Ok(Prediction {
                    p: inf.p_final,
                    phi: inf.xai.raw,
                })
            }
            Predictor::Oracle => Ok(Prediction {
                p: y.to_field(),
                phi: y.to_field(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub volume: String,
    pub slice: usize,
    pub tier: Tier,
    pub iou: f64,
    pub dice: f64,
    pub hd95: f64,
    pub flags: Vec<&'static str>,
}

pub fn evaluate(
    predictor: &Predictor,
    volumes: &[(ManifestEntry, PhantomVolume)],
    target: Target,
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::new();
    for (e, v) in volumes {
        let ys = target.masks(v);
        for (i, img) in v.images.slices().iter().enumerate() {
            let y = ys.get(i);
            let pred = binarize(&predictor.predict(img, y)?.p, 0.5);
            let o = iou_dice(&pred, y)?;
            let h = hd95(&pred, y)?;
            let mut flags = Vec::new();
            if o.both_empty {
                flags.push("both_empty");
            }
            if h.one_empty {
                flags.push("hd95_sentinel");
            }
            rows.push(EvalRow {
                volume: e.id.clone(),
                slice: i,
                tier: e.tier,
                iou: o.iou,
                dice: o.dice,
                hd95: h.value,
                flags,
            });
        }
    }
    Ok(rows)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Per-slice rows in percent, then per-tier mean and sd.
pub fn eval_csv(preamble: &str, rows: &[EvalRow]) -> String {
    let mut s = String::from(preamble);
    s.push_str("volume,slice,tier,iou_pct,dice_pct,hd95_px,flags\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.volume,
            r.slice,
            r.tier,
            sig9(100.0 * r.iou),
            sig9(100.0 * r.dice),
            sig9(r.hd95),
            r.flags.join("|")
        );
    }
    s.push_str("# summary\ntier,n,iou_pct_mean,iou_pct_sd,dice_pct_mean,dice_pct_sd,hd95_px_mean,hd95_px_sd\n");
    for (name, tier) in [("general", Some(Tier::Easy)), ("complex", Some(Tier::Complex)), ("all", None)] {
        let sel: Vec<&EvalRow> = rows.iter().filter(|r| tier.is_none_or(|t| r.tier == t)).collect();
        if sel.is_empty() {
            continue;
        }
        let col = |f: fn(&EvalRow) -> f64| mean_sd(&sel.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (im, isd) = col(|r| 100.0 * r.iou);
        let (dm, dsd) = col(|r| 100.0 * r.dice);
        let (hm, hsd) = col(|r| r.hd95);
        let _ = writeln!(
            s,
            "{name},{},{},{},{},{},{},{}",
            sel.len(),
            sig9(im),
            sig9(isd),
            sig9(dm),
            sig9(dsd),
            sig9(hm),
            sig9(hsd)
        );
    }
    s
}

/// A probed slice kept for overlays.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbedSlice {
    pub id: String,
    pub image: Field2D,
    pub phi: Field2D,
    pub dice: f64,
}

/// Probe rows for every slice, consistency per volume, and the dataset
/// rank correlations.
pub fn probe_dataset(
    predictor: &Predictor,
    volumes: &[(ManifestEntry, PhantomVolume)],
    target: Target,
    r: usize,
    eps: f64,
) -> Result<(ProbeReport, Vec<ProbedSlice>)> {
    let mut report = ProbeReport::new(r);
    let mut kept = Vec::new();
    for (e, v) in volumes {
        let ys = target.masks(v);
        let mut preds = Vec::new();
        for (i, img) in v.images.slices().iter().enumerate() {
            let y = ys.get(i);
            let pred = predictor.predict(img, y)?;
            let id = format!("{}_s{i:02}", e.id);
            let row = SliceProbe::compute(id.clone(), &pred.p, &pred.phi, y, r, eps)?;
            kept.push(ProbedSlice {
                id,
                image: img.clone(),
                phi: pred.phi,
                dice: row.dice,
            });
            report.slices.push(row);
            preds.push(binarize(&pred.p, 0.5));
        }
        if preds.len() >= 2 {
            report.push_stack(e.id.clone(), &MaskStack::new(preds)?)?;
        }
    }
    report.finish();
    Ok((report, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_dataset, DatasetConfig, Split};

    fn data() -> Vec<(ManifestEntry, PhantomVolume)> {
        let mut c = DatasetConfig::default_config();
        c.set("n_volumes", 2).unwrap();
        c.set("depth", 3).unwrap();
        c.set("split", 0.5).unwrap();
        generate_dataset(&DatasetConfig::from_config(&c).unwrap()).unwrap()
    }

    #[test]
    fn oracle_scores_perfectly() {
        let d = data();
        let rows = evaluate(&Predictor::Oracle, &d, Target::Lumen).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.iou == 1.0 && r.dice == 1.0 && r.hd95 == 0.0));
        let (rep, _) = probe_dataset(&Predictor::Oracle, &d, Target::Wall, 1, 1e-6).unwrap();
        assert!(rep.slices.iter().all(|s| (s.foi - 1.0).abs() < 1e-5 && s.leak_phi < 1e-9));
        assert!(d.iter().any(|(e, _)| e.split == Split::Test));
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean_sd(&[1.0, 3.0]), (2.0, 2f64.sqrt()));
        assert_eq!(mean_sd(&[4.0]), (4.0, 0.0));
    }
}
