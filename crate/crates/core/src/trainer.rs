//! Two-stage curriculum training.
//!
//! Early epochs weight consistency (confidence prior and pair penalty); late
//! epochs weight anatomy and attribution alignment. Both stages share the
//! segmentation term and a small box-regression term.

use std::fmt::{self, Write as _};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attribution::{surrogate_scalar, xai_field_with_eps, EncoderTap};
use crate::autodiff::{Graph, NodeId, Tensor};
use crate::config::{sig9, RunConfig};
use crate::error::{Error, Result};
use crate::fields::{Field2D, Mask2D, MaskStack};
use crate::losses::{l_align, l_anat, l_box, l_conf, l_div, l_region, LossWeights};
use crate::model::{box_from_mask, forward, ModelParams};
use crate::nn::{accumulate, clip_global_norm, scale_all, Adam};
use crate::pairnet::{l_pair, PairNet};

/// Length of the optional linear early-to-late ramp, in epochs.
pub const RAMP_EPOCHS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Early,
    Late,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Early => "early",
            Stage::Late => "late",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LateAlignment {
    /// `l_ovlp + lambda_div * l_div`
    Full,
    /// `l_div` alone.
    DivOnly,
}

/// Ablation switches. All off is the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Variant {
    pub no_xai: bool,
    pub no_anat: bool,
    /// No auxiliary decoder, no confidence head, no logit modulation.
    pub no_refine: bool,
    pub no_pair: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumConfig {
    pub epochs: usize,
    pub stage_split: f64,
    pub weights: LossWeights,
    pub box_weight: f64,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    pub kappa: f64,
    pub k_skel: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub late_alignment: LateAlignment,
    pub ramp: bool,
    pub variant: Variant,
}

const DEFAULTS: &[(&str, &str)] = &[
    ("epochs", "20"),
    ("stage_split", "0.5"),
    ("lambda_div", "0.2"),
    ("lambda_c", "1.0"),
    ("gamma_aux", "0.5"),
    ("alpha1", "0.1"),
    ("alpha2", "0.5"),
    ("beta1", "0.5"),
    ("beta2", "0.1"),
    ("beta3", "0.2"),
    ("eps", "1e-6"),
    ("box_weight", "0.1"),
    ("lr", "0.003"),
    ("adam_beta1", "0.9"),
    ("adam_beta2", "0.999"),
    ("adam_eps", "1e-8"),
    ("clip_norm", "1.0"),
    ("kappa", "1.0"),
    ("k_skel", "10"),
    ("seed", "0"),
    ("batch_size", "8"),
    ("late_alignment", "full"),
    ("ramp", "false"),
    ("no_xai", "false"),
    ("no_anat", "false"),
    ("no_refine", "false"),
    ("no_pair", "false"),
];

impl Default for CurriculumConfig {
    fn default() -> Self {
        Self::from_config(&Self::default_config()).expect("defaults are valid")
    }
}

impl CurriculumConfig {
    pub fn default_config() -> RunConfig {
        RunConfig::with_defaults(DEFAULTS)
    }

    pub fn from_config(c: &RunConfig) -> Result<Self> {
        let weights = LossWeights {
            lambda_div: c.get("lambda_div")?,
            lambda_c: c.get("lambda_c")?,
            gamma_aux: c.get("gamma_aux")?,
            alpha1: c.get("alpha1")?,
            alpha2: c.get("alpha2")?,
            beta1: c.get("beta1")?,
            beta2: c.get("beta2")?,
            beta3: c.get("beta3")?,
            eps: c.get("eps")?,
        };
        let late_alignment = match c.get_str("late_alignment")? {
            "full" => LateAlignment::Full,
            "div_only" => LateAlignment::DivOnly,
            other => return Err(Error::Config(format!("late_alignment: expected full|div_only, got `{other}`"))),
        };
        let cfg = Self {
            epochs: c.get("epochs")?,
            stage_split: c.get("stage_split")?,
            weights,
            box_weight: c.get("box_weight")?,
            lr: c.get("lr")?,
            adam_beta1: c.get("adam_beta1")?,
            adam_beta2: c.get("adam_beta2")?,
            adam_eps: c.get("adam_eps")?,
            clip_norm: c.get("clip_norm")?,
            kappa: c.get("kappa")?,
            k_skel: c.get("k_skel")?,
            seed: c.get("seed")?,
            batch_size: c.get("batch_size")?,
            late_alignment,
            ramp: c.get_bool("ramp")?,
            variant: Variant {
                no_xai: c.get_bool("no_xai")?,
                no_anat: c.get_bool("no_anat")?,
                no_refine: c.get_bool("no_refine")?,
                no_pair: c.get_bool("no_pair")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if !(self.stage_split > 0.0 && self.stage_split < 1.0) {
            return Err(Error::Config(format!("stage_split must lie in (0, 1), got {}", self.stage_split)));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(self.kappa >= 0.0) {
            return Err(Error::Config(format!("kappa must be >= 0, got {}", self.kappa)));
        }
        if !(self.box_weight >= 0.0) {
            return Err(Error::Config(format!("box_weight must be >= 0, got {}", self.box_weight)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Number of early epochs, `floor(split * total)`.
    pub fn early_epochs(&self) -> usize {
        (self.stage_split * self.epochs as f64).floor() as usize
    }

    /// 0-based epoch index to stage (half-open: the boundary epoch is late).
    pub fn stage(&self, epoch: usize) -> Stage {
        if epoch < self.early_epochs() {
            Stage::Early
        } else {
            Stage::Late
        }
    }

    /// Weight of the late objective at an epoch: 0 or 1, or a linear ramp
    /// over [`RAMP_EPOCHS`] epochs from the boundary when enabled.
    pub fn late_mix(&self, epoch: usize) -> f64 {
        let b = self.early_epochs();
        if epoch < b {
            0.0
        } else if self.ramp {
            (((epoch - b + 1) as f64) / RAMP_EPOCHS as f64).min(1.0)
        } else {
            1.0
        }
    }

    /// The modulation strength used at inference for this variant.
    pub fn effective_kappa(&self) -> f64 {
        if self.variant.no_refine {
            0.0
        } else {
            self.kappa
        }
    }
}

/// One training slice: image, target mask and the volume's ground-truth
/// stack for the pair penalty.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub image: Field2D,
    pub y: Mask2D,
    pub context: Arc<MaskStack>,
    pub index: usize,
}

/// Component values of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Components {
    pub main: f64,
    pub aux: f64,
    pub seg: f64,
    pub conf: f64,
    pub pair: f64,
    pub boxl: f64,
    pub anat: f64,
    pub align: f64,
    pub total: f64,
    /// Alignment skipped because the attribution field was degenerate.
    pub align_skipped: bool,
}

impl Components {
    const NAMES: [&'static str; 9] = ["l_main", "l_aux", "l_seg", "l_conf", "l_pair", "l_box", "l_anat", "l_align", "total"];

    fn values(&self) -> [f64; 9] {
        [
            self.main, self.aux, self.seg, self.conf, self.pair, self.boxl, self.anat, self.align, self.total,
        ]
    }

    fn check_finite(&self) -> Result<()> {
        for (n, v) in Self::NAMES.iter().zip(self.values()) {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss component {n}")));
            }
        }
        Ok(())
    }
}

/// Combines already-built component nodes into the stage objective.
/// Missing components (`None`) count as absent, not as zero-valued nodes.
pub struct Terms {
    pub seg: NodeId,
    pub conf: Option<NodeId>,
    pub pair: Option<NodeId>,
    pub boxl: Option<NodeId>,
    pub anat: Option<NodeId>,
    pub align: Option<NodeId>,
}

fn weighted(g: &mut Graph, acc: NodeId, term: Option<NodeId>, w: f64) -> Result<NodeId> {
    match term {
        Some(t) if w != 0.0 => {
            let s = g.scale(t, w);
            g.add(acc, s)
        }
        _ => Ok(acc),
    }
}

/// `J_early = seg + a1 conf + a2 pair + box_w box`
pub fn j_early(g: &mut Graph, t: &Terms, w: &LossWeights, box_weight: f64) -> Result<NodeId> {
    let j = weighted(g, t.seg, t.conf, w.alpha1)?;
    let j = weighted(g, j, t.pair, w.alpha2)?;
    weighted(g, j, t.boxl, box_weight)
}

/// `J_late = seg + b1 anat + b2 conf + b3 align + box_w box`
pub fn j_late(g: &mut Graph, t: &Terms, w: &LossWeights, box_weight: f64) -> Result<NodeId> {
    let j = weighted(g, t.seg, t.anat, w.beta1)?;
    let j = weighted(g, j, t.conf, w.beta2)?;
    let j = weighted(g, j, t.align, w.beta3)?;
    weighted(g, j, t.boxl, box_weight)
}

/// `Lambda_main + gamma_aux * Lambda_aux`
pub fn loss_seg(g: &mut Graph, s: NodeId, a: Option<NodeId>, y: &Mask2D, w: &LossWeights) -> Result<NodeId> {
    let main = l_region(g, s, y, w.eps)?;
    match a {
        Some(a) if w.gamma_aux != 0.0 => {
            let aux = l_region(g, a, y, w.eps)?;
            let aux = g.scale(aux, w.gamma_aux);
            g.add(main, aux)
        }
        _ => Ok(main),
    }
}

/// Builds the objective for one sample at a late-stage mix `late`
/// (0 = early, 1 = late). Returns the root node and component values.
pub fn objective(
    g: &mut Graph,
    params: &[NodeId],
    sample: &TrainSample,
    pairnet: &PairNet,
    cfg: &CurriculumConfig,
    late: f64,
) -> Result<(NodeId, Components)> {
    let w = &cfg.weights;
    let v = cfg.variant;
    let out = forward(g, params, &sample.image, !v.no_refine)?;
    let mut c = Components::default();

    let main = l_region(g, out.s, &sample.y, w.eps)?;
    c.main = g.scalar(main);
    let seg = match out.a {
        Some(a) if w.gamma_aux != 0.0 => {
            let aux = l_region(g, a, &sample.y, w.eps)?;
            c.aux = g.scalar(aux);
            let aux = g.scale(aux, w.gamma_aux);
            g.add(main, aux)?
        }
        _ => main,
    };
    c.seg = g.scalar(seg);
    let p = g.sigmoid(out.s);

    let conf = match out.m_c {
        Some(m) => Some(l_conf(g, m, p, w.eps)?),
        None => None,
    };
    let boxl = if cfg.box_weight != 0.0 {
        Some(l_box(g, out.b, box_from_mask(&sample.y).0)?)
    } else {
        None
    };
    let pair = if late < 1.0 && !v.no_pair && w.alpha2 != 0.0 {
        let pen = l_pair(g, &[(sample.index, p)], &sample.context, pairnet, w.lambda_c)?;
        (!pen.empty).then_some(pen.node)
    } else {
        None
    };
    let anat = if late > 0.0 && !v.no_anat && w.beta1 != 0.0 {
        Some(l_anat(g, p, &sample.y, cfg.k_skel, w.eps)?)
    } else {
        None
    };
    let align = if late > 0.0 && !v.no_xai && w.beta3 != 0.0 {
        let sur = surrogate_scalar(g, out.s)?;
        let tap = EncoderTap::capture(g, out.e, sur)?;
        let (h, wd) = sample.image.shape();
        let xai = xai_field_with_eps(&tap, (h, wd), w.eps)?;
        if xai.degenerate {
            c.align_skipped = true;
            None
        } else {
            let focus = g.constant(Tensor::from_field(xai.focus.field()));
            Some(match cfg.late_alignment {
                LateAlignment::Full => {
                    // the raw map has arbitrary scale; peak-normalize so the
                    // overlap term compares it with p on the same footing
                    let peak = xai.raw.data().iter().fold(0f32, |m, &v| m.max(v)) as f64;
                    let mut phi = Tensor::from_field(&xai.raw);
                    phi.data.iter_mut().for_each(|v| *v /= peak);
                    let phi = g.constant(phi);
                    l_align(g, p, phi, focus, w)?
                }
                LateAlignment::DivOnly => l_div(g, p, focus, w.eps)?,
            })
        }
    } else {
        None
    };

    for (slot, node) in [
        (&mut c.conf, conf),
        (&mut c.pair, pair),
        (&mut c.boxl, boxl),
        (&mut c.anat, anat),
        (&mut c.align, align),
    ] {
        if let Some(n) = node {
            *slot = g.scalar(n);
        }
    }
    let terms = Terms {
        seg,
        conf,
        pair,
        boxl,
        anat,
        align,
    };
    let root = if late <= 0.0 {
        j_early(g, &terms, w, cfg.box_weight)?
    } else if late >= 1.0 {
        j_late(g, &terms, w, cfg.box_weight)?
    } else {
        let e = j_early(g, &terms, w, cfg.box_weight)?;
        let l = j_late(g, &terms, w, cfg.box_weight)?;
        let e = g.scale(e, 1.0 - late);
        let l = g.scale(l, late);
        g.add(e, l)?
    };
    c.total = g.scalar(root);
    c.check_finite()?;
    Ok((root, c))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    /// Sample means of each component.
    pub losses: Components,
    pub grad_norm_pre: f64,
    pub grad_norm_post_max: f64,
    pub align_skipped: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn to_csv(&self, preamble: &str, cfg: &CurriculumConfig) -> String {
        let mut s = String::from(preamble);
        let _ = writeln!(
            s,
            "# deviation: box_weight={} adds L_box to both stage objectives",
            cfg.box_weight
        );
        if let Some(p) = &self.checkpoint {
            let _ = writeln!(s, "# checkpoint={p}");
        }
        let _ = writeln!(
            s,
            "epoch,stage,{},grad_norm_pre,grad_norm_post_max,align_skipped",
            Components::NAMES.join(",")
        );
        for r in &self.records {
            let vals: Vec<String> = r.losses.values().iter().map(|&v| sig9(v)).collect();
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.epoch,
                r.stage,
                vals.join(","),
                sig9(r.grad_norm_pre),
                sig9(r.grad_norm_post_max),
                r.align_skipped
            );
        }
        s
    }
}

/// Loss components and parameter gradients of one sample.
pub fn sample_gradients(
    model: &ModelParams,
    sample: &TrainSample,
    pairnet: &PairNet,
    cfg: &CurriculumConfig,
    late: f64,
) -> Result<(Components, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let (root, c) = objective(&mut g, &p, sample, pairnet, cfg, late)?;
    g.backward(root)?;
    Ok((c, p.iter().map(|&id| g.grad(id)).collect()))
}

pub fn train(
    data: &[TrainSample],
    pairnet: &PairNet,
    cfg: &CurriculumConfig,
) -> Result<(ModelParams, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training set is empty".into()));
    }
    let mut model = ModelParams::init(cfg.seed);
    let mut opt = Adam::new(&model.params, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_c0ffee);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let late = cfg.late_mix(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 9];
        let mut skipped = 0;
        let (mut pre_sum, mut post_max, mut steps) = (0.0, 0f64, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &k in batch {
                let (c, grads) = sample_gradients(&model, &data[k], pairnet, cfg, late)?;
                for (s, v) in sums.iter_mut().zip(c.values()) {
                    *s += v;
                }
                skipped += c.align_skipped as usize;
                match acc.as_mut() {
                    Some(a) => accumulate(a, &grads),
                    None => acc = Some(grads),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            scale_all(&mut grads, 1.0 / batch.len() as f64);
            let (pre, post) = clip_global_norm(&mut grads, cfg.clip_norm);
            if !pre.is_finite() {
                return Err(Error::NonFinite("gradient norm".into()));
            }
            pre_sum += pre;
            post_max = post_max.max(post);
            steps += 1;
            opt.step(&mut model.params, &grads)?;
        }
        let n = data.len() as f64;
        let m = sums.map(|s| s / n);
        records.push(EpochRecord {
            epoch: epoch + 1,
            stage: cfg.stage(epoch),
            losses: Components {
                main: m[0],
                aux: m[1],
                seg: m[2],
                conf: m[3],
                pair: m[4],
                boxl: m[5],
                anat: m[6],
                align: m[7],
                total: m[8],
                align_skipped: false,
            },
            grad_norm_pre: pre_sum / steps as f64,
            grad_norm_post_max: post_max,
            align_skipped: skipped,
        });
    }
    Ok((
        model,
        TrainReport {
            records,
            checkpoint: None,
        },
    ))
}
