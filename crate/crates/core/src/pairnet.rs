//! Slice-pair consistency classifier and the pair penalty built on it.
//!
//! The classifier sees two masks stacked as channels and scores whether they
//! are consecutive slices of the same volume. During segmentation training it
//! is frozen and `1 - C(z)` acts as a learned regularizer.

use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, Graph, NodeId, Shape, Tensor};
use crate::config::{sig9, RunConfig};
use crate::error::{Error, Result};
use crate::fields::{Mask2D, MaskStack};
use crate::losses::{bce, mask_constant};
use crate::nn::{accumulate, init_params, scale_all, Adam, Init, ParamSet};

pub const MAGIC: &[u8; 4] = b"P4RN";

#[derive(Clone, Debug, PartialEq)]
pub struct PairSample {
    pub first: Mask2D,
    pub second: Mask2D,
    pub label: bool,
    pub volume: String,
    pub i: usize,
    pub j: usize,
}

impl PairSample {
    pub fn z(&self) -> Result<Tensor> {
        Tensor::from_fields(&[&self.first.to_field(), &self.second.to_field()])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairSampling {
    pub samples: Vec<PairSample>,
    /// Fewer negatives than requested were available.
    pub clamped: bool,
}

/// All consecutive pairs as positives plus `n_neg` non-consecutive pairs
/// drawn without replacement. Pairs are ordered, `i < j`.
pub fn sample_pairs(volume: &MaskStack, volume_id: &str, n_neg: usize, seed: u64) -> Result<PairSampling> {
    let d = volume.depth();
    if d < 2 {
        return Err(Error::Invalid(format!("pair sampling needs depth >= 2, got {d}")));
    }
    let pair = |i: usize, j: usize| PairSample {
        first: volume.get(i).clone(),
        second: volume.get(j).clone(),
        label: j == i + 1,
        volume: volume_id.to_string(),
        i,
        j,
    };
    let mut samples: Vec<PairSample> = (0..d - 1).map(|i| pair(i, i + 1)).collect();
    let pool: Vec<(usize, usize)> = (0..d)
        .flat_map(|i| (i + 2..d).map(move |j| (i, j)))
        .collect();
    let take = n_neg.min(pool.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in index::sample(&mut rng, pool.len(), take) {
        let (i, j) = pool[k];
        samples.push(pair(i, j));
    }
    Ok(PairSampling {
        samples,
        clamped: take < n_neg,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairNet {
    pub params: ParamSet,
}

fn layout() -> Vec<(Shape, Init)> {
    vec![
        (Shape::new(8, 2, 9), Init::He),
        (Shape::new(8, 1, 1), Init::Zeros),
        (Shape::new(16, 8, 9), Init::He),
        (Shape::new(16, 1, 1), Init::Zeros),
        (Shape::new(1, 16, 1), Init::He),
        (Shape::new(1, 1, 1), Init::Zeros),
    ]
}

impl PairNet {
    pub fn init(seed: u64) -> Self {
        Self {
            params: init_params(&layout(), seed),
        }
    }

    pub fn from_params(params: ParamSet) -> Result<Self> {
        let shapes: Vec<Shape> = layout().iter().map(|l| l.0).collect();
        params.check_layout(&shapes)?;
        Ok(Self { params })
    }

    pub fn read(path: &std::path::Path) -> Result<Self> {
        Self::from_params(ParamSet::read(MAGIC, path)?)
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        self.params.write(MAGIC, path)
    }

    /// Consistency logit for a `[2, H, W]` input, shape `[1, 1, 1]`.
    pub fn logit(g: &mut Graph, p: &[NodeId], z: NodeId) -> Result<NodeId> {
        let h = g.conv2d(z, p[0], Some(p[1]), 2)?;
        let h = g.relu(h);
        let h = g.conv2d(h, p[2], Some(p[3]), 2)?;
        let h = g.relu(h);
        let v = g.global_avg_pool(h);
        g.conv2d(v, p[4], Some(p[5]), 1)
    }

    /// `C(z)` in (0, 1).
    pub fn score(&self, z: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let zi = g.constant(z.clone());
        let l = Self::logit(&mut g, &p, zi)?;
        Ok(sigmoid(g.scalar(l)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Also train on every pair with its channels swapped.
    pub swap_augment: bool,
}

const DEFAULTS: &[(&str, &str)] = &[
    ("epochs", "30"),
    ("lr", "0.01"),
    ("batch_size", "16"),
    ("seed", "0"),
    ("swap_augment", "false"),
];

impl PairTrainConfig {
    pub fn default_config() -> RunConfig {
        RunConfig::with_defaults(DEFAULTS)
    }

    pub fn from_config(c: &RunConfig) -> Result<Self> {
        let cfg = Self {
            epochs: c.get("epochs")?,
            lr: c.get("lr")?,
            batch_size: c.get("batch_size")?,
            seed: c.get("seed")?,
            swap_augment: c.get_bool("swap_augment")?,
        };
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", cfg.lr)));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(cfg)
    }
}

impl Default for PairTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 0.01,
            batch_size: 16,
            seed: 0,
            swap_augment: false,
        }
    }
}

/// Loss and gradients for one sample, graph built from scratch.
fn sample_step(params: &ParamSet, s: &PairSample) -> Result<(f64, bool, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = params.bind(&mut g);
    let z = g.constant(s.z()?);
    let logit = PairNet::logit(&mut g, &p, z)?;
    let q = g.sigmoid(logit);
    let t = g.constant_scalar(if s.label { 1.0 } else { 0.0 });
    let loss = bce(&mut g, q, t, 1e-7)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::NonFinite("pair classifier loss".into()));
    }
    g.backward(loss)?;
    let correct = (g.scalar(logit) > 0.0) == s.label;
    Ok((value, correct, p.iter().map(|&id| g.grad(id)).collect()))
}

/// Minibatch Adam on mean BCE. Returns the trained net and per-epoch
/// training loss/accuracy.
pub fn train_pairnet(samples: &[PairSample], cfg: &PairTrainConfig) -> Result<(PairNet, Vec<PairEpoch>)> {
    let pos = samples.iter().filter(|s| s.label).count();
    if pos == 0 || pos == samples.len() {
        return Err(Error::Invalid("pair training needs both positive and negative samples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Invalid("batch_size must be >= 1".into()));
    }
    let swapped: Vec<PairSample>;
    let samples = if cfg.swap_augment {
        swapped = samples
            .iter()
            .cloned()
            .chain(samples.iter().map(|s| PairSample {
                first: s.second.clone(),
                second: s.first.clone(),
                i: s.j,
                j: s.i,
                ..s.clone()
            }))
            .collect();
        &swapped[..]
    } else {
        samples
    };
    let mut net = PairNet::init(cfg.seed);
    let mut opt = Adam::new(&net.params, cfg.lr, 0.9, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut total, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &k in batch {
                let (l, ok, grads) = sample_step(&net.params, &samples[k])?;
                total += l;
                correct += ok as usize;
                match acc.as_mut() {
                    Some(a) => accumulate(a, &grads),
                    None => acc = Some(grads),
                }
            }
            let mut grads = acc.expect("non-empty batch");
            scale_all(&mut grads, 1.0 / batch.len() as f64);
            opt.step(&mut net.params, &grads)?;
        }
        history.push(PairEpoch {
            epoch: epoch + 1,
            loss: total / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        });
    }
    Ok((net, history))
}

pub fn accuracy(net: &PairNet, samples: &[PairSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("accuracy of an empty sample set".into()));
    }
    let mut correct = 0;
    for s in samples {
        correct += ((net.score(&s.z()?)? > 0.5) == s.label) as usize;
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub fn history_csv(preamble: &str, history: &[PairEpoch]) -> String {
    let mut s = String::from(preamble);
    s.push_str("epoch,loss,accuracy\n");
    for h in history {
        let _ = writeln!(s, "{},{},{}", h.epoch, sig9(h.loss), sig9(h.accuracy));
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairPenalty {
    pub node: NodeId,
    pub pairs: usize,
    /// No pair could be formed; `node` is a constant 0.
    pub empty: bool,
}

/// `lambda_c * mean(1 - C_i)` over score nodes.
pub fn penalty_from_scores(g: &mut Graph, scores: &[NodeId], lambda_c: f64) -> Result<PairPenalty> {
    let Some((&first, rest)) = scores.split_first() else {
        return Ok(PairPenalty {
            node: g.constant_scalar(0.0),
            pairs: 0,
            empty: true,
        });
    };
    let mut acc = g.one_minus(first);
    for &s in rest {
        let t = g.one_minus(s);
        acc = g.add(acc, t)?;
    }
    let node = g.scale(acc, lambda_c / scores.len() as f64);
    Ok(PairPenalty {
        node,
        pairs: scores.len(),
        empty: false,
    })
}

/// Pair penalty for soft predictions `p` of slices `i` (one `[1,H,W]` node
/// each) against ground-truth neighbors in `context`: the forward pair
/// `(p_i, y_{i+1})` and the backward pair `(y_{i-1}, p_i)` where they exist.
/// The classifier is frozen.
pub fn l_pair(
    g: &mut Graph,
    preds: &[(usize, NodeId)],
    context: &MaskStack,
    net: &PairNet,
    lambda_c: f64,
) -> Result<PairPenalty> {
    let params = net.params.bind_frozen(g);
    let mut scores = Vec::new();
    for &(i, p) in preds {
        if i >= context.depth() {
            return Err(Error::Invalid(format!("slice {i} outside context of depth {}", context.depth())));
        }
        if i + 1 < context.depth() {
            let y = mask_constant(g, context.get(i + 1));
            let z = g.concat(&[p, y])?;
            let l = PairNet::logit(g, &params, z)?;
            scores.push(g.sigmoid(l));
        }
        if i > 0 {
            let y = mask_constant(g, context.get(i - 1));
            let z = g.concat(&[y, p])?;
            let l = PairNet::logit(g, &params, z)?;
            scores.push(g.sigmoid(l));
        }
    }
    penalty_from_scores(g, &scores, lambda_c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(d: usize) -> MaskStack {
        MaskStack::new((0..d).map(|k| Mask2D::from_points(8, 8, &[(k % 8, 1)])).collect()).unwrap()
    }

    #[test]
    fn positives_and_negatives() {
        let s = sample_pairs(&stack(5), "v", 0, 1).unwrap();
        assert_eq!(s.samples.len(), 4);
        assert!(s.samples.iter().all(|p| p.label && p.j == p.i + 1));

        let s = sample_pairs(&stack(3), "v", 5, 1).unwrap();
        let neg: Vec<_> = s.samples.iter().filter(|p| !p.label).map(|p| (p.i, p.j)).collect();
        assert_eq!(neg, vec![(0, 2)]);
        assert!(s.clamped);

        let a = sample_pairs(&stack(8), "v", 6, 42).unwrap();
        assert_eq!(a, sample_pairs(&stack(8), "v", 6, 42).unwrap());
        assert!(!a.clamped);
        for p in &a.samples {
            assert!(p.i < p.j);
            assert_eq!(p.label, p.j - p.i == 1);
        }
        assert!(sample_pairs(&stack(1), "v", 0, 0).is_err());
    }

    #[test]
    fn param_budget() {
        assert!(PairNet::init(0).params.count() < 5000);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let s = sample_pairs(&stack(4), "v", 2, 0).unwrap().samples;
        let cfg = PairTrainConfig {
            epochs: 0,
            seed: 9,
            ..Default::default()
        };
        let (net, hist) = train_pairnet(&s, &cfg).unwrap();
        assert_eq!(net, PairNet::init(9));
        assert!(hist.is_empty());
        let swap = PairTrainConfig {
            epochs: 1,
            swap_augment: true,
            ..cfg
        };
        assert!(train_pairnet(&s, &swap).unwrap().1[0].loss.is_finite());
        let only_pos = sample_pairs(&stack(4), "v", 0, 0).unwrap().samples;
        assert!(train_pairnet(&only_pos, &cfg).is_err());
    }

    #[test]
    fn bce_at_half_is_ln2() {
        // zero final affine => C(z) = 0.5 for any input
        let mut net = PairNet::init(3);
        net.params.tensors[4] = Tensor::zeros(Shape::new(1, 16, 1));
        let s = &sample_pairs(&stack(3), "v", 1, 0).unwrap().samples[0];
        assert_eq!(net.score(&s.z().unwrap()).unwrap(), 0.5);
        let (l, _, _) = sample_step(&net.params, s).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn penalty_arithmetic() {
        let mut g = Graph::new();
        let a = g.constant_scalar(0.9);
        let b = g.constant_scalar(0.7);
        let p = penalty_from_scores(&mut g, &[a, b], 0.5).unwrap();
        assert!((g.scalar(p.node) - 0.1).abs() < 1e-12);
        let none = penalty_from_scores(&mut g, &[], 1.0).unwrap();
        assert!(none.empty && g.scalar(none.node) == 0.0);
    }

    fn constant_net(bias: f64) -> PairNet {
        let mut net = PairNet::init(0);
        net.params.tensors[4] = Tensor::zeros(Shape::new(1, 16, 1));
        net.params.tensors[5] = Tensor::scalar(bias);
        net
    }

    #[test]
    fn penalty_examples() {
        let ctx = stack(4);
        let mut g = Graph::new();
        let p = g.variable(Tensor::filled(Shape::new(1, 8, 8), 0.3));
        let half = l_pair(&mut g, &[(1, p)], &ctx, &constant_net(0.0), 1.0).unwrap();
        assert_eq!(half.pairs, 2);
        assert!((g.scalar(half.node) - 0.5).abs() < 1e-12);
        let one = l_pair(&mut g, &[(0, p)], &ctx, &constant_net(60.0), 1.0).unwrap();
        assert_eq!(one.pairs, 1);
        assert!(g.scalar(one.node) < 1e-12);
        let single = MaskStack::new(vec![Mask2D::zeros(8, 8)]).unwrap();
        assert!(l_pair(&mut g, &[(0, p)], &single, &constant_net(0.0), 1.0).unwrap().empty);
    }

    #[test]
    fn separable_toy_set() {
        // positives: identical channels; negatives: disjoint blobs
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let blob = |r: usize, c: usize| Mask2D::from_fn(16, 16, |y, x| y.abs_diff(r) <= 2 && x.abs_diff(c) <= 2);
        let mut make = |n: usize| -> Vec<PairSample> {
            (0..n)
                .map(|k| {
                    let r = rand::Rng::random_range(&mut rng, 3..13);
                    let c = rand::Rng::random_range(&mut rng, 3..7);
                    let a = blob(r, c);
                    let label = k % 2 == 0;
                    let b = if label { a.clone() } else { blob(r, c + 7) };
                    PairSample { first: a, second: b, label, volume: "toy".into(), i: 0, j: 1 }
                })
                .collect()
        };
        let train = make(64);
        let held = make(40);
        let cfg = PairTrainConfig {
            epochs: 50,
            lr: 0.01,
            batch_size: 8,
            seed: 1,
            swap_augment: false,
        };
        let (net, hist) = train_pairnet(&train, &cfg).unwrap();
        assert!(hist.iter().all(|h| h.loss.is_finite()));
        let acc = accuracy(&net, &held).unwrap();
        assert!(acc >= 0.95, "held-out accuracy {acc}");
    }
}
