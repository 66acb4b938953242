//! Training engine: static-image encoding, same-category pairing, the
//! sliding replacement schedule, Adam and the train/evaluate loops.
//!
//! A training step forwards the static side of a paired batch through the
//! trunk and the static head, resets the network, forwards the event side
//! through the trunk and the event head, and takes one optimizer step on the
//! combined loss. Static slots are swapped for their paired event sample
//! with a probability that grows cubically with training progress.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::datasets::{Labeled, LoadedDataset, StaticImage};
use crate::losses::{tet_loss, total_loss, transfer_loss, AlignMetric, EtaParams, LossError, LossWeights};
use crate::numerics::{format_real, Graph, Tensor, TensorError};
use crate::snn::{EncodedInput, Head, InputGeom, LifConfig, Network, Record, SnnError};

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.mdl";
const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("pixel {index} has value {value}, outside [0, 1]")]
    OutOfRangePixel { index: usize, value: f64 },
    #[error("category {0} has event samples but no static samples")]
    MissingCategory(usize),
    #[error("no samples to draw a batch from")]
    EmptyTrainingSet,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Snn(#[from] SnnError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TransferError + '_ {
    move |source| TransferError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Position in the training run, used by the replacement schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SlideState {
    /// Batch index within the epoch.
    pub b_i: usize,
    /// Batches per epoch.
    pub b_l: usize,
    /// Current epoch, from 0.
    pub e_c: usize,
    /// Total epochs.
    pub e_m: usize,
    /// Epoch at which the transfer term switches off and replacement is
    /// complete.
    pub e_s: usize,
}

/// `min(1, ((b_i + e_c b_l) / (e_s b_l))³)`.
pub fn replacement_probability(s: &SlideState) -> f64 {
    let done = (s.b_i + s.e_c * s.b_l) as f64;
    let total = (s.e_s * s.b_l) as f64;
    if total <= 0.0 {
        return 1.0;
    }
    (done / total).powi(3).min(1.0)
}

/// The HSV value channel, `max(R, G, B)`, or the single channel of a
/// grayscale image.
pub fn hsv_value(img: &StaticImage) -> Result<Vec<f64>, TransferError> {
    if let Some((index, &value)) = img
        .values
        .iter()
        .enumerate()
        .find(|(_, v)| !(0.0..=1.0).contains(*v))
    {
        return Err(TransferError::OutOfRangePixel { index, value });
    }
    let n = img.height * img.width;
    match img.channels {
        1 => Ok(img.values.clone()),
        3 => Ok((0..n)
            .map(|i| img.values[i].max(img.values[n + i]).max(img.values[2 * n + i]))
            .collect()),
        c => Err(TransferError::InvalidConfig(format!("{c}-channel image"))),
    }
}

/// Direct coding: the value channel copied to both polarity channels and
/// repeated at every step.
pub fn encode_static(img: &StaticImage, timesteps: usize) -> Result<EncodedInput, TransferError> {
    let v = hsv_value(img)?;
    let mut values = Vec::with_capacity(timesteps * 2 * v.len());
    for _ in 0..timesteps * 2 {
        values.extend_from_slice(&v);
    }
    EncodedInput::new(timesteps, 2, img.height, img.width, values)
        .map_err(|e| TransferError::InvalidConfig(e.to_string()))
}

/// Same-category static/event pairs. Slot `i` of both sides carries
/// `labels[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedBatch {
    pub static_inputs: Vec<EncodedInput>,
    pub event_inputs: Vec<EncodedInput>,
    pub labels: Vec<usize>,
    /// Static slots that now hold their paired event sample.
    pub replaced: Vec<bool>,
}

impl PairedBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Sample indices grouped by label, in label order.
fn by_category<X>(set: &[Labeled<X>]) -> BTreeMap<usize, Vec<usize>> {
    let mut map: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in set.iter().enumerate() {
        map.entry(s.label).or_default().push(i);
    }
    map
}

fn static_pools(
    statics: &[Labeled<EncodedInput>],
    events: &BTreeMap<usize, Vec<usize>>,
) -> Result<BTreeMap<usize, Vec<usize>>, TransferError> {
    let pools = by_category(statics);
    if let Some(&missing) = events.keys().find(|c| !pools.contains_key(c)) {
        return Err(TransferError::MissingCategory(missing));
    }
    Ok(pools)
}

fn assemble(
    statics: &[Labeled<EncodedInput>],
    events: &[Labeled<EncodedInput>],
    pools: &BTreeMap<usize, Vec<usize>>,
    picks: &[usize],
    rng: &mut ChaCha8Rng,
) -> PairedBatch {
    let mut batch = PairedBatch {
        static_inputs: Vec::with_capacity(picks.len()),
        event_inputs: Vec::with_capacity(picks.len()),
        labels: Vec::with_capacity(picks.len()),
        replaced: vec![false; picks.len()],
    };
    for &e in picks {
        let label = events[e].label;
        let pool = &pools[&label];
        let s = pool[rng.gen_range(0..pool.len())];
        batch.static_inputs.push(statics[s].input.clone());
        batch.event_inputs.push(events[e].input.clone());
        batch.labels.push(label);
    }
    batch
}

/// Draws `b` event samples cycling through the categories in label order,
/// each uniformly within its category, and pairs each with a uniformly drawn
/// static sample of the same category.
pub fn sample_paired_batch(
    statics: &[Labeled<EncodedInput>],
    events: &[Labeled<EncodedInput>],
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PairedBatch, TransferError> {
    let cats = by_category(events);
    if cats.is_empty() {
        return Err(TransferError::EmptyTrainingSet);
    }
    let pools = static_pools(statics, &cats)?;
    let lists: Vec<&Vec<usize>> = cats.values().collect();
    let picks: Vec<usize> = (0..b)
        .map(|i| {
            let list = lists[i % lists.len()];
            list[rng.gen_range(0..list.len())]
        })
        .collect();
    Ok(assemble(statics, events, &pools, &picks, rng))
}

/// One epoch of batches. Each category's event samples are shuffled, then
/// interleaved round-robin across categories and cut into batches of `b`.
/// A trailing batch with fewer than two samples is dropped, since the
/// kernel statistics need at least two.
pub fn epoch_batches(
    statics: &[Labeled<EncodedInput>],
    events: &[Labeled<EncodedInput>],
    b: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<PairedBatch>, TransferError> {
    let mut cats = by_category(events);
    if cats.is_empty() {
        return Err(TransferError::EmptyTrainingSet);
    }
    let pools = static_pools(statics, &cats)?;
    for list in cats.values_mut() {
        list.shuffle(rng);
    }
    let longest = cats.values().map(Vec::len).max().unwrap_or(0);
    let order: Vec<usize> = (0..longest)
        .flat_map(|k| cats.values().filter_map(move |l| l.get(k).copied()))
        .collect();
    Ok(order
        .chunks(b)
        .filter(|c| c.len() >= 2)
        .map(|c| assemble(statics, events, &pools, c, rng))
        .collect())
}

/// Replaces each static slot by its paired event sample with probability
/// `p`, independently per slot. One uniform draw is consumed per slot
/// whatever `p` is.
pub fn apply_sliding_replacement(mut batch: PairedBatch, p: f64, rng: &mut ChaCha8Rng) -> PairedBatch {
    for m in 0..batch.len() {
        let u: f64 = rng.gen();
        if u < p {
            batch.static_inputs[m] = batch.event_inputs[m].clone();
            batch.replaced[m] = true;
        }
    }
    batch
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of every parameter slot. Slots keep their position across
    /// calls; a `None` gradient leaves the parameter and its moments alone.
    pub fn update(&mut self, params: &mut [&mut Tensor], grads: &[Option<&[f64]>]) {
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        if self.m.len() < params.len() {
            for p in &params[self.m.len()..] {
                self.m.push(vec![0.0; p.numel()]);
                self.v.push(vec![0.0; p.numel()]);
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (slot, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for (i, w) in p.data_mut().iter_mut().enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Ablation arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Event data only: TET on the event head.
    Baseline,
    /// Alignment plus learnable per-step mixing, with sliding replacement.
    Transfer,
    /// As `Transfer`, but static slots are kept until `e_s` and all replaced
    /// afterwards.
    TransferNoSlide,
    /// As `Transfer`, with the per-step mixing frozen at equal weights.
    DalOnly,
    /// As `Transfer`, with the mean-embedding distance as alignment metric.
    Mmd,
}

impl Mode {
    pub const ALL: [Mode; 5] = [
        Mode::Baseline,
        Mode::Transfer,
        Mode::TransferNoSlide,
        Mode::DalOnly,
        Mode::Mmd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Transfer => "transfer",
            Mode::TransferNoSlide => "transfer_no_slide",
            Mode::DalOnly => "dal_only",
            Mode::Mmd => "mmd",
        }
    }

    fn metric(self) -> AlignMetric {
        match self {
            Mode::Mmd => AlignMetric::Mmd,
            _ => AlignMetric::Cka,
        }
    }

    fn eta_trainable(self) -> bool {
        !matches!(self, Mode::DalOnly | Mode::Baseline)
    }

    /// Replacement probability this arm uses at `s`.
    pub fn probability(self, s: &SlideState) -> f64 {
        match self {
            Mode::Baseline => 1.0,
            Mode::TransferNoSlide => {
                if s.e_c < s.e_s {
                    0.0
                } else {
                    1.0
                }
            }
            _ => replacement_probability(s),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = TransferError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| TransferError::InvalidConfig(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss_all: f64,
    pub loss_cls_s: f64,
    /// Computed every step; only part of `loss_all` while the transfer term
    /// is active. Zero in baseline mode.
    pub loss_kt: f64,
    pub p_used: f64,
    pub replaced: usize,
}

/// Trainable state besides the network weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub net: Network,
    pub eta: EtaParams,
    pub opt: OptimizerState,
    pub weights: LossWeights,
    pub mode: Mode,
    steps: usize,
}

impl Learner {
    pub fn new(net: Network, timesteps: usize, weights: LossWeights, mode: Mode, lr: f64) -> Self {
        Learner {
            net,
            eta: EtaParams::new(timesteps),
            opt: OptimizerState::new(lr),
            weights,
            mode,
            steps: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One optimizer step on a paired batch.
    pub fn train_step(
        &mut self,
        batch: PairedBatch,
        slide: &SlideState,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepReport, TransferError> {
        let step = self.steps;
        self.steps += 1;
        let nonfinite = |e: TransferError| match e {
            TransferError::Snn(SnnError::NonFiniteActivation(_))
            | TransferError::Loss(LossError::Tensor(TensorError::NonFinite(_))) => {
                TransferError::NonFiniteLoss { step }
            }
            other => other,
        };
        let p = self.mode.probability(slide);
        let batch = apply_sliding_replacement(batch, p, rng);
        let replaced = batch.replaced.iter().filter(|&&r| r).count();
        let kt_active = slide.e_c < slide.e_s;
        let w = self.weights;

        let mut g = Graph::new();
        let bound = self.net.bind(&mut g);
        let eta = if self.mode.eta_trainable() {
            g.param(self.eta.eta.clone())
        } else {
            g.constant(self.eta.eta.clone())
        };
        let events: Vec<&EncodedInput> = batch.event_inputs.iter().collect();
        let (total, cls_s, kt) = if self.mode == Mode::Baseline {
            let te = self
                .net
                .forward(&mut g, &bound, &events, Head::Event, Record::default())
                .map_err(|e| nonfinite(e.into()))?;
            let cls = tet_loss(&mut g, te.head_t.as_deref().unwrap_or(&[]), &batch.labels, &w)
                .map_err(|e| nonfinite(e.into()))?;
            (cls, cls, None)
        } else {
            let statics: Vec<&EncodedInput> = batch.static_inputs.iter().collect();
            let run = |g: &mut Graph, net: &mut Network| -> Result<_, TransferError> {
                let ts = net.forward(g, &bound, &statics, Head::Static, Record::default())?;
                net.reset_state();
                let te = net.forward(g, &bound, &events, Head::Event, Record::default())?;
                let cls = tet_loss(g, ts.head_s.as_deref().unwrap_or(&[]), &batch.labels, &w)?;
                let kt = transfer_loss(
                    g,
                    &ts.penult,
                    &te.penult,
                    te.head_t.as_deref().unwrap_or(&[]),
                    &batch.labels,
                    eta,
                    &w,
                    self.mode.metric(),
                )?;
                let total = total_loss(g, cls, kt_active.then_some(kt), &w)?;
                Ok((total, cls, Some(kt)))
            };
            run(&mut g, &mut self.net).map_err(nonfinite)?
        };
        let report = StepReport {
            loss_all: g.value(total).item(),
            loss_cls_s: g.value(cls_s).item(),
            loss_kt: kt.map_or(0.0, |k| g.value(k).item()),
            p_used: p,
            replaced,
        };
        if !report.loss_all.is_finite() {
            return Err(TransferError::NonFiniteLoss { step });
        }
        g.backward(total).map_err(|_| TransferError::NonFiniteLoss { step })?;

        let grads: Vec<Option<Vec<f64>>> = bound
            .vars()
            .iter()
            .chain(std::iter::once(&eta))
            .map(|&v| g.grad(v).map(<[f64]>::to_vec))
            .collect();
        let grad_refs: Vec<Option<&[f64]>> = grads.iter().map(|g| g.as_deref()).collect();
        let mut params: Vec<&mut Tensor> = self.net.params_mut().iter_mut().map(|p| &mut p.value).collect();
        params.push(&mut self.eta.eta);
        self.opt.update(&mut params, &grad_refs);
        if !self.eta.eta.is_finite() {
            return Err(TransferError::NonFiniteLoss { step });
        }
        self.net.reset_state();
        Ok(report)
    }
}

/// Fraction of `test` classified correctly by the event head, predicting
/// the argmax of the step-averaged head potential.
pub fn evaluate(net: &Network, test: &[Labeled<EncodedInput>]) -> Result<f64, TransferError> {
    Ok(predict(net, test)?.iter().zip(test).filter(|(p, s)| **p == s.label).count() as f64 / test.len() as f64)
}

/// Event-head predictions for every sample.
pub fn predict(net: &Network, test: &[Labeled<EncodedInput>]) -> Result<Vec<usize>, TransferError> {
    if test.is_empty() {
        return Err(TransferError::EmptyTestSet);
    }
    let mut net = net.clone();
    let mut out = Vec::with_capacity(test.len());
    for chunk in test.chunks(EVAL_BATCH) {
        let inputs: Vec<&EncodedInput> = chunk.iter().map(|s| &s.input).collect();
        let tr = net.evaluate_trace(&inputs, Head::Event, Record::default())?;
        let heads = tr.head_t.unwrap_or_default();
        let k = net.classes();
        for b in 0..chunk.len() {
            let mut best = (0, f64::NEG_INFINITY);
            for c in 0..k {
                let mean = heads.iter().map(|h| h.data()[b * k + c]).sum::<f64>() / heads.len() as f64;
                if mean > best.1 {
                    best = (c, mean);
                }
            }
            out.push(best.0);
        }
    }
    Ok(out)
}

/// Flat `key = value` run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub arch: String,
    pub timesteps: usize,
    pub classes: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Defaults to `epochs`.
    pub e_s: Option<usize>,
    pub lr: f64,
    pub lambda_cls_s: f64,
    pub lambda_kt: f64,
    pub tet_lambda: f64,
    pub tet_phi: f64,
    pub tau: f64,
    pub v_th: f64,
    pub surrogate_width: f64,
    pub seed: u64,
    pub mode: Mode,
    pub static_dir: Option<PathBuf>,
    pub event_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: "15C5-AP2-40C5-AP2-FC-FC".into(),
            timesteps: 6,
            classes: 5,
            batch_size: 16,
            epochs: 30,
            e_s: None,
            lr: 1e-3,
            lambda_cls_s: 1.0,
            lambda_kt: 0.5,
            tet_lambda: 0.05,
            tet_phi: 0.5,
            tau: 0.5,
            v_th: 0.5,
            surrogate_width: 1.0,
            seed: 0,
            mode: Mode::Transfer,
            static_dir: None,
            event_dir: None,
            out_dir: None,
        }
    }
}

pub const CONFIG_KEYS: [&str; 19] = [
    "arch",
    "timesteps",
    "classes",
    "batch_size",
    "epochs",
    "e_s",
    "lr",
    "lambda_cls_s",
    "lambda_kt",
    "tet_lambda",
    "tet_phi",
    "tau",
    "v_th",
    "surrogate_width",
    "seed",
    "mode",
    "static_dir",
    "event_dir",
    "out_dir",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, TransferError> {
    value
        .parse()
        .map_err(|_| TransferError::InvalidConfig(format!("{key}: cannot parse {value:?}")))
}

impl TrainConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TransferError> {
        let v = value.trim();
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key.trim() {
            "arch" => self.arch = v.to_string(),
            "timesteps" => self.timesteps = parse_value(key, v)?,
            "classes" => self.classes = parse_value(key, v)?,
            "batch_size" => self.batch_size = parse_value(key, v)?,
            "epochs" => self.epochs = parse_value(key, v)?,
            "e_s" => self.e_s = Some(parse_value(key, v)?),
            "lr" => self.lr = parse_value(key, v)?,
            "lambda_cls_s" => self.lambda_cls_s = parse_value(key, v)?,
            "lambda_kt" => self.lambda_kt = parse_value(key, v)?,
            "tet_lambda" => self.tet_lambda = parse_value(key, v)?,
            "tet_phi" => self.tet_phi = parse_value(key, v)?,
            "tau" => self.tau = parse_value(key, v)?,
            "v_th" => self.v_th = parse_value(key, v)?,
            "surrogate_width" => self.surrogate_width = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "mode" => self.mode = v.parse()?,
            "static_dir" => self.static_dir = path(v),
            "event_dir" => self.event_dir = path(v),
            "out_dir" => self.out_dir = path(v),
            other => return Err(TransferError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Applies every `key = value` line of `text` on top of `self`. Blank
    /// lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<(), TransferError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TransferError::InvalidConfig(format!("line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn e_s(&self) -> usize {
        self.e_s.unwrap_or(self.epochs)
    }

    pub fn lif(&self) -> LifConfig {
        LifConfig {
            tau: self.tau,
            v_th: self.v_th,
            surrogate_width: self.surrogate_width,
            smooth: false,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_cls_s: self.lambda_cls_s,
            lambda_kt: self.lambda_kt,
            tet_lambda: self.tet_lambda,
            tet_phi: self.tet_phi,
        }
    }

    pub fn validate(&self) -> Result<(), TransferError> {
        let bad = |m: String| Err(TransferError::InvalidConfig(m));
        if self.timesteps == 0 || self.classes == 0 {
            return bad("timesteps and classes must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} below 2", self.batch_size));
        }
        if self.epochs > 0 && !(1..=self.epochs).contains(&self.e_s()) {
            return bad(format!("e_s {} not in [1, {}]", self.e_s(), self.epochs));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} not positive", self.lr));
        }
        self.weights().validate()?;
        self.lif().validate()?;
        Ok(())
    }

    /// Every key with its resolved value, one per line.
    pub fn to_text(&self) -> String {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let values = [
            self.arch.clone(),
            self.timesteps.to_string(),
            self.classes.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.e_s().to_string(),
            self.lr.to_string(),
            self.lambda_cls_s.to_string(),
            self.lambda_kt.to_string(),
            self.tet_lambda.to_string(),
            self.tet_phi.to_string(),
            self.tau.to_string(),
            self.v_th.to_string(),
            self.surrogate_width.to_string(),
            self.seed.to_string(),
            self.mode.to_string(),
            path(&self.static_dir),
            path(&self.event_dir),
            path(&self.out_dir),
        ];
        CONFIG_KEYS
            .iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Network-ready samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub height: usize,
    pub width: usize,
    pub statics: Vec<Labeled<EncodedInput>>,
    pub event_train: Vec<Labeled<EncodedInput>>,
    pub event_test: Vec<Labeled<EncodedInput>>,
}

impl TrainingData {
    /// Encodes the static images of `statics` and the event splits of
    /// `events`; the two may come from the same corpus.
    pub fn from_loaded(
        statics: Option<&LoadedDataset>,
        events: &LoadedDataset,
        timesteps: usize,
    ) -> Result<Self, TransferError> {
        let encode_static_set = |d: &LoadedDataset| {
            if (d.height, d.width) != (events.height, events.width) {
                return Err(TransferError::InvalidConfig(format!(
                    "static images are {}x{}, event frames {}x{}",
                    d.height, d.width, events.height, events.width
                )));
            }
            d.statics
                .iter()
                .map(|s| {
                    Ok(Labeled {
                        input: encode_static(&s.input, timesteps)?,
                        label: s.label,
                    })
                })
                .collect::<Result<Vec<_>, TransferError>>()
        };
        let enc = |set: &[Labeled<crate::events::FrameTensor>]| {
            set.iter()
                .map(|s| Labeled {
                    input: EncodedInput::from(s.input.clone()),
                    label: s.label,
                })
                .collect()
        };
        Ok(TrainingData {
            height: events.height,
            width: events.width,
            statics: statics.map(encode_static_set).transpose()?.unwrap_or_default(),
            event_train: enc(&events.event_train),
            event_test: enc(&events.event_test),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss_all: f64,
    pub train_loss_cls_s: f64,
    pub train_loss_kt: f64,
    pub p_final_batch: f64,
    pub test_acc: f64,
    pub eta_sigmoid: Vec<f64>,
}

pub fn metrics_header(timesteps: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "epoch",
        "train_loss_all",
        "train_loss_cls_s",
        "train_loss_kt",
        "p_final_batch",
        "test_acc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((0..timesteps).map(|t| format!("eta_sigmoid_{t}")));
    h
}

impl EpochRecord {
    pub fn to_row(&self) -> Vec<String> {
        let mut row = vec![
            self.epoch.to_string(),
            format_real(self.train_loss_all),
            format_real(self.train_loss_cls_s),
            format_real(self.train_loss_kt),
            format_real(self.p_final_batch),
            format_real(self.test_acc),
        ];
        row.extend(self.eta_sigmoid.iter().map(|&v| format_real(v)));
        row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: Network,
    pub eta: EtaParams,
    pub log: Vec<EpochRecord>,
}

/// Derives independent streams from the run seed.
fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

struct CsvLog {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl CsvLog {
    fn create(path: PathBuf, header: &[String]) -> Result<Self, TransferError> {
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header).map_err(|e| csv_err(&path, e))?;
        writer.flush().map_err(io_err(&path))?;
        Ok(CsvLog { path, writer })
    }

    fn push(&mut self, row: &[String]) -> Result<(), TransferError> {
        self.writer.write_record(row).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(io_err(&self.path))
    }
}

fn csv_err(path: &Path, e: csv::Error) -> TransferError {
    TransferError::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e.to_string()),
    }
}

/// Runs `config.epochs` epochs and evaluates on the event test split after
/// each one. With `out_dir` set, the metrics CSV is appended row by row (so
/// an aborted run keeps its completed epochs) and the final weights are
/// written as a checkpoint.
pub fn train(
    config: &TrainConfig,
    data: &TrainingData,
    out_dir: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedModel, TransferError> {
    config.validate()?;
    let geom = InputGeom::new(2, data.height, data.width);
    let net = Network::build(&config.arch, geom, config.classes, config.lif(), config.seed)?;
    if let Some(bad) = data
        .event_train
        .iter()
        .chain(&data.event_test)
        .chain(&data.statics)
        .find(|s| s.label >= config.classes)
    {
        return Err(TransferError::InvalidConfig(format!(
            "label {} with classes = {}",
            bad.label, config.classes
        )));
    }
    let mut learner = Learner::new(net, config.timesteps, config.weights(), config.mode, config.lr);
    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            Some(CsvLog::create(dir.join(METRICS_FILE), &metrics_header(config.timesteps))?)
        }
        None => None,
    };
    let mut sampler = stream(config.seed, 1);
    let mut replacer = stream(config.seed, 2);
    let mut log = Vec::with_capacity(config.epochs);
    let (e_m, e_s) = (config.epochs, config.e_s());
    for e_c in 0..e_m {
        // Baseline pairs each event sample with itself; no static data used.
        let statics = if config.mode == Mode::Baseline {
            &data.event_train
        } else {
            &data.statics
        };
        let batches = epoch_batches(statics, &data.event_train, config.batch_size, &mut sampler)?;
        let b_l = batches.len();
        let mut sums = [0.0; 3];
        let mut p_last = 0.0;
        for (b_i, batch) in batches.into_iter().enumerate() {
            let slide = SlideState { b_i, b_l, e_c, e_m, e_s };
            let r = learner.train_step(batch, &slide, &mut replacer)?;
            sums[0] += r.loss_all;
            sums[1] += r.loss_cls_s;
            sums[2] += r.loss_kt;
            p_last = r.p_used;
        }
        let record = EpochRecord {
            epoch: e_c,
            train_loss_all: sums[0] / b_l as f64,
            train_loss_cls_s: sums[1] / b_l as f64,
            train_loss_kt: sums[2] / b_l as f64,
            p_final_batch: p_last,
            test_acc: evaluate(&learner.net, &data.event_test)?,
            eta_sigmoid: learner.eta.weights(),
        };
        if let Some(f) = log_file.as_mut() {
            f.push(&record.to_row())?;
        }
        on_epoch(&record);
        log.push(record);
    }
    if let Some(dir) = out_dir {
        let path = dir.join(CHECKPOINT_FILE);
        let mut f = fs::File::create(&path).map_err(io_err(&path))?;
        f.write_all(&learner.net.save_checkpoint()).map_err(io_err(&path))?;
    }
    Ok(TrainedModel {
        net: learner.net,
        eta: learner.eta,
        log,
    })
}
