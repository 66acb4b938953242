//! Time-stepped spiking network.
//!
//! Each LIF population integrates its input current, fires where the
//! membrane potential reaches `v_th` and carries `tau * u * (1 - s)` to the
//! next step. The trunk is shared between the static and event domains;
//! two affine heads read the last trunk population's spikes into leaky,
//! non-firing integrators whose potential is the per-step output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::events::FrameTensor;
use crate::numerics::{sigmoid, BackwardRule, Graph, Tensor, TensorError, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDL1";
pub const DEFAULT_HIDDEN: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SnnError {
    #[error("architecture token {position} ({token:?}): {reason}")]
    SpecParse {
        position: usize,
        token: String,
        reason: &'static str,
    },
    #[error("token {position} ({token:?}) pools a {height}x{width} map")]
    GeometryUnderflow {
        position: usize,
        token: String,
        height: usize,
        width: usize,
    },
    #[error("invalid LIF configuration: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} does not match network input {expected:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },
    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),
    #[error(transparent)]
    Tensor(TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl From<TensorError> for SnnError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite(op) => SnnError::NonFiniteActivation(op),
            other => SnnError::Tensor(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LifConfig {
    pub tau: f64,
    pub v_th: f64,
    pub surrogate_width: f64,
    /// Replace the hard step by `sigmoid((u - v_th) / a)` in the forward
    /// pass. Only meant for gradient checking.
    pub smooth: bool,
}

impl Default for LifConfig {
    fn default() -> Self {
        LifConfig {
            tau: 0.5,
            v_th: 0.5,
            surrogate_width: 1.0,
            smooth: false,
        }
    }
}

impl LifConfig {
    pub fn validate(&self) -> Result<(), SnnError> {
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(SnnError::InvalidConfig(format!("tau {} not in (0, 1)", self.tau)));
        }
        if !(self.v_th > 0.0) {
            return Err(SnnError::InvalidConfig(format!("v_th {} not positive", self.v_th)));
        }
        if !(self.surrogate_width > 0.0) {
            return Err(SnnError::InvalidConfig(format!(
                "surrogate width {} not positive",
                self.surrogate_width
            )));
        }
        Ok(())
    }
}

/// Derivative used for the firing step: rectangular window of height `1/a`
/// and width `a` around the threshold, or the exact sigmoid derivative in
/// smooth mode.
pub fn surrogate_grad(u: &Tensor, cfg: &LifConfig) -> Tensor {
    let a = cfg.surrogate_width;
    Tensor::from_fn(u.shape(), |i| surrogate_at(u.data()[i], cfg.v_th, a, cfg.smooth))
}

fn surrogate_at(u: f64, v_th: f64, a: f64, smooth: bool) -> f64 {
    if smooth {
        let s = sigmoid((u - v_th) / a);
        s * (1.0 - s) / a
    } else if (u - v_th).abs() <= a / 2.0 {
        1.0 / a
    } else {
        0.0
    }
}

#[derive(Debug)]
struct FireRule {
    v_th: f64,
    width: f64,
    smooth: bool,
}

impl BackwardRule for FireRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let u = inputs[0].data();
        let gu = u
            .iter()
            .zip(g)
            .map(|(&ui, gi)| gi * surrogate_at(ui, self.v_th, self.width, self.smooth))
            .collect();
        vec![Some(gu)]
    }
}

#[derive(Debug)]
struct LeakResetRule {
    tau: f64,
}

impl BackwardRule for LeakResetRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (u, s) = (inputs[0].data(), inputs[1].data());
        let gu = needs[0].then(|| {
            g.iter().zip(s).map(|(gi, si)| gi * self.tau * (1.0 - si)).collect()
        });
        let gs = needs[1].then(|| {
            g.iter().zip(u).map(|(gi, ui)| -gi * self.tau * ui).collect()
        });
        vec![gu, gs]
    }
}

/// Fires a population with membrane potential `u`.
pub fn fire(graph: &mut Graph, u: Var, cfg: &LifConfig) -> Result<Var, TensorError> {
    let uv = graph.value(u);
    let (th, a) = (cfg.v_th, cfg.surrogate_width);
    let value = if cfg.smooth {
        Tensor::from_fn(uv.shape(), |i| sigmoid((uv.data()[i] - th) / a))
    } else {
        Tensor::from_fn(uv.shape(), |i| if uv.data()[i] >= th { 1.0 } else { 0.0 })
    };
    graph.custom(
        "fire",
        &[u],
        value,
        Box::new(FireRule {
            v_th: th,
            width: a,
            smooth: cfg.smooth,
        }),
    )
}

/// `tau * u * (1 - s)`: the potential carried into the next step.
pub fn leak_reset(graph: &mut Graph, u: Var, s: Var, tau: f64) -> Result<Var, TensorError> {
    let (uv, sv) = (graph.value(u), graph.value(s));
    if uv.shape() != sv.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "leak_reset",
            expected: uv.shape().to_vec(),
            got: sv.shape().to_vec(),
        });
    }
    let value = Tensor::from_fn(uv.shape(), |i| tau * uv.data()[i] * (1.0 - sv.data()[i]));
    graph.custom("leak_reset", &[u, s], value, Box::new(LeakResetRule { tau }))
}

/// Output of one LIF update.
#[derive(Debug, Clone, Copy)]
pub struct LifStep {
    pub spikes: Var,
    /// Potential after integration, before firing.
    pub membrane: Var,
    /// Potential carried into the next step.
    pub carry: Var,
}

/// One LIF update: `u = carry + current`, `s = H(u - v_th)`,
/// `carry' = tau * u * (1 - s)`. `carry = None` is the reset state.
pub fn lif_step(
    graph: &mut Graph,
    carry: Option<Var>,
    current: Var,
    cfg: &LifConfig,
) -> Result<LifStep, TensorError> {
    let membrane = match carry {
        Some(c) => graph.add(c, current)?,
        None => current,
    };
    let spikes = fire(graph, membrane, cfg)?;
    let carry = leak_reset(graph, membrane, spikes, cfg.tau)?;
    Ok(LifStep {
        spikes,
        membrane,
        carry,
    })
}

/// Network input: `[T, channels, H, W]` for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedInput {
    timesteps: usize,
    channels: usize,
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl EncodedInput {
    pub fn new(
        timesteps: usize,
        channels: usize,
        height: usize,
        width: usize,
        values: Vec<f64>,
    ) -> Result<Self, TensorError> {
        let shape = vec![timesteps, channels, height, width];
        if values.len() != shape.iter().product::<usize>() || shape.contains(&0) {
            return Err(TensorError::BadLength {
                op: "encoded_input",
                len: values.len(),
                shape,
            });
        }
        Ok(EncodedInput {
            timesteps,
            channels,
            height,
            width,
            values,
        })
    }

    pub fn zeros(timesteps: usize, channels: usize, height: usize, width: usize) -> Self {
        EncodedInput {
            timesteps,
            channels,
            height,
            width,
            values: vec![0.0; timesteps * channels * height * width],
        }
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.timesteps, self.channels, self.height, self.width]
    }

    pub fn timesteps(&self) -> usize {
        self.timesteps
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The `[channels, H, W]` frame at step `t`.
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.channels * self.height * self.width;
        &self.values[t * n..(t + 1) * n]
    }
}

impl From<FrameTensor> for EncodedInput {
    fn from(f: FrameTensor) -> Self {
        let [t, c, h, w] = f.shape();
        EncodedInput {
            timesteps: t,
            channels: c,
            height: h,
            width: w,
            values: f.into_values(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InputGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl InputGeom {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        InputGeom {
            channels,
            height,
            width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { channels: usize, kernel: usize },
    Pool,
    Fc { width: usize },
}

/// Parses `15C5-AP2-40C5-AP2-FC-FC`-style strings. The last token must be
/// an `FC` and becomes the head; the rest form the trunk.
pub fn parse_arch(spec: &str, classes: usize) -> Result<Vec<LayerSpec>, SnnError> {
    let tokens: Vec<&str> = spec.split('-').map(str::trim).collect();
    let err = |position: usize, reason: &'static str| SnnError::SpecParse {
        position,
        token: tokens[position].to_string(),
        reason,
    };
    let mut layers = Vec::with_capacity(tokens.len());
    for (i, tok) in tokens.iter().enumerate() {
        let last = i + 1 == tokens.len();
        let layer = if *tok == "AP2" {
            LayerSpec::Pool
        } else if let Some(rest) = tok.strip_prefix("FC") {
            let width = if rest.is_empty() {
                if last {
                    classes
                } else {
                    DEFAULT_HIDDEN
                }
            } else {
                rest.parse::<usize>()
                    .ok()
                    .filter(|&w| w > 0)
                    .ok_or_else(|| err(i, "bad FC width"))?
            };
            if last && width != classes {
                return Err(err(i, "head width differs from class count"));
            }
            LayerSpec::Fc { width }
        } else if let Some((n, k)) = tok.split_once('C') {
            let channels = n.parse::<usize>().ok().filter(|&c| c > 0);
            let kernel = k.parse::<usize>().ok().filter(|&k| k > 0);
            match (channels, kernel) {
                (Some(channels), Some(kernel)) => LayerSpec::Conv { channels, kernel },
                _ => return Err(err(i, "expected <channels>C<kernel>")),
            }
        } else if tok.is_empty() {
            return Err(err(i, "empty token"));
        } else {
            return Err(err(i, "unknown token"));
        };
        if last && !matches!(layer, LayerSpec::Fc { .. }) {
            return Err(err(i, "last token must be FC"));
        }
        layers.push(layer);
    }
    Ok(layers)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
enum Layer {
    /// `param` indexes the kernel.
    Conv { param: usize, padding: usize },
    Pool,
    /// `param` indexes the weight; the bias follows it.
    Fc { param: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Static,
    Event,
    Both,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Record {
    /// Keep every LIF population's membrane potential at every step.
    pub membranes: bool,
    /// Count spikes per LIF population.
    pub spikes: bool,
}

/// Per-step results of a forward pass. Graph handles refer to the graph the
/// pass ran on.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[B, D]` potential of the penultimate population, one per step.
    pub penult: Vec<Var>,
    /// `[B, K]` static-head potential per step.
    pub head_s: Option<Vec<Var>>,
    /// `[B, K]` event-head potential per step.
    pub head_t: Option<Vec<Var>>,
    /// `membranes[layer][t]`, flattened `[B, N]` per LIF population.
    pub membranes: Option<Vec<Vec<Tensor>>>,
    pub spike_counts: Option<Vec<f64>>,
}

/// Graph handles of the network parameters, in [`Network::params`] order.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Integrator state left by the last forward pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NetState {
    pub layers: Vec<Tensor>,
    pub head_s: Option<Tensor>,
    pub head_t: Option<Tensor>,
}

impl NetState {
    pub fn is_zero(&self) -> bool {
        let zero = |t: &Tensor| t.data().iter().all(|&v| v == 0.0);
        self.layers.iter().all(zero)
            && self.head_s.as_ref().map_or(true, zero)
            && self.head_t.as_ref().map_or(true, zero)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: String,
    input: InputGeom,
    classes: usize,
    lif: LifConfig,
    layers: Vec<Layer>,
    /// Flattened width feeding the heads.
    feature_dim: usize,
    lif_names: Vec<String>,
    params: Vec<Param>,
    head_s: usize,
    head_t: usize,
    state: NetState,
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl Network {
    /// Builds the network with He-uniform weights drawn from `seed`.
    pub fn build(
        arch: &str,
        input: InputGeom,
        classes: usize,
        lif: LifConfig,
        seed: u64,
    ) -> Result<Self, SnnError> {
        lif.validate()?;
        if classes == 0 {
            return Err(SnnError::InvalidConfig("zero classes".into()));
        }
        let specs = parse_arch(arch, classes)?;
        let tokens: Vec<&str> = arch.split('-').map(str::trim).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut layers = Vec::new();
        let mut lif_names = Vec::new();
        let (mut c, mut h, mut w) = (input.channels, input.height, input.width);
        let mut flat: Option<usize> = None;

        let (head_spec, trunk) = specs.split_last().expect("parse_arch returns at least one token");
        for (i, spec) in trunk.iter().enumerate() {
            match *spec {
                LayerSpec::Conv { channels, kernel } => {
                    if flat.is_some() {
                        return Err(SnnError::SpecParse {
                            position: i,
                            token: tokens[i].into(),
                            reason: "convolution after FC",
                        });
                    }
                    let padding = kernel / 2;
                    let (ho, wo) = (h + 2 * padding + 1, w + 2 * padding + 1);
                    if ho <= kernel || wo <= kernel {
                        return Err(SnnError::GeometryUnderflow {
                            position: i,
                            token: tokens[i].into(),
                            height: h,
                            width: w,
                        });
                    }
                    let fan_in = c * kernel * kernel;
                    params.push(Param {
                        name: format!("trunk.{i}.kernel"),
                        value: he_uniform(&mut rng, &[channels, c, kernel, kernel], fan_in),
                    });
                    layers.push(Layer::Conv {
                        param: params.len() - 1,
                        padding,
                    });
                    lif_names.push(format!("{i}:{}", tokens[i]));
                    (c, h, w) = (channels, ho - kernel, wo - kernel);
                }
                LayerSpec::Pool => {
                    if flat.is_some() {
                        return Err(SnnError::SpecParse {
                            position: i,
                            token: tokens[i].into(),
                            reason: "pooling after FC",
                        });
                    }
                    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
                        return Err(SnnError::GeometryUnderflow {
                            position: i,
                            token: tokens[i].into(),
                            height: h,
                            width: w,
                        });
                    }
                    layers.push(Layer::Pool);
                    (h, w) = (h / 2, w / 2);
                }
                LayerSpec::Fc { width } => {
                    let d = flat.unwrap_or(c * h * w);
                    params.push(Param {
                        name: format!("trunk.{i}.weight"),
                        value: he_uniform(&mut rng, &[d, width], d),
                    });
                    params.push(Param {
                        name: format!("trunk.{i}.bias"),
                        value: Tensor::zeros(&[width]),
                    });
                    layers.push(Layer::Fc {
                        param: params.len() - 2,
                    });
                    lif_names.push(format!("{i}:{}", tokens[i]));
                    flat = Some(width);
                }
            }
        }
        let LayerSpec::Fc { width: k } = *head_spec else {
            unreachable!("parse_arch guarantees an FC head")
        };
        let d = flat.unwrap_or(c * h * w);
        let mut head = |name: &str, params: &mut Vec<Param>| {
            params.push(Param {
                name: format!("{name}.weight"),
                value: he_uniform(&mut rng, &[d, k], d),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                value: Tensor::zeros(&[k]),
            });
            params.len() - 2
        };
        let head_s = head("head_s", &mut params);
        let head_t = head("head_t", &mut params);
        Ok(Network {
            arch: arch.to_string(),
            input,
            classes,
            lif,
            layers,
            feature_dim: d,
            lif_names,
            params,
            head_s,
            head_t,
            state: NetState::default(),
        })
    }

    pub fn arch(&self) -> &str {
        &self.arch
    }

    pub fn input_geom(&self) -> InputGeom {
        self.input
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn lif(&self) -> &LifConfig {
        &self.lif
    }

    pub fn set_smooth(&mut self, smooth: bool) {
        self.lif.smooth = smooth;
    }

    /// Width of the features read by the heads.
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Names of the LIF populations, in depth order. These are the valid
    /// layer taps for diagnostics.
    pub fn lif_layers(&self) -> &[String] {
        &self.lif_names
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn state(&self) -> &NetState {
        &self.state
    }

    pub fn reset_state(&mut self) {
        for t in &mut self.state.layers {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        for t in [&mut self.state.head_s, &mut self.state.head_t].into_iter().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Registers every parameter on `graph` as a trainable leaf.
    pub fn bind(&self, graph: &mut Graph) -> Bound {
        Bound {
            vars: self.params.iter().map(|p| graph.param(p.value.clone())).collect(),
        }
    }

    /// Stacks samples into one `[B, C, H, W]` tensor per step.
    fn stack(&self, inputs: &[&EncodedInput]) -> Result<Vec<Tensor>, SnnError> {
        let expected = |t| vec![t, self.input.channels, self.input.height, self.input.width];
        let t = inputs.first().map_or(0, |x| x.timesteps);
        if t == 0 {
            return Err(SnnError::InputShape {
                expected: expected(1),
                got: vec![],
            });
        }
        for x in inputs {
            if x.shape().to_vec() != expected(t) {
                return Err(SnnError::InputShape {
                    expected: expected(t),
                    got: x.shape().to_vec(),
                });
            }
        }
        let n = self.input.channels * self.input.height * self.input.width;
        let shape = [inputs.len(), self.input.channels, self.input.height, self.input.width];
        Ok((0..t)
            .map(|step| {
                let mut data = Vec::with_capacity(inputs.len() * n);
                for x in inputs {
                    data.extend_from_slice(x.frame(step));
                }
                Tensor::new(shape.to_vec(), data).expect("stacked shape")
            })
            .collect())
    }

    /// Runs all time steps from a reset state. The integrator state is
    /// reset before the first step; the state left afterwards is kept in
    /// [`Network::state`].
    pub fn forward(
        &mut self,
        graph: &mut Graph,
        bound: &Bound,
        inputs: &[&EncodedInput],
        head: Head,
        record: Record,
    ) -> Result<ForwardTrace, SnnError> {
        self.reset_state();
        let frames = self.stack(inputs)?;
        let batch = inputs.len();
        let lif = self.lif;
        let n_lif = self.lif_names.len();
        let mut carries: Vec<Option<Var>> = vec![None; n_lif];
        let mut heads: [(bool, usize, Option<Var>, Vec<Var>); 2] = [
            (matches!(head, Head::Static | Head::Both), self.head_s, None, Vec::new()),
            (matches!(head, Head::Event | Head::Both), self.head_t, None, Vec::new()),
        ];
        let mut penult = Vec::with_capacity(frames.len());
        let mut membranes = record.membranes.then(|| vec![Vec::new(); n_lif]);
        let mut spike_counts = record.spikes.then(|| vec![0.0; n_lif]);

        for frame in frames {
            let mut cur = graph.constant(frame);
            let mut last_membrane = None;
            let mut li = 0;
            for layer in &self.layers {
                let current = match *layer {
                    Layer::Pool => {
                        cur = graph.avg_pool2d(cur)?;
                        continue;
                    }
                    Layer::Conv { param, padding } => graph.conv2d(cur, bound.vars[param], padding)?,
                    Layer::Fc { param } => {
                        if graph.value(cur).shape().len() != 2 {
                            cur = graph.reshape(cur, &[batch, graph.value(cur).numel() / batch])?;
                        }
                        graph.fully_connected(cur, bound.vars[param], Some(bound.vars[param + 1]))?
                    }
                };
                let step = lif_step(graph, carries[li], current, &lif)?;
                carries[li] = Some(step.carry);
                if let Some(m) = membranes.as_mut() {
                    let v = graph.value(step.membrane);
                    let n = v.numel() / batch;
                    m[li].push(v.clone().reshape(&[batch, n])?);
                }
                if let Some(c) = spike_counts.as_mut() {
                    c[li] += graph.value(step.spikes).data().iter().sum::<f64>();
                }
                last_membrane = Some(step.membrane);
                cur = step.spikes;
                li += 1;
            }
            if graph.value(cur).shape().len() != 2 {
                cur = graph.reshape(cur, &[batch, self.feature_dim])?;
            }
            let feat = match last_membrane {
                Some(m) => {
                    let n = graph.value(m).numel() / batch;
                    if graph.value(m).shape().len() != 2 {
                        graph.reshape(m, &[batch, n])?
                    } else {
                        m
                    }
                }
                None => cur,
            };
            penult.push(feat);
            for (active, p, u, outs) in heads.iter_mut() {
                if !*active {
                    continue;
                }
                let drive = graph.fully_connected(cur, bound.vars[*p], Some(bound.vars[*p + 1]))?;
                let next = match *u {
                    Some(prev) => {
                        let leaked = graph.scale(prev, lif.tau)?;
                        graph.add(leaked, drive)?
                    }
                    None => drive,
                };
                *u = Some(next);
                outs.push(next);
            }
        }

        self.state.layers = carries
            .iter()
            .map(|c| c.map_or_else(|| Tensor::zeros(&[1]), |v| graph.value(v).clone()))
            .collect();
        let [(_, _, us, outs_s), (_, _, ut, outs_t)] = heads;
        self.state.head_s = us.map(|v| graph.value(v).clone());
        self.state.head_t = ut.map(|v| graph.value(v).clone());
        let s_on = matches!(head, Head::Static | Head::Both);
        let t_on = matches!(head, Head::Event | Head::Both);
        Ok(ForwardTrace {
            penult,
            head_s: s_on.then_some(outs_s),
            head_t: t_on.then_some(outs_t),
            membranes,
            spike_counts,
        })
    }

    /// Forward pass on a scratch graph, returning plain values.
    pub fn evaluate_trace(
        &mut self,
        inputs: &[&EncodedInput],
        head: Head,
        record: Record,
    ) -> Result<ValueTrace, SnnError> {
        let mut graph = Graph::new();
        let bound = self.bind(&mut graph);
        let tr = self.forward(&mut graph, &bound, inputs, head, record)?;
        let vals = |vs: &Vec<Var>| vs.iter().map(|&v| graph.value(v).clone()).collect::<Vec<_>>();
        Ok(ValueTrace {
            penult: vals(&tr.penult),
            head_s: tr.head_s.as_ref().map(vals),
            head_t: tr.head_t.as_ref().map(vals),
            membranes: tr.membranes,
            spike_counts: tr.spike_counts,
        })
    }

    pub fn save_checkpoint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_str(&mut out, &self.arch);
        for v in [self.input.channels, self.input.height, self.input.width, self.classes] {
            out.extend_from_slice(&(v as u16).to_le_bytes());
        }
        for v in [self.lif.tau, self.lif.v_th, self.lif.surrogate_width] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            put_str(&mut out, &p.name);
            out.push(p.value.shape().len() as u8);
            for &d in p.value.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load_checkpoint(bytes: &[u8]) -> Result<Self, SnnError> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(SnnError::Checkpoint("bad magic".into()));
        }
        let arch = r.string()?;
        let channels = r.u16()? as usize;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let classes = r.u16()? as usize;
        let lif = LifConfig {
            tau: r.f64()?,
            v_th: r.f64()?,
            surrogate_width: r.f64()?,
            smooth: false,
        };
        let mut net = Network::build(&arch, InputGeom::new(channels, height, width), classes, lif, 0)?;
        let count = r.u32()? as usize;
        if count != net.params.len() {
            return Err(SnnError::Checkpoint(format!(
                "{count} parameters stored, architecture has {}",
                net.params.len()
            )));
        }
        for p in net.params.iter_mut() {
            let name = r.string()?;
            if name != p.name {
                return Err(SnnError::Checkpoint(format!("expected {}, found {name}", p.name)));
            }
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
            if shape != p.value.shape() {
                return Err(SnnError::Checkpoint(format!("{name}: shape {shape:?}")));
            }
            for v in p.value.data_mut() {
                *v = r.f64()?;
            }
        }
        if r.at != bytes.len() {
            return Err(SnnError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        Ok(net)
    }
}

/// Value-only copy of a [`ForwardTrace`].
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTrace {
    pub penult: Vec<Tensor>,
    pub head_s: Option<Vec<Tensor>>,
    pub head_t: Option<Vec<Tensor>>,
    pub membranes: Option<Vec<Vec<Tensor>>>,
    pub spike_counts: Option<Vec<f64>>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u16).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], SnnError> {
        let s = self
            .bytes
            .get(self.at..self.at + n)
            .ok_or_else(|| SnnError::Checkpoint(format!("truncated at byte {}", self.at)))?;
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, SnnError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, SnnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, SnnError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, SnnError> {
        let n = self.u16()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| SnnError::Checkpoint("invalid UTF-8".into()))
    }
}
