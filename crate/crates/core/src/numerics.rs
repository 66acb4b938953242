//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep. Leaf
//! gradients accumulate across backward calls until [`Graph::zero_grad`].

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadLength {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("avg_pool2d: spatial extent {0:?} is not even")]
    OddExtent(Vec<usize>),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("{0}: non-finite value")]
    NonFinite(&'static str),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
}

/// Row-major real tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(TensorError::BadLength {
                op: "tensor",
                len: data.len(),
                shape,
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                expected: self.shape,
                got: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Backward rule for an operation defined outside this module.
///
/// `grad_out` has the output's shape; the returned vector holds one entry per
/// input, `None` where `needs[i]` is false.
pub trait BackwardRule: fmt::Debug {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>>;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, padding: usize },
    AvgPool2 { input: Var },
    Linear { input: Var, weight: Var, bias: Option<Var> },
    Reshape { input: Var },
    Sigmoid { input: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { input: Var, scale: f64 },
    Sum { input: Var },
    Index { input: Var, index: usize },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    MeanSquared { pred: Var, target: Option<Var>, constant: f64 },
    Custom { inputs: Vec<Var>, rule: Box<dyn BackwardRule> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation tape. Confined to one thread of execution.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: a.shape.clone(),
            got: b.shape.clone(),
        });
    }
    Ok(())
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Output column range and matching input column offset for one kernel tap.
#[inline]
fn tap_range(extent_in: usize, extent_out: usize, tap: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(tap);
    let hi = (extent_in + padding).saturating_sub(tap).min(extent_out);
    (lo, hi.max(lo))
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    ho: usize,
    wo: usize,
    pad: usize,
}

/// Adds a patch-matrix gradient back onto one sample's input gradient.
fn col2im(gcol: &[f64], gx: &mut [f64], g: &ConvGeom) {
    let (k, plane) = (g.k, g.ho * g.wo);
    for ci in 0..g.cin {
        let ibase = ci * g.h * g.w;
        for ky in 0..k {
            let (oy_lo, oy_hi) = tap_range(g.h, g.ho, ky, g.pad);
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let (ox_lo, ox_hi) = tap_range(g.w, g.wo, kx, g.pad);
                let ix_lo = ox_lo + kx - g.pad;
                let len = ox_hi - ox_lo;
                for oy in oy_lo..oy_hi {
                    let iy = oy + ky - g.pad;
                    let src = &gcol[r * plane + oy * g.wo + ox_lo..r * plane + oy * g.wo + ox_lo + len];
                    let dst = &mut gx[ibase + iy * g.w + ix_lo..ibase + iy * g.w + ix_lo + len];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
}

/// Kernel reordered to `[cin, k, k, cout]` so that one input tap touches a
/// contiguous run of output channels.
fn kernel_taps_last(kern: &[f64], g: &ConvGeom) -> Vec<f64> {
    let taps = g.cin * g.k * g.k;
    let mut out = vec![0.0; kern.len()];
    for co in 0..g.cout {
        for r in 0..taps {
            out[r * g.cout + co] = kern[co * taps + r];
        }
    }
    out
}

/// Calls `f(r, o)` for every kernel tap `r = (ci·k + ky)·k + kx` that maps
/// input pixel `(ci, iy, ix)` onto output position `o = oy·wo + ox`.
#[inline]
fn for_each_tap(g: &ConvGeom, ci: usize, iy: usize, ix: usize, mut f: impl FnMut(usize, usize)) {
    let k = g.k;
    for ky in 0..k {
        // oy = iy + pad - ky must land inside [0, ho).
        let Some(oy) = (iy + g.pad).checked_sub(ky).filter(|&o| o < g.ho) else {
            continue;
        };
        for kx in 0..k {
            let Some(ox) = (ix + g.pad).checked_sub(kx).filter(|&o| o < g.wo) else {
                continue;
            };
            f((ci * k + ky) * k + kx, oy * g.wo + ox);
        }
    }
}

/// Scatters every non-zero input pixel through the kernel. Cost scales with
/// the number of non-zero inputs, which is small for spike and event maps.
fn conv_forward(x: &[f64], kern: &[f64], g: &ConvGeom) -> Vec<f64> {
    let plane = g.ho * g.wo;
    let sample_in = g.cin * g.h * g.w;
    let kt = kernel_taps_last(kern, g);
    let mut out = vec![0.0; g.batch * g.cout * plane];
    // Accumulated position-major, then transposed to channel-major.
    let mut acc = vec![0.0; plane * g.cout];
    for b in 0..g.batch {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let xb = &x[b * sample_in..(b + 1) * sample_in];
        for ci in 0..g.cin {
            for iy in 0..g.h {
                for ix in 0..g.w {
                    let v = xb[(ci * g.h + iy) * g.w + ix];
                    if v == 0.0 {
                        continue;
                    }
                    for_each_tap(g, ci, iy, ix, |r, o| {
                        axpy(&mut acc[o * g.cout..(o + 1) * g.cout], v, &kt[r * g.cout..(r + 1) * g.cout]);
                    });
                }
            }
        }
        let ob = &mut out[b * g.cout * plane..(b + 1) * g.cout * plane];
        for o in 0..plane {
            for co in 0..g.cout {
                ob[co * plane + o] = acc[o * g.cout + co];
            }
        }
    }
    out
}

fn conv_backward(
    x: &[f64],
    kern: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need_x: bool,
    need_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let plane = g.ho * g.wo;
    let rows = g.cin * g.k * g.k;
    let sample_in = g.cin * g.h * g.w;
    let mut gx = need_x.then(|| vec![0.0; x.len()]);
    // Kernel gradient in `[cin, k, k, cout]` order, reordered at the end.
    let mut gkt = need_k.then(|| vec![0.0; kern.len()]);
    let mut gout_t = vec![0.0; plane * g.cout];
    let mut gcol = vec![0.0; rows * plane];
    for b in 0..g.batch {
        let gouts = &gout[b * g.cout * plane..(b + 1) * g.cout * plane];
        if let Some(gkt) = gkt.as_mut() {
            for o in 0..plane {
                for co in 0..g.cout {
                    gout_t[o * g.cout + co] = gouts[co * plane + o];
                }
            }
            let xb = &x[b * sample_in..(b + 1) * sample_in];
            for ci in 0..g.cin {
                for iy in 0..g.h {
                    for ix in 0..g.w {
                        let v = xb[(ci * g.h + iy) * g.w + ix];
                        if v == 0.0 {
                            continue;
                        }
                        for_each_tap(g, ci, iy, ix, |r, o| {
                            axpy(
                                &mut gkt[r * g.cout..(r + 1) * g.cout],
                                v,
                                &gout_t[o * g.cout..(o + 1) * g.cout],
                            );
                        });
                    }
                }
            }
        }
        if let Some(gx) = gx.as_mut() {
            gcol.iter_mut().for_each(|v| *v = 0.0);
            for co in 0..g.cout {
                let go = &gouts[co * plane..(co + 1) * plane];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for r in 0..rows {
                    axpy(&mut gcol[r * plane..(r + 1) * plane], kern[co * rows + r], go);
                }
            }
            col2im(&gcol, &mut gx[b * sample_in..(b + 1) * sample_in], g);
        }
    }
    let gk = gkt.map(|t| {
        let taps = rows;
        let mut gk = vec![0.0; t.len()];
        for co in 0..g.cout {
            for r in 0..taps {
                gk[co * taps + r] = t[r * g.cout + co];
            }
        }
        gk
    });
    (gx, gk)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        requires_grad: bool,
    ) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input; its gradient is readable after [`Graph::backward`].
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Operation defined elsewhere: the caller computes `value` and supplies
    /// the backward rule.
    pub fn custom(
        &mut self,
        name: &'static str,
        inputs: &[Var],
        value: Tensor,
        rule: Box<dyn BackwardRule>,
    ) -> Result<Var, TensorError> {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push_checked(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            rg,
        )
    }

    /// Stride-1 cross-correlation of `[B, Cin, H, W]` with `[Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, padding: usize) -> Result<Var, TensorError> {
        let (xs, ks) = (self.value(input).shape(), self.value(kernel).shape());
        if xs.len() != 4 || ks.len() != 4 || ks[1] != xs[1] || ks[2] != ks[3] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                expected: xs.to_vec(),
                got: ks.to_vec(),
            });
        }
        let (ho, wo) = (
            (xs[2] + 2 * padding).checked_sub(ks[2] - 1),
            (xs[3] + 2 * padding).checked_sub(ks[3] - 1),
        );
        let (ho, wo) = match (ho, wo) {
            (Some(h), Some(w)) if h >= 1 && w >= 1 => (h, w),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    expected: xs.to_vec(),
                    got: ks.to_vec(),
                })
            }
        };
        let geom = ConvGeom {
            batch: xs[0],
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ks[0],
            k: ks[2],
            ho,
            wo,
            pad: padding,
        };
        let data = conv_forward(self.value(input).data(), self.value(kernel).data(), &geom);
        let value = Tensor {
            shape: vec![geom.batch, geom.cout, ho, wo],
            data,
        };
        let rg = self.rg(input) || self.rg(kernel);
        self.push_checked(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                kernel,
                padding,
            },
            rg,
        )
    }

    /// Non-overlapping 2x2 mean pooling.
    pub fn avg_pool2d(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let s = x.shape();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(TensorError::OddExtent(s.to_vec()));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0; planes * ho * wo];
        let xd = x.data();
        for p in 0..planes {
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = p * h * w + 2 * oy * w + 2 * ox;
                    out[(p * ho + oy) * wo + ox] =
                        0.25 * (xd[i] + xd[i + 1] + xd[i + w] + xd[i + w + 1]);
                }
            }
        }
        let value = Tensor {
            shape: vec![s[0], s[1], ho, wo],
            data: out,
        };
        let rg = self.rg(input);
        self.push_checked("avg_pool2d", value, Op::AvgPool2 { input }, rg)
    }

    /// `input [B, D] x weight [D, M] + bias [M]`.
    pub fn fully_connected(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
    ) -> Result<Var, TensorError> {
        let (xs, ws) = (self.value(input).shape(), self.value(weight).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(TensorError::ShapeMismatch {
                op: "fully_connected",
                expected: xs.to_vec(),
                got: ws.to_vec(),
            });
        }
        let (b, d, m) = (xs[0], xs[1], ws[1]);
        if let Some(bv) = bias {
            if self.value(bv).shape() != [m] {
                return Err(TensorError::ShapeMismatch {
                    op: "fully_connected",
                    expected: vec![m],
                    got: self.value(bv).shape().to_vec(),
                });
            }
        }
        let mut out = vec![0.0; b * m];
        {
            let x = self.value(input).data();
            let w = self.value(weight).data();
            for bi in 0..b {
                let orow = &mut out[bi * m..(bi + 1) * m];
                if let Some(bv) = bias {
                    orow.copy_from_slice(self.nodes[bv.0].value.data());
                }
                for di in 0..d {
                    let xv = x[bi * d + di];
                    if xv != 0.0 {
                        axpy(orow, xv, &w[di * m..(di + 1) * m]);
                    }
                }
            }
        }
        let rg = self.rg(input) || self.rg(weight) || bias.is_some_and(|v| self.rg(v));
        self.push_checked(
            "fully_connected",
            Tensor {
                shape: vec![b, m],
                data: out,
            },
            Op::Linear {
                input,
                weight,
                bias,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let value = self.value(input).clone().reshape(shape)?;
        let rg = self.rg(input);
        Ok(self.push(value, Op::Reshape { input }, rg))
    }

    pub fn sigmoid(&mut self, input: Var) -> Result<Var, TensorError> {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| sigmoid(v)).collect(),
        };
        let rg = self.rg(input);
        self.push_checked("sigmoid", value, Op::Sigmoid { input }, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (x, y) = (self.value(a), self.value(b));
        same_shape(name, x, y)?;
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        };
        let rg = self.rg(a) || self.rg(b);
        self.push_checked(name, value, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, input: Var, factor: f64) -> Result<Var, TensorError> {
        self.affine(input, factor, 0.0)
    }

    /// `factor * x + shift`, elementwise.
    pub fn affine(&mut self, input: Var, factor: f64, shift: f64) -> Result<Var, TensorError> {
        let x = self.value(input);
        let value = Tensor {
            shape: x.shape.clone(),
            data: x.data.iter().map(|&v| factor * v + shift).collect(),
        };
        let rg = self.rg(input);
        self.push_checked(
            "affine",
            value,
            Op::Affine {
                input,
                scale: factor,
            },
            rg,
        )
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, input: Var) -> Result<Var, TensorError> {
        let s = self.value(input).data.iter().sum();
        let rg = self.rg(input);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var, TensorError> {
        let n = self.value(input).numel() as f64;
        let s = self.sum(input)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum of several one-element tensors.
    pub fn add_all(&mut self, vars: &[Var]) -> Result<Var, TensorError> {
        let (&first, rest) = vars.split_first().ok_or(TensorError::NotScalar(vec![]))?;
        rest.iter().try_fold(first, |acc, &v| self.add(acc, v))
    }

    /// One entry of a tensor, as a one-element tensor.
    pub fn index(&mut self, input: Var, index: usize) -> Result<Var, TensorError> {
        let x = self.value(input);
        let v = *x.data.get(index).ok_or(TensorError::ShapeMismatch {
            op: "index",
            expected: x.shape.clone(),
            got: vec![index],
        })?;
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(v), Op::Index { input, index }, rg))
    }

    /// Batch mean of `-log softmax(logits)[label]` for `logits [B, K]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let x = self.value(logits);
        let s = x.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                expected: vec![labels.len(), s.last().copied().unwrap_or(0)],
                got: s.to_vec(),
            });
        }
        let (b, k) = (s[0], s[1]);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::LabelOutOfRange { label, classes: k });
        }
        let mut probs = vec![0.0; b * k];
        let mut loss = 0.0;
        for bi in 0..b {
            let row = &x.data[bi * k..(bi + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for ki in 0..k {
                probs[bi * k + ki] = (row[ki] - max).exp() / z;
            }
            loss += z.ln() + max - row[labels[bi]];
        }
        let rg = self.rg(logits);
        self.push_checked(
            "softmax_cross_entropy",
            Tensor::scalar(loss / b as f64),
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Mean of squared differences between two equal-shape tensors.
    pub fn mean_squared(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        let (p, t) = (self.value(pred), self.value(target));
        same_shape("mean_squared", p, t)?;
        let v = p.data.iter().zip(&t.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / p.numel() as f64;
        let rg = self.rg(pred) || self.rg(target);
        self.push_checked(
            "mean_squared",
            Tensor::scalar(v),
            Op::MeanSquared {
                pred,
                target: Some(target),
                constant: 0.0,
            },
            rg,
        )
    }

    /// Mean of squared differences from a constant target.
    pub fn mean_squared_to(&mut self, pred: Var, target: f64) -> Result<Var, TensorError> {
        let p = self.value(pred);
        let v = p.data.iter().map(|a| (a - target).powi(2)).sum::<f64>() / p.numel() as f64;
        let rg = self.rg(pred);
        self.push_checked(
            "mean_squared",
            Tensor::scalar(v),
            Op::MeanSquared {
                pred,
                target: None,
                constant: target,
            },
            rg,
        )
    }

    /// Reverse sweep from a one-element `loss`, adding into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let ls = self.value(loss).shape();
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(ls.to_vec()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let need = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            let mut send = |v: Var, gv: Vec<f64>| accumulate(&mut grads[v.0], gv);
            match &node.op {
                Op::Leaf => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(TensorError::NonFinite("backward"));
                    }
                    accumulate(&mut self.leaf_grads[i], g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    padding,
                } => {
                    let (xs, ks) = (val(*input).shape(), val(*kernel).shape());
                    let geom = ConvGeom {
                        batch: xs[0],
                        cin: xs[1],
                        h: xs[2],
                        w: xs[3],
                        cout: ks[0],
                        k: ks[2],
                        ho: node.value.shape[2],
                        wo: node.value.shape[3],
                        pad: *padding,
                    };
                    let (gx, gk) = conv_backward(
                        val(*input).data(),
                        val(*kernel).data(),
                        &g,
                        &geom,
                        need(*input),
                        need(*kernel),
                    );
                    if let Some(gx) = gx {
                        send(*input, gx);
                    }
                    if let Some(gk) = gk {
                        send(*kernel, gk);
                    }
                }
                Op::AvgPool2 { input } => {
                    let s = val(*input).shape();
                    let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                    let (ho, wo) = (h / 2, w / 2);
                    let mut gx = vec![0.0; planes * h * w];
                    for p in 0..planes {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let q = 0.25 * g[(p * ho + oy) * wo + ox];
                                let i = p * h * w + 2 * oy * w + 2 * ox;
                                gx[i] += q;
                                gx[i + 1] += q;
                                gx[i + w] += q;
                                gx[i + w + 1] += q;
                            }
                        }
                    }
                    send(*input, gx);
                }
                Op::Linear {
                    input,
                    weight,
                    bias,
                } => {
                    let (x, w) = (val(*input), val(*weight));
                    let (b, d, m) = (x.shape[0], x.shape[1], w.shape[1]);
                    if need(*input) {
                        let mut gx = vec![0.0; b * d];
                        for bi in 0..b {
                            let grow = &g[bi * m..(bi + 1) * m];
                            for di in 0..d {
                                gx[bi * d + di] = dot(&w.data[di * m..(di + 1) * m], grow);
                            }
                        }
                        send(*input, gx);
                    }
                    if need(*weight) {
                        let mut gw = vec![0.0; d * m];
                        for bi in 0..b {
                            let grow = &g[bi * m..(bi + 1) * m];
                            for di in 0..d {
                                let xv = x.data[bi * d + di];
                                if xv != 0.0 {
                                    axpy(&mut gw[di * m..(di + 1) * m], xv, grow);
                                }
                            }
                        }
                        send(*weight, gw);
                    }
                    if let Some(bv) = bias.filter(|&bv| need(bv)) {
                        let mut gb = vec![0.0; m];
                        for bi in 0..b {
                            axpy(&mut gb, 1.0, &g[bi * m..(bi + 1) * m]);
                        }
                        send(bv, gb);
                    }
                }
                Op::Reshape { input } => send(*input, g),
                Op::Sigmoid { input } => {
                    let gx = g
                        .iter()
                        .zip(&node.value.data)
                        .map(|(gi, s)| gi * s * (1.0 - s))
                        .collect();
                    send(*input, gx);
                }
                Op::Add(a, b) => {
                    if need(*b) {
                        send(*b, g.clone());
                    }
                    if need(*a) {
                        send(*a, g);
                    }
                }
                Op::Sub(a, b) => {
                    if need(*b) {
                        send(*b, g.iter().map(|v| -v).collect());
                    }
                    if need(*a) {
                        send(*a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if need(*a) {
                        let ga = g.iter().zip(&val(*b).data).map(|(x, y)| x * y).collect();
                        send(*a, ga);
                    }
                    if need(*b) {
                        let gb = g.iter().zip(&val(*a).data).map(|(x, y)| x * y).collect();
                        send(*b, gb);
                    }
                }
                Op::Affine { input, scale } => {
                    send(*input, g.iter().map(|v| v * scale).collect());
                }
                Op::Sum { input } => {
                    send(*input, vec![g[0]; val(*input).numel()]);
                }
                Op::Index { input, index } => {
                    let mut gx = vec![0.0; val(*input).numel()];
                    gx[*index] = g[0];
                    send(*input, gx);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let b = labels.len();
                    let k = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (bi, &l) in labels.iter().enumerate() {
                        gx[bi * k + l] -= scale;
                    }
                    send(*logits, gx);
                }
                Op::MeanSquared {
                    pred,
                    target,
                    constant,
                } => {
                    let p = val(*pred);
                    let n = p.numel() as f64;
                    let diff: Vec<f64> = match target {
                        Some(t) => p.data.iter().zip(&val(*t).data).map(|(a, b)| a - b).collect(),
                        None => p.data.iter().map(|a| a - constant).collect(),
                    };
                    let c = 2.0 * g[0] / n;
                    if let Some(t) = target.filter(|&t| need(t)) {
                        send(t, diff.iter().map(|d| -c * d).collect());
                    }
                    if need(*pred) {
                        send(*pred, diff.iter().map(|d| c * d).collect());
                    }
                }
                Op::Custom { inputs, rule } => {
                    let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                    let needs: Vec<bool> = inputs.iter().map(|&v| need(v)).collect();
                    let gs = rule.backward(&ins, &node.value, &g, &needs);
                    for (&v, gv) in inputs.iter().zip(gs) {
                        if let Some(gv) = gv {
                            send(v, gv);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Tensor
where
    F: FnMut(&Tensor) -> f64,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.numel() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let fp = f(&probe);
        probe.data[i] = orig - h;
        let fm = f(&probe);
        probe.data[i] = orig;
        grad.data[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Text form used in every CSV artifact: 17 significant digits, which
/// round-trips any `f64` exactly.
pub fn format_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "relative_error: length mismatch");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}
