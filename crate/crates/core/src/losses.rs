//! Training objectives.
//!
//! The kernel-similarity measures come in two flavours: plain functions on
//! tensors (used by diagnostics) and graph ops with hand-written backward
//! rules (used during training). All similarity measures use the linear
//! kernel `K = X Xᵀ`.

use thiserror::Error;

use crate::numerics::{sigmoid, BackwardRule, Graph, Tensor, TensorError, Var};

/// Self-HSIC at or below this value means the features are constant over
/// the batch and CKA is undefined.
pub const DEGENERATE_EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("batch of {0} samples; kernel statistics need at least 2")]
    DegenerateBatch(usize),
    #[error("constant features: self-HSIC {0:e} is not above {DEGENERATE_EPS:e}")]
    DegenerateFeatures(f64),
    #[error("{op}: shape mismatch, expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Per-step mixing logits. `sigmoid(eta[t])` weights the alignment term at
/// step `t` and `1 - sigmoid(eta[t])` the event classification term.
#[derive(Debug, Clone, PartialEq)]
pub struct EtaParams {
    pub eta: Tensor,
}

impl EtaParams {
    /// Zero logits, i.e. equal weighting at every step.
    pub fn new(timesteps: usize) -> Self {
        EtaParams {
            eta: Tensor::zeros(&[timesteps]),
        }
    }

    pub fn len(&self) -> usize {
        self.eta.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.numel() == 0
    }

    pub fn weights(&self) -> Vec<f64> {
        self.eta.data().iter().map(|&e| sigmoid(e)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_cls_s: f64,
    pub lambda_kt: f64,
    pub tet_lambda: f64,
    pub tet_phi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_cls_s: 1.0,
            lambda_kt: 0.5,
            tet_lambda: 0.05,
            tet_phi: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: String| Err(LossError::InvalidWeights(m));
        if !(self.lambda_cls_s >= 0.0) || !(self.lambda_kt >= 0.0) {
            return bad(format!("negative weight ({}, {})", self.lambda_cls_s, self.lambda_kt));
        }
        if !(0.0..=1.0).contains(&self.tet_lambda) {
            return bad(format!("tet_lambda {} not in [0, 1]", self.tet_lambda));
        }
        if !self.tet_phi.is_finite() {
            return bad("tet_phi not finite".into());
        }
        Ok(())
    }
}

/// Which similarity drives the alignment part of the transfer loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMetric {
    Cka,
    Mmd,
}

fn matrix_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize), LossError> {
    match *x.shape() {
        [b, d] => Ok((b, d)),
        _ => Err(LossError::ShapeMismatch {
            op,
            expected: vec![0, 0],
            got: x.shape().to_vec(),
        }),
    }
}

fn square_dims(op: &'static str, k: &Tensor, l: &Tensor) -> Result<usize, LossError> {
    let n = match *k.shape() {
        [a, b] if a == b => a,
        _ => {
            return Err(LossError::ShapeMismatch {
                op,
                expected: vec![k.shape()[0], k.shape()[0]],
                got: k.shape().to_vec(),
            })
        }
    };
    if l.shape() != k.shape() {
        return Err(LossError::ShapeMismatch {
            op,
            expected: k.shape().to_vec(),
            got: l.shape().to_vec(),
        });
    }
    if n < 2 {
        return Err(LossError::DegenerateBatch(n));
    }
    Ok(n)
}

/// `X Xᵀ` for `X [B, D]`.
pub fn gram(x: &Tensor) -> Result<Tensor, LossError> {
    let (b, d) = matrix_dims("gram_linear", x)?;
    if b < 2 {
        return Err(LossError::DegenerateBatch(b));
    }
    let xs = x.data();
    let mut k = vec![0.0; b * b];
    for i in 0..b {
        for j in i..b {
            let v: f64 = (0..d).map(|c| xs[i * d + c] * xs[j * d + c]).sum();
            k[i * b + j] = v;
            k[j * b + i] = v;
        }
    }
    Ok(Tensor::new(vec![b, b], k)?)
}

/// `J K J` with `J = I - 11ᵀ/n`.
fn center(k: &[f64], n: usize) -> Vec<f64> {
    let row: Vec<f64> = (0..n).map(|i| k[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let col: Vec<f64> = (0..n).map(|j| (0..n).map(|i| k[i * n + j]).sum::<f64>() / n as f64).collect();
    let all = row.iter().sum::<f64>() / n as f64;
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = k[i * n + j] - row[i] - col[j] + all;
        }
    }
    out
}

fn transpose(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = m[i * n + j];
        }
    }
    out
}

/// `tr(Kc Lᵀ) = tr(J K J L)` for centered `Kc`, divided by `(n-1)²`.
fn hsic_centered(kc: &[f64], l: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += kc[i * n + j] * l[j * n + i];
        }
    }
    s / ((n - 1) * (n - 1)) as f64
}

/// Biased HSIC estimate `tr(K J L J) / (n-1)²`.
pub fn hsic(k: &Tensor, l: &Tensor) -> Result<f64, LossError> {
    let n = square_dims("hsic", k, l)?;
    Ok(hsic_symmetric(&center(k.data(), n), k, &center(l.data(), n), l, n))
}

/// `tr(Kc L)` and `tr(Lc K)` agree in exact arithmetic. Averaging them makes
/// the result bitwise independent of argument order.
fn hsic_symmetric(kc: &[f64], k: &Tensor, lc: &[f64], l: &Tensor, n: usize) -> f64 {
    0.5 * (hsic_centered(kc, l.data(), n) + hsic_centered(lc, k.data(), n))
}

struct CkaParts {
    n: usize,
    kc: Vec<f64>,
    lc: Vec<f64>,
    h_kk: f64,
    h_ll: f64,
    value: f64,
}

fn cka_parts(k: &Tensor, l: &Tensor) -> Result<CkaParts, LossError> {
    let n = square_dims("cka", k, l)?;
    let kc = center(k.data(), n);
    let lc = center(l.data(), n);
    let h_kk = hsic_centered(&kc, k.data(), n);
    let h_ll = hsic_centered(&lc, l.data(), n);
    for h in [h_kk, h_ll] {
        if !(h > DEGENERATE_EPS) {
            return Err(LossError::DegenerateFeatures(h));
        }
    }
    let h_kl = hsic_symmetric(&kc, k, &lc, l, n);
    // The ratio is a cosine between centered kernels, so it lies in [-1, 1]
    // (and in [0, 1] for Gram inputs). Cancellation in nearly constant
    // batches can overshoot the bound by a few ulps of the self-HSIC.
    let value = (h_kl / (h_kk * h_ll).sqrt()).clamp(-1.0, 1.0);
    Ok(CkaParts {
        n,
        kc,
        lc,
        h_kk,
        h_ll,
        value,
    })
}

/// Normalised HSIC between two kernel matrices.
pub fn cka(k: &Tensor, l: &Tensor) -> Result<f64, LossError> {
    Ok(cka_parts(k, l)?.value)
}

/// CKA between two feature sets over the same batch.
pub fn feature_cka(x: &Tensor, y: &Tensor) -> Result<f64, LossError> {
    cka(&gram(x)?, &gram(y)?)
}

/// Squared distance between the batch means of `X` and `Y`.
pub fn mmd_linear(x: &Tensor, y: &Tensor) -> Result<f64, LossError> {
    let (b, d) = matrix_dims("mmd_linear", x)?;
    if y.shape() != x.shape() {
        return Err(LossError::ShapeMismatch {
            op: "mmd_linear",
            expected: x.shape().to_vec(),
            got: y.shape().to_vec(),
        });
    }
    let diff = mean_diff(x.data(), y.data(), b, d);
    Ok(diff.iter().map(|v| v * v).sum())
}

fn mean_diff(x: &[f64], y: &[f64], b: usize, d: usize) -> Vec<f64> {
    let mut m = vec![0.0; d];
    for i in 0..b {
        for c in 0..d {
            m[c] += (x[i * d + c] - y[i * d + c]) / b as f64;
        }
    }
    m
}

#[derive(Debug)]
struct GramRule;

impl BackwardRule for GramRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (b, d) = (x.shape()[0], x.shape()[1]);
        let xs = x.data();
        // dX = (G + Gᵀ) X
        let mut gx = vec![0.0; b * d];
        for i in 0..b {
            for j in 0..b {
                let w = g[i * b + j] + g[j * b + i];
                if w != 0.0 {
                    for c in 0..d {
                        gx[i * d + c] += w * xs[j * d + c];
                    }
                }
            }
        }
        vec![Some(gx)]
    }
}

#[derive(Debug)]
struct HsicRule;

impl BackwardRule for HsicRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = inputs[0].shape()[0];
        let f = g[0] / ((n - 1) * (n - 1)) as f64;
        let grad = |other: &Tensor| {
            transpose(&center(other.data(), n), n).into_iter().map(|v| v * f).collect()
        };
        vec![needs[0].then(|| grad(inputs[1])), needs[1].then(|| grad(inputs[0]))]
    }
}

#[derive(Debug)]
struct CkaRule {
    n: usize,
    kc: Vec<f64>,
    lc: Vec<f64>,
    h_kk: f64,
    h_ll: f64,
    value: f64,
}

impl BackwardRule for CkaRule {
    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = self.n;
        let m = ((n - 1) * (n - 1)) as f64;
        let s = (self.h_kk * self.h_ll).sqrt();
        // d/dK = [ (J L J)ᵀ / s - cka (J K J)ᵀ / h_kk ] / (n-1)²
        let grad = |cross: &[f64], own: &[f64], h_own: f64| {
            let (ct, ot) = (transpose(cross, n), transpose(own, n));
            ct.iter()
                .zip(&ot)
                .map(|(c, o)| g[0] * (c / s - self.value * o / h_own) / m)
                .collect()
        };
        vec![
            needs[0].then(|| grad(&self.lc, &self.kc, self.h_kk)),
            needs[1].then(|| grad(&self.kc, &self.lc, self.h_ll)),
        ]
    }
}

#[derive(Debug)]
struct MmdRule;

impl BackwardRule for MmdRule {
    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (b, d) = (inputs[0].shape()[0], inputs[0].shape()[1]);
        let diff = mean_diff(inputs[0].data(), inputs[1].data(), b, d);
        let grad = |sign: f64| {
            (0..b * d)
                .map(|i| sign * g[0] * 2.0 * diff[i % d] / b as f64)
                .collect()
        };
        vec![needs[0].then(|| grad(1.0)), needs[1].then(|| grad(-1.0))]
    }
}

pub fn gram_linear(graph: &mut Graph, x: Var) -> Result<Var, LossError> {
    let value = gram(graph.value(x))?;
    Ok(graph.custom("gram_linear", &[x], value, Box::new(GramRule))?)
}

pub fn hsic_op(graph: &mut Graph, k: Var, l: Var) -> Result<Var, LossError> {
    let v = hsic(graph.value(k), graph.value(l))?;
    Ok(graph.custom("hsic", &[k, l], Tensor::scalar(v), Box::new(HsicRule))?)
}

pub fn cka_op(graph: &mut Graph, k: Var, l: Var) -> Result<Var, LossError> {
    let p = cka_parts(graph.value(k), graph.value(l))?;
    let value = Tensor::scalar(p.value);
    let rule = CkaRule {
        n: p.n,
        kc: p.kc,
        lc: p.lc,
        h_kk: p.h_kk,
        h_ll: p.h_ll,
        value: p.value,
    };
    Ok(graph.custom("cka", &[k, l], value, Box::new(rule))?)
}

pub fn mmd_op(graph: &mut Graph, x: Var, y: Var) -> Result<Var, LossError> {
    let v = mmd_linear(graph.value(x), graph.value(y))?;
    Ok(graph.custom("mmd_linear", &[x, y], Tensor::scalar(v), Box::new(MmdRule))?)
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<(), LossError> {
    if a != b || a == 0 {
        return Err(LossError::ShapeMismatch {
            op,
            expected: vec![a],
            got: vec![b],
        });
    }
    Ok(())
}

/// `(1 - λ) CE + λ MSE(out, φ)` at one step.
pub fn per_step_cls_loss(
    graph: &mut Graph,
    head_out: Var,
    labels: &[usize],
    w: &LossWeights,
) -> Result<Var, LossError> {
    let ce = graph.softmax_cross_entropy(head_out, labels)?;
    let mse = graph.mean_squared_to(head_out, w.tet_phi)?;
    let ce = graph.scale(ce, 1.0 - w.tet_lambda)?;
    let mse = graph.scale(mse, w.tet_lambda)?;
    Ok(graph.add(ce, mse)?)
}

/// Step-averaged [`per_step_cls_loss`].
pub fn tet_loss(graph: &mut Graph, head_out: &[Var], labels: &[usize], w: &LossWeights) -> Result<Var, LossError> {
    same_len("tet_loss", head_out.len(), head_out.len())?;
    let terms = head_out
        .iter()
        .map(|&h| per_step_cls_loss(graph, h, labels, w))
        .collect::<Result<Vec<_>, _>>()?;
    let s = graph.add_all(&terms)?;
    Ok(graph.scale(s, 1.0 / head_out.len() as f64)?)
}

fn step_cka(graph: &mut Graph, xs: Var, xt: Var) -> Result<Var, LossError> {
    let k = gram_linear(graph, xs)?;
    let l = gram_linear(graph, xt)?;
    cka_op(graph, k, l)
}

/// `1 - mean_t CKA(Xs[t], Xt[t])`.
pub fn domain_alignment_loss(graph: &mut Graph, penult_s: &[Var], penult_t: &[Var]) -> Result<Var, LossError> {
    same_len("domain_alignment_loss", penult_s.len(), penult_t.len())?;
    let terms = penult_s
        .iter()
        .zip(penult_t)
        .map(|(&a, &b)| step_cka(graph, a, b))
        .collect::<Result<Vec<_>, _>>()?;
    let s = graph.add_all(&terms)?;
    Ok(graph.affine(s, -1.0 / terms.len() as f64, 1.0)?)
}

/// `1 - mean_t σ(η_t) CKA_t + mean_t (1 - σ(η_t)) ℓ_t`, where `ℓ_t` is the
/// per-step classification loss of the event head.
pub fn knowledge_transfer_loss(
    graph: &mut Graph,
    penult_s: &[Var],
    penult_t: &[Var],
    event_head_out: &[Var],
    labels: &[usize],
    eta: Var,
    w: &LossWeights,
) -> Result<Var, LossError> {
    transfer_loss(graph, penult_s, penult_t, event_head_out, labels, eta, w, AlignMetric::Cka)
}

/// [`knowledge_transfer_loss`] with a choice of alignment metric. With
/// [`AlignMetric::Mmd`] the alignment term is the distance itself,
/// `mean_t σ(η_t) MMD_t`, which is minimised rather than maximised.
#[allow(clippy::too_many_arguments)]
pub fn transfer_loss(
    graph: &mut Graph,
    penult_s: &[Var],
    penult_t: &[Var],
    event_head_out: &[Var],
    labels: &[usize],
    eta: Var,
    w: &LossWeights,
    metric: AlignMetric,
) -> Result<Var, LossError> {
    let t = penult_s.len();
    same_len("knowledge_transfer_loss", t, penult_t.len())?;
    same_len("knowledge_transfer_loss", t, event_head_out.len())?;
    same_len("knowledge_transfer_loss", t, graph.value(eta).numel())?;
    let sig = graph.sigmoid(eta)?;
    let gate = graph.affine(sig, -1.0, 1.0)?;
    let mut align = Vec::with_capacity(t);
    let mut cls = Vec::with_capacity(t);
    for step in 0..t {
        let a = match metric {
            AlignMetric::Cka => step_cka(graph, penult_s[step], penult_t[step])?,
            AlignMetric::Mmd => mmd_op(graph, penult_s[step], penult_t[step])?,
        };
        let s = graph.index(sig, step)?;
        align.push(graph.mul(s, a)?);
        let l = per_step_cls_loss(graph, event_head_out[step], labels, w)?;
        let r = graph.index(gate, step)?;
        cls.push(graph.mul(r, l)?);
    }
    let inv = 1.0 / t as f64;
    let a = graph.add_all(&align)?;
    let a = match metric {
        AlignMetric::Cka => graph.affine(a, -inv, 1.0)?,
        AlignMetric::Mmd => graph.scale(a, inv)?,
    };
    let c = graph.add_all(&cls)?;
    let c = graph.scale(c, inv)?;
    Ok(graph.add(a, c)?)
}

/// `λ_cls_s · cls_s + λ_kt · kt`, the second term only when `kt` is given.
pub fn total_loss(graph: &mut Graph, cls_s: Var, kt: Option<Var>, w: &LossWeights) -> Result<Var, LossError> {
    let base = graph.scale(cls_s, w.lambda_cls_s)?;
    match kt {
        Some(kt) => {
            let k = graph.scale(kt, w.lambda_kt)?;
            Ok(graph.add(base, k)?)
        }
        None => Ok(base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn mat(n: usize, m: usize, v: &[f64]) -> Tensor {
        Tensor::new(vec![n, m], v.to_vec()).unwrap()
    }

    /// Σᵢⱼ K̃ᵢⱼ L̃ᵢⱼ / (n-1)² with explicit centering sums.
    fn naive_hsic(k: &Tensor, l: &Tensor) -> f64 {
        let n = k.shape()[0];
        let c = |m: &Tensor, i: usize, j: usize| {
            let d = m.data();
            let mut v = d[i * n + j];
            for a in 0..n {
                v -= d[a * n + j] / n as f64 + d[i * n + a] / n as f64;
            }
            for a in 0..n {
                for b in 0..n {
                    v += d[a * n + b] / (n * n) as f64;
                }
            }
            v
        };
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                s += c(k, i, j) * c(l, i, j);
            }
        }
        s / ((n - 1) * (n - 1)) as f64
    }

    fn random_orthogonal(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        // Gram-Schmidt on random columns.
        let mut q: Vec<Vec<f64>> = Vec::new();
        while q.len() < d {
            let mut v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for u in &q {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            if norm > 1e-6 {
                q.push(v.into_iter().map(|a| a / norm).collect());
            }
        }
        q.concat()
    }

    fn rotate(x: &Tensor, q: &[f64], c: f64) -> Tensor {
        let (b, d) = (x.shape()[0], x.shape()[1]);
        Tensor::from_fn(&[b, d], |idx| {
            let (i, j) = (idx / d, idx % d);
            c * (0..d).map(|k| x.data()[i * d + k] * q[k * d + j]).sum::<f64>()
        })
    }

    #[test]
    fn gram_cases() {
        assert_eq!(gram(&mat(2, 2, &[1.0, 0.0, 0.0, 1.0])).unwrap().data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(gram(&mat(2, 2, &[1.0, 0.0, 1.0, 0.0])).unwrap().data(), &[1.0; 4]);
        assert_eq!(gram(&mat(1, 3, &[1.0, 2.0, 3.0])), Err(LossError::DegenerateBatch(1)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, &[6, 4]);
        let k = gram(&x).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let mut s = 0.0;
                for d in 0..4 {
                    s += x.data()[i * 4 + d] * x.data()[j * 4 + d];
                }
                assert!((k.data()[i * 6 + j] - s).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn hsic_cases() {
        let i2 = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!((hsic(&i2, &i2).unwrap() - 1.0).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ones = Tensor::full(&[5, 5], 1.0);
        for _ in 0..20 {
            let a = rand_tensor(&mut rng, &[5, 5]);
            let b = rand_tensor(&mut rng, &[5, 5]);
            let sym = |m: &Tensor| Tensor::from_fn(&[5, 5], |i| m.data()[i] + m.data()[(i % 5) * 5 + i / 5]);
            let (k, l) = (sym(&a), sym(&b));
            assert!((hsic(&k, &l).unwrap() - naive_hsic(&k, &l)).abs() < 1e-10);
            assert!(hsic(&k, &ones).unwrap().abs() < 1e-12);
        }
        assert!(matches!(hsic(&i2, &Tensor::zeros(&[3, 3])), Err(LossError::ShapeMismatch { .. })));
    }

    #[test]
    fn cka_invariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let x = rand_tensor(&mut rng, &[10, 5]);
            let q = random_orthogonal(&mut rng, 5);
            let c = rng.gen_range(0.2..3.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let y = rotate(&x, &q, c);
            assert!((feature_cka(&x, &y).unwrap() - 1.0).abs() < 1e-8);
            let k = gram(&x).unwrap();
            assert!((cka(&k, &k).unwrap() - 1.0).abs() < 1e-12);
            let z = rand_tensor(&mut rng, &[10, 3]);
            let l = gram(&z).unwrap();
            assert!((cka(&k, &l).unwrap() - cka(&l, &k).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn cka_range_over_random_trials() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut valid = 0;
        while valid < 10_000 {
            let b = rng.gen_range(2..9);
            let (dx, dy) = (rng.gen_range(1..5), rng.gen_range(1..5));
            let x = rand_tensor(&mut rng, &[b, dx]);
            let y = rand_tensor(&mut rng, &[b, dy]);
            // Near-coincident pairs at b = 2 can fall under the constant threshold.
            let Ok(v) = feature_cka(&x, &y) else { continue };
            assert!((-1e-12..=1.0 + 1e-12).contains(&v), "{v}");
            valid += 1;
        }
        let x = rand_tensor(&mut rng, &[64, 8]);
        let y = rand_tensor(&mut rng, &[64, 8]);
        let v = feature_cka(&x, &y).unwrap();
        assert!(v > 0.0 && v < 1.0);
    }

    #[test]
    fn degenerate_features_rejected() {
        let constant = Tensor::full(&[4, 3], 0.7);
        let x = Tensor::from_fn(&[4, 3], |i| i as f64);
        assert!(matches!(feature_cka(&constant, &x), Err(LossError::DegenerateFeatures(_))));
        assert!(matches!(feature_cka(&x, &constant), Err(LossError::DegenerateFeatures(_))));
    }

    #[test]
    fn mmd_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[6, 3]);
        assert_eq!(mmd_linear(&x, &x).unwrap(), 0.0);
        let shifted = Tensor::from_fn(&[6, 3], |i| x.data()[i] + if i % 3 == 1 { 1.0 } else { 0.0 });
        assert!((mmd_linear(&shifted, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = rand_tensor(&mut rng, &[6, 3]);
        // Kernel double-sum expansion: mean k(x,x') + mean k(y,y') - 2 mean k(x,y).
        let dot = |a: &Tensor, i: usize, b: &Tensor, j: usize| {
            (0..3).map(|d| a.data()[i * 3 + d] * b.data()[j * 3 + d]).sum::<f64>()
        };
        let mut s = 0.0;
        for i in 0..6 {
            for j in 0..6 {
                s += dot(&x, i, &x, j) + dot(&y, i, &y, j) - 2.0 * dot(&x, i, &y, j);
            }
        }
        assert!((mmd_linear(&x, &y).unwrap() - s / 36.0).abs() < 1e-10);
        assert!(matches!(
            mmd_linear(&x, &Tensor::zeros(&[5, 3])),
            Err(LossError::ShapeMismatch { .. })
        ));
    }

    fn check_grad(x0: &Tensor, f: impl Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let l = f(&mut g, x);
        g.backward(l).unwrap();
        let fd = finite_difference_gradient(
            |p| {
                let mut g = Graph::new();
                let x = g.constant(p.clone());
                let l = f(&mut g, x);
                g.value(l).item()
            },
            x0,
            1e-6,
        );
        let err = relative_error(g.grad(x).unwrap(), fd.data());
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn kernel_op_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let y0 = rand_tensor(&mut rng, &[5, 3]);
        let x0 = rand_tensor(&mut rng, &[5, 4]);
        let w = rand_tensor(&mut rng, &[5, 5]);
        check_grad(&x0, |g, x| {
            let k = gram_linear(g, x).unwrap();
            let c = g.constant(w.clone());
            let p = g.mul(k, c).unwrap();
            g.sum(p).unwrap()
        });
        check_grad(&x0, |g, x| {
            let k = gram_linear(g, x).unwrap();
            let y = g.constant(y0.clone());
            let l = gram_linear(g, y).unwrap();
            hsic_op(g, k, l).unwrap()
        });
        check_grad(&x0, |g, x| {
            let y = g.constant(y0.clone());
            let k = gram_linear(g, x).unwrap();
            let l = gram_linear(g, y).unwrap();
            let a = cka_op(g, k, l).unwrap();
            let b = cka_op(g, l, k).unwrap();
            g.add(a, b).unwrap()
        });
        let z0 = rand_tensor(&mut rng, &[5, 4]);
        check_grad(&x0, |g, x| {
            let z = g.constant(z0.clone());
            let a = mmd_op(g, x, z).unwrap();
            let b = mmd_op(g, z, x).unwrap();
            g.add(a, b).unwrap()
        });
    }

    fn tet_oracle(outs: &[Tensor], labels: &[usize], w: &LossWeights) -> f64 {
        let mut total = 0.0;
        for o in outs {
            let (b, k) = (o.shape()[0], o.shape()[1]);
            let mut ce = 0.0;
            let mut mse = 0.0;
            for i in 0..b {
                let row = &o.data()[i * k..(i + 1) * k];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                ce += lse - row[labels[i]];
                mse += row.iter().map(|v| (v - w.tet_phi).powi(2)).sum::<f64>();
            }
            total += (1.0 - w.tet_lambda) * ce / b as f64 + w.tet_lambda * mse / (b * k) as f64;
        }
        total / outs.len() as f64
    }

    #[test]
    fn tet_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = LossWeights::default();
        let outs: Vec<Tensor> = (0..4).map(|_| rand_tensor(&mut rng, &[3, 5])).collect();
        let labels = [4, 0, 2];
        let mut g = Graph::new();
        let vars: Vec<Var> = outs.iter().map(|o| g.constant(o.clone())).collect();
        let l = tet_loss(&mut g, &vars, &labels, &w).unwrap();
        assert!((g.value(l).item() - tet_oracle(&outs, &labels, &w)).abs() < 1e-12);

        let steps: Vec<f64> = vars
            .iter()
            .map(|&v| {
                let s = per_step_cls_loss(&mut g, v, &labels, &w).unwrap();
                g.value(s).item()
            })
            .collect();
        assert!((steps.iter().sum::<f64>() / 4.0 - g.value(l).item()).abs() < 1e-12);
    }

    #[test]
    fn tet_reductions() {
        let logits = mat(2, 3, &[0.1, 1.2, -0.3, 2.0, 0.0, 0.5]);
        let plain = LossWeights {
            tet_lambda: 0.0,
            ..LossWeights::default()
        };
        let mut g = Graph::new();
        let v = g.constant(logits.clone());
        let t = tet_loss(&mut g, &[v], &[1, 2], &plain).unwrap();
        let ce = g.softmax_cross_entropy(v, &[1, 2]).unwrap();
        assert_eq!(g.value(t).item(), g.value(ce).item());

        let all_mse = LossWeights {
            tet_lambda: 1.0,
            ..LossWeights::default()
        };
        let flat = g.constant(Tensor::full(&[2, 3], 0.5));
        let t = tet_loss(&mut g, &[flat, flat], &[0, 1], &all_mse).unwrap();
        assert_eq!(g.value(t).item(), 0.0);

        let uniform = g.constant(Tensor::zeros(&[1, 3]));
        let confident = g.constant(mat(1, 3, &[0.0, 4.0, 0.0]));
        let a = per_step_cls_loss(&mut g, uniform, &[1], &plain).unwrap();
        let b = per_step_cls_loss(&mut g, confident, &[1], &plain).unwrap();
        assert!(g.value(b).item() < g.value(a).item());
        assert!(matches!(
            per_step_cls_loss(&mut g, uniform, &[3], &plain),
            Err(LossError::Tensor(TensorError::LabelOutOfRange { .. }))
        ));
    }

    struct Fixture {
        ps: Vec<Tensor>,
        pt: Vec<Tensor>,
        heads: Vec<Tensor>,
        labels: Vec<usize>,
    }

    fn fixture(seed: u64) -> Fixture {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Fixture {
            ps: (0..3).map(|_| rand_tensor(&mut rng, &[4, 6])).collect(),
            pt: (0..3).map(|_| rand_tensor(&mut rng, &[4, 6])).collect(),
            heads: (0..3).map(|_| rand_tensor(&mut rng, &[4, 3])).collect(),
            labels: vec![0, 2, 1, 2],
        }
    }

    #[test]
    fn alignment_loss_values() {
        let f = fixture(8);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let ps: Vec<Var> = f.ps.iter().map(|t| g.constant(t.clone())).collect();
        let l = domain_alignment_loss(&mut g, &ps, &ps).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
        let rotated: Vec<Var> = f
            .ps
            .iter()
            .map(|t| {
                let q = random_orthogonal(&mut rng, 6);
                g.constant(rotate(t, &q, 1.0))
            })
            .collect();
        let l = domain_alignment_loss(&mut g, &ps, &rotated).unwrap();
        assert!(g.value(l).item().abs() < 1e-10);
        let pt: Vec<Var> = f.pt.iter().map(|t| g.constant(t.clone())).collect();
        let l = domain_alignment_loss(&mut g, &ps, &pt).unwrap();
        let v = g.value(l).item();
        assert!(v > 0.0 && v <= 1.0);
        let expect = 1.0
            - f.ps.iter().zip(&f.pt).map(|(a, b)| feature_cka(a, b).unwrap()).sum::<f64>() / 3.0;
        assert!((v - expect).abs() < 1e-12);
    }

    #[test]
    fn alignment_loss_gradient() {
        let f = fixture(10);
        let x0 = f.ps[1].clone();
        check_grad(&x0, |g, x| {
            let ps = [g.constant(f.ps[0].clone()), x, g.constant(f.ps[2].clone())];
            let pt: Vec<Var> = f.pt.iter().map(|t| g.constant(t.clone())).collect();
            domain_alignment_loss(g, &ps, &pt).unwrap()
        });
    }

    fn kt_value(f: &Fixture, eta: &Tensor, metric: AlignMetric) -> f64 {
        let mut g = Graph::new();
        let ps: Vec<Var> = f.ps.iter().map(|t| g.constant(t.clone())).collect();
        let pt: Vec<Var> = f.pt.iter().map(|t| g.constant(t.clone())).collect();
        let h: Vec<Var> = f.heads.iter().map(|t| g.constant(t.clone())).collect();
        let e = g.constant(eta.clone());
        let l = transfer_loss(&mut g, &ps, &pt, &h, &f.labels, e, &LossWeights::default(), metric).unwrap();
        g.value(l).item()
    }

    #[test]
    fn transfer_loss_identities() {
        let f = fixture(11);
        let w = LossWeights::default();
        let mut g = Graph::new();
        let ps: Vec<Var> = f.ps.iter().map(|t| g.constant(t.clone())).collect();
        let pt: Vec<Var> = f.pt.iter().map(|t| g.constant(t.clone())).collect();
        let h: Vec<Var> = f.heads.iter().map(|t| g.constant(t.clone())).collect();
        let mean_cka = f.ps.iter().zip(&f.pt).map(|(a, b)| feature_cka(a, b).unwrap()).sum::<f64>() / 3.0;
        let tet = tet_loss(&mut g, &h, &f.labels, &w).unwrap();
        let tet = g.value(tet).item();

        let zero = kt_value(&f, &Tensor::zeros(&[3]), AlignMetric::Cka);
        assert!((zero - (1.0 - 0.5 * mean_cka + 0.5 * tet)).abs() < 1e-12);

        let big = kt_value(&f, &Tensor::full(&[3], 40.0), AlignMetric::Cka);
        let dal = domain_alignment_loss(&mut g, &ps, &pt).unwrap();
        assert!((big - g.value(dal).item()).abs() < 1e-12);

        let mmd_mean = f.ps.iter().zip(&f.pt).map(|(a, b)| mmd_linear(a, b).unwrap()).sum::<f64>() / 3.0;
        let mmd = kt_value(&f, &Tensor::zeros(&[3]), AlignMetric::Mmd);
        assert!((mmd - (0.5 * mmd_mean + 0.5 * tet)).abs() < 1e-12);
    }

    #[test]
    fn transfer_loss_gradients() {
        let f = fixture(12);
        let w = LossWeights::default();
        let eta0 = Tensor::new(vec![3], vec![0.3, -1.1, 0.7]).unwrap();
        for metric in [AlignMetric::Cka, AlignMetric::Mmd] {
            check_grad(&eta0, |g, e| {
                let ps: Vec<Var> = f.ps.iter().map(|t| g.constant(t.clone())).collect();
                let pt: Vec<Var> = f.pt.iter().map(|t| g.constant(t.clone())).collect();
                let h: Vec<Var> = f.heads.iter().map(|t| g.constant(t.clone())).collect();
                transfer_loss(g, &ps, &pt, &h, &f.labels, e, &w, metric).unwrap()
            });
            check_grad(&f.heads[2], |g, x| {
                let ps: Vec<Var> = f.ps.iter().map(|t| g.constant(t.clone())).collect();
                let pt: Vec<Var> = f.pt.iter().map(|t| g.constant(t.clone())).collect();
                let h = [g.constant(f.heads[0].clone()), g.constant(f.heads[1].clone()), x];
                let e = g.constant(eta0.clone());
                transfer_loss(g, &ps, &pt, &h, &f.labels, e, &w, metric).unwrap()
            });
            check_grad(&f.pt[0], |g, x| {
                let ps: Vec<Var> = f.ps.iter().map(|t| g.constant(t.clone())).collect();
                let pt = [x, g.constant(f.pt[1].clone()), g.constant(f.pt[2].clone())];
                let h: Vec<Var> = f.heads.iter().map(|t| g.constant(t.clone())).collect();
                let e = g.constant(eta0.clone());
                transfer_loss(g, &ps, &pt, &h, &f.labels, e, &w, metric).unwrap()
            });
        }
    }

    #[test]
    fn total_loss_gate() {
        let w = LossWeights::default();
        let mut g = Graph::new();
        let cls = g.constant(Tensor::scalar(2.0));
        let kt = g.constant(Tensor::scalar(4.0));
        let on = total_loss(&mut g, cls, Some(kt), &w).unwrap();
        assert_eq!(g.value(on).item(), 4.0);
        let off = total_loss(&mut g, cls, None, &w).unwrap();
        assert_eq!(g.value(off).item(), 2.0);
        let no_kt = LossWeights {
            lambda_kt: 0.0,
            ..w
        };
        let zeroed = total_loss(&mut g, cls, Some(kt), &no_kt).unwrap();
        assert_eq!(g.value(zeroed).item(), g.value(off).item());
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        let bad = LossWeights {
            tet_lambda: 1.5,
            ..LossWeights::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(EtaParams::new(4).weights(), vec![0.5; 4]);
    }
}
