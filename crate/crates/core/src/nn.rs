//! Dense policy/value networks with exact reverse-mode gradients.
//!
//! All parameters of both networks live in one flat `Vec<f64>`. The
//! canonical ordering is: policy layers first, then value layers; within a
//! layer the weight matrix (stored input-major, `w[i * out + o]`) followed
//! by the bias. Gradients ([`GradVector`]) use the same ordering, so dot
//! products and SGD updates are plain vector operations.

use std::io::{Read, Write};
use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::env::Observation;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Shapes of both networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Arch {
    /// Two hidden layers of 64 tanh units.
    pub fn standard(obs_dim: usize, n_actions: usize) -> Self {
        Arch {
            obs_dim,
            n_actions,
            hidden: vec![64, 64],
            activation: Activation::Tanh,
        }
    }

    pub fn policy_layout(&self) -> MlpLayout {
        MlpLayout::new(self.sizes(self.n_actions), 0, self.activation)
    }

    pub fn value_layout(&self) -> MlpLayout {
        let offset = self.policy_layout().len();
        MlpLayout::new(self.sizes(1), offset, self.activation)
    }

    pub fn n_params(&self) -> usize {
        self.policy_layout().len() + self.value_layout().len()
    }

    fn sizes(&self, out: usize) -> Vec<usize> {
        let mut s = Vec::with_capacity(self.hidden.len() + 2);
        s.push(self.obs_dim);
        s.extend(&self.hidden);
        s.push(out);
        s
    }
}

/// Location of one MLP inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpLayout {
    sizes: Vec<usize>,
    offset: usize,
    len: usize,
    activation: Activation,
}

/// Per-layer activations from a forward pass; `acts[0]` is the input and
/// the last entry the (linear) output.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub acts: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("nonempty trace")
    }

    /// Last hidden activation (the input when there are no hidden layers).
    pub fn last_hidden(&self) -> &[f64] {
        &self.acts[self.acts.len() - 2]
    }
}

impl MlpLayout {
    pub fn new(sizes: Vec<usize>, offset: usize, activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let len = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        MlpLayout {
            sizes,
            offset,
            len,
            activation,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// `(weight_start, bias_start, in, out)` in absolute flat indices.
    fn layer(&self, l: usize) -> (usize, usize, usize, usize) {
        let mut start = self.offset;
        for w in self.sizes.windows(2).take(l) {
            start += w[0] * w[1] + w[1];
        }
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        (start, start + n_in * n_out, n_in, n_out)
    }

    pub fn forward(&self, theta: &[f64], x: &[f64]) -> Result<ForwardTrace> {
        if x.len() != self.sizes[0] {
            return Err(Error::ShapeMismatch {
                expected: self.sizes[0],
                got: x.len(),
            });
        }
        let mut acts = Vec::with_capacity(self.sizes.len());
        acts.push(x.to_vec());
        let last = self.n_layers() - 1;
        for l in 0..self.n_layers() {
            let (w0, b0, _, n_out) = self.layer(l);
            let input = &acts[l];
            let mut y = theta[b0..b0 + n_out].to_vec();
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                let row = &theta[w0 + i * n_out..w0 + (i + 1) * n_out];
                for (yo, &w) in y.iter_mut().zip(row) {
                    *yo += xi * w;
                }
            }
            if l != last {
                for v in &mut y {
                    *v = self.activation.apply(*v);
                }
            }
            acts.push(y);
        }
        Ok(ForwardTrace { acts })
    }

    /// Back-propagate `d_out` (gradient w.r.t. the linear output) and
    /// accumulate `scale * d/dθ` into `grad`, which is indexed like `theta`.
    pub fn backward(&self, theta: &[f64], trace: &ForwardTrace, d_out: &[f64], scale: f64, grad: &mut [f64]) {
        let mut delta: Vec<f64> = d_out.iter().map(|d| d * scale).collect();
        for l in (0..self.n_layers()).rev() {
            let (w0, b0, n_in, n_out) = self.layer(l);
            let input = &trace.acts[l];
            for (g, d) in grad[b0..b0 + n_out].iter_mut().zip(&delta) {
                *g += d;
            }
            for (i, &ai) in input.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                let g_row = &mut grad[w0 + i * n_out..w0 + (i + 1) * n_out];
                for (g, d) in g_row.iter_mut().zip(&delta) {
                    *g += ai * d;
                }
            }
            if l > 0 {
                delta = self.propagate(theta, w0, n_in, n_out, &delta, input);
            }
        }
    }

    /// `<other, scale * d/dθ>` restricted to this network, computed from the
    /// layer factors without forming the per-sample gradient.
    pub fn backward_contract(&self, theta: &[f64], trace: &ForwardTrace, d_out: &[f64], other: &[f64]) -> f64 {
        let mut delta = d_out.to_vec();
        let mut total = 0.0;
        for l in (0..self.n_layers()).rev() {
            let (w0, b0, n_in, n_out) = self.layer(l);
            let input = &trace.acts[l];
            total += dot_slices(&other[b0..b0 + n_out], &delta);
            for (i, &ai) in input.iter().enumerate() {
                if ai == 0.0 {
                    continue;
                }
                total += ai * dot_slices(&other[w0 + i * n_out..w0 + (i + 1) * n_out], &delta);
            }
            if l > 0 {
                delta = self.propagate(theta, w0, n_in, n_out, &delta, input);
            }
        }
        total
    }

    fn propagate(&self, theta: &[f64], w0: usize, n_in: usize, n_out: usize, delta: &[f64], input: &[f64]) -> Vec<f64> {
        (0..n_in)
            .map(|i| {
                let row = &theta[w0 + i * n_out..w0 + (i + 1) * n_out];
                dot_slices(row, delta) * self.activation.derivative_from_output(input[i])
            })
            .collect()
    }
}

#[inline]
fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// ---------------------------------------------------------------------------

/// Parameters of the separate policy and value networks at optimization
/// step `step` of training round `round`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyValueParams {
    pub arch: Arch,
    pub theta: Vec<f64>,
    pub round: u64,
    pub step: u64,
}

/// Outputs of both heads for one observation.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub value: f64,
}

/// A scalar objective's value and its gradient w.r.t. the head outputs.
#[derive(Debug, Clone)]
pub struct HeadObjective {
    pub value: f64,
    pub d_logits: Vec<f64>,
    pub d_value: f64,
}

/// Flat gradient aligned with [`PolicyValueParams::theta`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradVector {
    pub values: Vec<f64>,
    policy_len: usize,
}

impl GradVector {
    pub fn zeros(arch: &Arch) -> Self {
        GradVector {
            values: vec![0.0; arch.n_params()],
            policy_len: arch.policy_layout().len(),
        }
    }

    pub fn from_values(arch: &Arch, values: Vec<f64>) -> Result<Self> {
        let expected = arch.n_params();
        if values.len() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                got: values.len(),
            });
        }
        Ok(GradVector {
            values,
            policy_len: arch.policy_layout().len(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn policy_segment(&self) -> Range<usize> {
        0..self.policy_len
    }

    pub fn value_segment(&self) -> Range<usize> {
        self.policy_len..self.values.len()
    }

    pub fn dot(&self, other: &GradVector) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch {
                expected: self.len(),
                got: other.len(),
            });
        }
        Ok(dot_slices(&self.values, &other.values))
    }

    pub fn norm(&self) -> f64 {
        dot_slices(&self.values, &self.values).sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        self.values.iter_mut().for_each(|v| *v *= s);
    }

    pub fn add_scaled(&mut self, other: &GradVector, s: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += s * b;
        }
    }

    pub fn check_finite(&self, what: &str) -> Result<()> {
        if self.values.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Numerically stable log-softmax.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `d log π(a) / d logits = one_hot(a) − π`.
pub fn log_prob_grad(log_probs: &[f64], action: usize) -> Vec<f64> {
    log_probs
        .iter()
        .enumerate()
        .map(|(k, lp)| if k == action { 1.0 } else { 0.0 } - lp.exp())
        .collect()
}

impl PolicyValueParams {
    pub fn zeros(arch: Arch) -> Self {
        let n = arch.n_params();
        PolicyValueParams {
            arch,
            theta: vec![0.0; n],
            round: 0,
            step: 0,
        }
    }

    /// Orthogonal initialization: gain √2 on hidden layers, 0.01 on the
    /// policy output layer, 1 on the value output layer; zero biases.
    pub fn init(arch: Arch, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(arch);
        for (layout, out_gain) in [(p.arch.policy_layout(), 0.01), (p.arch.value_layout(), 1.0)] {
            let n = layout.n_layers();
            for l in 0..n {
                let (w0, _, n_in, n_out) = layout.layer(l);
                let gain = if l + 1 == n { out_gain } else { 2f64.sqrt() };
                let q = orthogonal(n_in, n_out, rng);
                for i in 0..n_in {
                    for o in 0..n_out {
                        p.theta[w0 + i * n_out + o] = gain * q[(o, i)];
                    }
                }
            }
        }
        p
    }

    pub fn n_params(&self) -> usize {
        self.theta.len()
    }

    pub fn policy_forward(&self, obs: &Observation) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let trace = self.arch.policy_layout().forward(&self.theta, obs.as_slice())?;
        let logits = trace.output().to_vec();
        let log_probs = log_softmax(&logits);
        Ok((logits, log_probs, trace.last_hidden().to_vec()))
    }

    pub fn log_probs(&self, obs: &Observation) -> Result<Vec<f64>> {
        let trace = self.arch.policy_layout().forward(&self.theta, obs.as_slice())?;
        Ok(log_softmax(trace.output()))
    }

    pub fn value_forward(&self, obs: &Observation) -> Result<f64> {
        let trace = self.arch.value_layout().forward(&self.theta, obs.as_slice())?;
        Ok(trace.output()[0])
    }

    /// Exact gradient of a scalar objective of the head outputs w.r.t. all
    /// parameters.
    pub fn per_sample_grad<F>(&self, obs: &Observation, objective: F) -> Result<(f64, GradVector)>
    where
        F: FnOnce(&HeadOutputs) -> HeadObjective,
    {
        let mut grad = GradVector::zeros(&self.arch);
        let value = self.accumulate_grad(obs, objective, 1.0, &mut grad)?;
        grad.check_finite("per-sample gradient")?;
        Ok((value, grad))
    }

    /// Adds `scale * ∇objective` into `grad`; returns the objective value.
    pub fn accumulate_grad<F>(&self, obs: &Observation, objective: F, scale: f64, grad: &mut GradVector) -> Result<f64>
    where
        F: FnOnce(&HeadOutputs) -> HeadObjective,
    {
        let pl = self.arch.policy_layout();
        let vl = self.arch.value_layout();
        let pt = pl.forward(&self.theta, obs.as_slice())?;
        let vt = vl.forward(&self.theta, obs.as_slice())?;
        let logits = pt.output().to_vec();
        let heads = HeadOutputs {
            log_probs: log_softmax(&logits),
            logits,
            value: vt.output()[0],
        };
        let obj = objective(&heads);
        if obj.d_logits.len() != self.arch.n_actions {
            return Err(Error::ShapeMismatch {
                expected: self.arch.n_actions,
                got: obj.d_logits.len(),
            });
        }
        if obj.d_logits.iter().any(|&d| d != 0.0) {
            pl.backward(&self.theta, &pt, &obj.d_logits, scale, &mut grad.values);
        }
        if obj.d_value != 0.0 {
            vl.backward(&self.theta, &vt, &[obj.d_value], scale, &mut grad.values);
        }
        Ok(obj.value)
    }

    /// `<target, ∇objective>` where the objective's policy-head gradient is
    /// `d_logits`, without materializing the per-sample gradient. The value
    /// head is skipped, so `target` must have a zero value segment.
    pub fn contract_policy_grad(&self, trace: &ForwardTrace, d_logits: &[f64], target: &GradVector) -> f64 {
        self.arch
            .policy_layout()
            .backward_contract(&self.theta, trace, d_logits, &target.values)
    }

    pub fn policy_trace(&self, obs: &Observation) -> Result<ForwardTrace> {
        self.arch.policy_layout().forward(&self.theta, obs.as_slice())
    }

    /// Global-norm clip of the loss gradient followed by `θ ← θ − lr·g`.
    pub fn sgd_step(&self, loss_grad: &GradVector, lr: f64, max_grad_norm: f64) -> PolicyValueParams {
        let norm = loss_grad.norm();
        let clip = if norm > max_grad_norm { max_grad_norm / norm } else { 1.0 };
        let mut next = self.clone();
        for (t, g) in next.theta.iter_mut().zip(&loss_grad.values) {
            *t -= lr * clip * g;
        }
        next.step += 1;
        next
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let a = &self.arch;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&[match a.activation {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }])?;
        for v in [a.obs_dim, a.n_actions, a.hidden.len()] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for &h in &a.hidden {
            w.write_all(&(h as u64).to_le_bytes())?;
        }
        w.write_all(&self.round.to_le_bytes())?;
        w.write_all(&self.step.to_le_bytes())?;
        w.write_all(&(self.theta.len() as u64).to_le_bytes())?;
        for t in &self.theta {
            w.write_all(&t.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let version = u32::from_le_bytes(b4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        let activation = match b1[0] {
            0 => Activation::Tanh,
            1 => Activation::Identity,
            x => return Err(Error::Checkpoint(format!("unknown activation tag {x}"))),
        };
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b8)?;
            Ok(u64::from_le_bytes(b8))
        };
        let obs_dim = read_u64(&mut r)? as usize;
        let n_actions = read_u64(&mut r)? as usize;
        let n_hidden = read_u64(&mut r)? as usize;
        if n_hidden > 64 {
            return Err(Error::Checkpoint("implausible layer count".into()));
        }
        let hidden = (0..n_hidden)
            .map(|_| read_u64(&mut r).map(|h| h as usize))
            .collect::<Result<Vec<_>>>()?;
        let round = read_u64(&mut r)?;
        let step = read_u64(&mut r)?;
        let n = read_u64(&mut r)? as usize;
        let arch = Arch {
            obs_dim,
            n_actions,
            hidden,
            activation,
        };
        if n != arch.n_params() {
            return Err(Error::Checkpoint(format!(
                "header declares {} parameters, shape implies {}",
                n,
                arch.n_params()
            )));
        }
        let theta = (0..n)
            .map(|_| read_u64(&mut r).map(f64::from_bits))
            .collect::<Result<Vec<_>>>()?;
        Ok(PolicyValueParams {
            arch,
            theta,
            round,
            step,
        })
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"RLATCKPT";
const CHECKPOINT_VERSION: u32 = 1;

/// A `rows x cols` matrix (rows = outputs) with orthonormal rows or columns.
fn orthogonal(n_in: usize, n_out: usize, rng: &mut Rng) -> DMatrix<f64> {
    let (r, c) = if n_out < n_in { (n_in, n_out) } else { (n_out, n_in) };
    let a = DMatrix::<f64>::from_fn(r, c, |_, _| rng.sample(StandardNormal));
    let qr = a.qr();
    let mut q = qr.q();
    let rm = qr.r();
    for j in 0..q.ncols() {
        if rm[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if n_out < n_in {
        q.transpose()
    } else {
        q
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn random_params(arch: Arch, seed: u64, scale: f64) -> PolicyValueParams {
        let mut rng = stream(seed, "test-params", 0);
        let mut p = PolicyValueParams::zeros(arch);
        for t in &mut p.theta {
            *t = scale * rng.gen_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn zero_params_give_uniform_policy_and_zero_value() {
        let p = PolicyValueParams::zeros(Arch::standard(16, 4));
        let obs = Observation::one_hot(16, 3);
        let (_, lp, hidden) = p.policy_forward(&obs).unwrap();
        for l in lp {
            assert!((l - 0.25f64.ln()).abs() < 1e-15);
        }
        assert_eq!(hidden.len(), 64);
        assert_eq!(p.value_forward(&obs).unwrap(), 0.0);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let lp = log_softmax(&[3.0, 3.0, 3.0]);
        for l in &lp {
            assert!((l - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        }
        let p = random_params(Arch::standard(16, 4), 1, 0.5);
        for s in 0..16 {
            let lp = p.log_probs(&Observation::one_hot(16, s)).unwrap();
            let total: f64 = lp.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = PolicyValueParams::zeros(Arch::standard(16, 4));
        let err = p.value_forward(&Observation::one_hot(5, 0)).unwrap_err();
        assert_eq!(err, Error::ShapeMismatch { expected: 16, got: 5 });
    }

    #[test]
    fn identity_activation_value_is_linear() {
        let arch = Arch {
            activation: Activation::Identity,
            ..Arch::standard(3, 2)
        };
        let p = random_params(arch, 2, 0.3);
        let x = Observation(vec![0.2, -0.4, 1.1]);
        let y = Observation(vec![-0.7, 0.3, 0.5]);
        let xy = Observation(vec![1.5 * 0.2 - 0.7, 1.5 * -0.4 + 0.3, 1.5 * 1.1 + 0.5]);
        let zero = p.value_forward(&Observation(vec![0.0; 3])).unwrap();
        let lhs = p.value_forward(&xy).unwrap() - zero;
        let rhs = 1.5 * (p.value_forward(&x).unwrap() - zero) + (p.value_forward(&y).unwrap() - zero);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn constant_objective_has_zero_gradient() {
        let p = random_params(Arch::standard(16, 4), 3, 0.3);
        let (v, g) = p
            .per_sample_grad(&Observation::one_hot(16, 2), |_| HeadObjective {
                value: 7.0,
                d_logits: vec![0.0; 4],
                d_value: 0.0,
            })
            .unwrap();
        assert_eq!(v, 7.0);
        assert!(g.values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn log_prob_gradient_under_uniform_policy() {
        // Zero output layer => uniform policy; the output bias gradient is
        // exactly one_hot(a) - 1/4.
        let arch = Arch::standard(16, 4);
        let mut p = random_params(arch.clone(), 4, 0.3);
        let pl = arch.policy_layout();
        let (w0, b0, n_in, n_out) = pl.layer(pl.n_layers() - 1);
        for t in &mut p.theta[w0..b0 + n_out] {
            *t = 0.0;
        }
        let _ = n_in;
        let (_, g) = p
            .per_sample_grad(&Observation::one_hot(16, 0), |h| HeadObjective {
                value: h.log_probs[2],
                d_logits: log_prob_grad(&h.log_probs, 2),
                d_value: 0.0,
            })
            .unwrap();
        let bias = &g.values[b0..b0 + n_out];
        let expected = [-0.25, -0.25, 0.75, -0.25];
        for (b, e) in bias.iter().zip(expected) {
            assert!((b - e).abs() < 1e-15);
        }
        assert!(g.values[g.value_segment()].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn segments_are_orthogonal() {
        let p = random_params(Arch::standard(16, 4), 5, 0.3);
        let obs = Observation::one_hot(16, 6);
        let (_, gp) = p
            .per_sample_grad(&obs, |h| HeadObjective {
                value: h.log_probs[1],
                d_logits: log_prob_grad(&h.log_probs, 1),
                d_value: 0.0,
            })
            .unwrap();
        let (_, gv) = p
            .per_sample_grad(&obs, |h| HeadObjective {
                value: h.value * h.value,
                d_logits: vec![0.0; 4],
                d_value: 2.0 * h.value,
            })
            .unwrap();
        assert!(gp.values[gp.value_segment()].iter().all(|&x| x == 0.0));
        assert!(gv.values[gv.policy_segment()].iter().all(|&x| x == 0.0));
        assert_eq!(gp.dot(&gv).unwrap(), 0.0);
    }

    #[test]
    fn dot_product_basics() {
        let arch = Arch::standard(4, 2);
        let mut rng = stream(0, "dot", 0);
        let g1 = GradVector::from_values(&arch, (0..arch.n_params()).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let zero = GradVector::zeros(&arch);
        assert_eq!(g1.dot(&zero).unwrap(), 0.0);
        assert!((g1.dot(&g1).unwrap() - g1.norm().powi(2)).abs() < 1e-12);
        let other = GradVector::zeros(&Arch::standard(5, 2));
        assert!(matches!(g1.dot(&other), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn sgd_clipping() {
        let arch = Arch::standard(2, 2);
        let p = random_params(arch.clone(), 6, 0.3);
        // zero gradient
        let q = p.sgd_step(&GradVector::zeros(&arch), 0.1, 0.5);
        assert_eq!(q.theta, p.theta);
        // unit-norm gradient along one coordinate
        let mut g = GradVector::zeros(&arch);
        g.values[3] = 1.0;
        let q = p.sgd_step(&g, 0.1, 0.5);
        assert!((q.theta[3] - (p.theta[3] - 0.1 * 0.5)).abs() < 1e-15);
        // norm 0.3 < 0.5: unscaled
        g.values[3] = 0.3;
        let q = p.sgd_step(&g, 0.1, 0.5);
        assert!((q.theta[3] - (p.theta[3] - 0.1 * 0.3)).abs() < 1e-15);
        assert_eq!(q.step, p.step + 1);
    }

    #[test]
    fn orthogonal_init_properties() {
        let arch = Arch::standard(16, 4);
        let mut rng = stream(9, "init", 0);
        let p = PolicyValueParams::init(arch.clone(), &mut rng);
        let pl = arch.policy_layout();
        // Hidden layer 16 -> 64: columns over outputs, 16 orthonormal input rows scaled by √2.
        let (w0, _, n_in, n_out) = pl.layer(0);
        for i in 0..n_in {
            for j in 0..n_in {
                let d: f64 = (0..n_out)
                    .map(|o| p.theta[w0 + i * n_out + o] * p.theta[w0 + j * n_out + o])
                    .sum();
                let expected = if i == j { 2.0 } else { 0.0 };
                assert!((d - expected).abs() < 1e-10, "{i},{j}: {d}");
            }
        }
        // Near-uniform initial policy.
        let lp = p.log_probs(&Observation::one_hot(16, 0)).unwrap();
        for l in lp {
            assert!((l.exp() - 0.25).abs() < 0.05);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut p = random_params(Arch::standard(16, 4), 7, 1.0);
        p.theta[0] = f64::MIN_POSITIVE / 3.0;
        p.round = 12;
        p.step = 320;
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let q = PolicyValueParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(q.arch, p.arch);
        assert_eq!((q.round, q.step), (12, 320));
        assert!(q.theta.iter().zip(&p.theta).all(|(a, b)| a.to_bits() == b.to_bits()));
        buf[0] = b'X';
        assert!(PolicyValueParams::read_checkpoint(&buf[..]).is_err());
    }
}
