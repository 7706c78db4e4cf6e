//! Gated attention multiple-instance network with one attention branch per
//! class.
//!
//! For a bag of `n` instance embeddings:
//!
//! 1. per-bag normalization of every feature, then a learned affine;
//! 2. `h = relu(W1 x + b1)`;
//! 3. `e = tanh(Wt h + bt) ⊙ sigmoid(Ws h + bs)`;
//! 4. per class `c`: `a_ci = sigmoid(v_c · relu(U_c e_i + u_c) + b_c)`,
//!    `alpha_ci = a_ci / Σ_j a_cj`, `z_c = Σ_i alpha_ci e_i`;
//! 5. `s_c = w_c · z_c + b_c`, `p = softmax(s)`.
//!
//! Training minimizes a class-weighted one-vs-rest hinge loss on the raw
//! scores `s`; the softmax only feeds probabilities and ensembling.
//!
//! Instances are processed in a canonical order (rows sorted
//! lexicographically), so every reduction over the bag is independent of
//! the order the instances arrive in and results are bit-identical under
//! permutation.

mod checkpoint;
mod train;

use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bagstore::FirLabel;
use crate::error::{Error, Result};
use crate::linalg::{argmax, gemm, matmul_nt, sigmoid, softmax, Matrix};
use crate::optim::ParamTensors;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader, CHECKPOINT_MAGIC};
pub use train::{class_weights, evaluate, train_epoch, Evaluation, LabeledBag};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub gate_dim: usize,
    pub attn_hidden: usize,
    pub n_classes: usize,
    pub bn_epsilon: f64,
}

impl ArchConfig {
    /// 512 → 256 gate → 64-wide attention branches, three classes.
    pub fn new(input_dim: usize) -> Self {
        Self { input_dim, hidden_dim: 512, gate_dim: 256, attn_hidden: 64, n_classes: 3, bn_epsilon: 1e-5 }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.input_dim, self.hidden_dim, self.gate_dim, self.attn_hidden, self.n_classes].contains(&0) {
            return Err(Error::invalid(format!("all layer widths must be >= 1: {self:?}")));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::invalid("bn_epsilon must be positive"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let head = self.attn_hidden * self.gate_dim + 2 * self.attn_hidden + 1;
        2 * self.input_dim
            + self.hidden_dim * (self.input_dim + 1)
            + 2 * self.gate_dim * (self.hidden_dim + 1)
            + self.n_classes * (head + self.gate_dim + 1)
    }
}

/// One class's attention branch.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead {
    /// `attn_hidden × gate_dim`
    pub proj: Matrix,
    pub proj_bias: Vec<f64>,
    pub score: Vec<f64>,
    /// Length 1.
    pub score_bias: Vec<f64>,
}

/// Every learnable tensor. Gradients and optimizer moments share this shape.
#[derive(Clone, Debug, PartialEq)]
pub struct MilParams {
    pub arch: ArchConfig,
    pub bn_gain: Vec<f64>,
    pub bn_bias: Vec<f64>,
    /// `hidden_dim × input_dim`
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// tanh branch, `gate_dim × hidden_dim`
    pub wt: Matrix,
    pub bt: Vec<f64>,
    /// sigmoid branch, `gate_dim × hidden_dim`
    pub ws: Matrix,
    pub bs: Vec<f64>,
    pub heads: Vec<AttentionHead>,
    /// One row per class, `n_classes × gate_dim`.
    pub cls_w: Matrix,
    pub cls_b: Vec<f64>,
}

impl MilParams {
    pub fn zeros(arch: &ArchConfig) -> Self {
        let a = arch;
        Self {
            arch: a.clone(),
            bn_gain: vec![0.0; a.input_dim],
            bn_bias: vec![0.0; a.input_dim],
            w1: Matrix::zeros(a.hidden_dim, a.input_dim),
            b1: vec![0.0; a.hidden_dim],
            wt: Matrix::zeros(a.gate_dim, a.hidden_dim),
            bt: vec![0.0; a.gate_dim],
            ws: Matrix::zeros(a.gate_dim, a.hidden_dim),
            bs: vec![0.0; a.gate_dim],
            heads: (0..a.n_classes)
                .map(|_| AttentionHead {
                    proj: Matrix::zeros(a.attn_hidden, a.gate_dim),
                    proj_bias: vec![0.0; a.attn_hidden],
                    score: vec![0.0; a.attn_hidden],
                    score_bias: vec![0.0],
                })
                .collect(),
            cls_w: Matrix::zeros(a.n_classes, a.gate_dim),
            cls_b: vec![0.0; a.n_classes],
        }
    }

    /// Glorot-uniform weights, zero biases, unit normalization gain.
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(arch);
        p.bn_gain.fill(1.0);
        let mut glorot = |w: &mut [f64], fan_in: usize, fan_out: usize| {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for v in w {
                *v = rng.random_range(-limit..=limit);
            }
        };
        glorot(&mut p.w1.data, arch.input_dim, arch.hidden_dim);
        glorot(&mut p.wt.data, arch.hidden_dim, arch.gate_dim);
        glorot(&mut p.ws.data, arch.hidden_dim, arch.gate_dim);
        for head in &mut p.heads {
            glorot(&mut head.proj.data, arch.gate_dim, arch.attn_hidden);
            glorot(&mut head.score, arch.attn_hidden, 1);
        }
        for c in 0..arch.n_classes {
            glorot(p.cls_w.row_mut(c), arch.gate_dim, 1);
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Tensor order here is also the checkpoint payload order.
impl ParamTensors for MilParams {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![
            &self.bn_gain,
            &self.bn_bias,
            &self.w1.data,
            &self.b1,
            &self.wt.data,
            &self.bt,
            &self.ws.data,
            &self.bs,
        ];
        for h in &self.heads {
            out.extend([h.proj.data.as_slice(), &h.proj_bias, &h.score, &h.score_bias]);
        }
        out.push(&self.cls_w.data);
        out.push(&self.cls_b);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            &mut self.bn_gain,
            &mut self.bn_bias,
            &mut self.w1.data,
            &mut self.b1,
            &mut self.wt.data,
            &mut self.bt,
            &mut self.ws.data,
            &mut self.bs,
        ];
        for h in &mut self.heads {
            out.extend([h.proj.data.as_mut_slice(), &mut h.proj_bias, &mut h.score, &mut h.score_bias]);
        }
        out.push(&mut self.cls_w.data);
        out.push(&mut self.cls_b);
        out
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut out: Vec<String> =
            ["bn_gain", "bn_bias", "w1", "b1", "wt", "bt", "ws", "bs"].iter().map(|s| s.to_string()).collect();
        for c in 0..self.heads.len() {
            for part in ["proj", "proj_bias", "score", "score_bias"] {
                out.push(format!("attn{c}.{part}"));
            }
        }
        out.push("cls_w".into());
        out.push("cls_b".into());
        out
    }
}

/// Activations of one attention branch, in canonical instance order.
#[derive(Clone, Debug)]
pub struct HeadTrace {
    pub pre: Matrix,
    pub act: Matrix,
    /// Sigmoid attention `a_ci`.
    pub raw: Vec<f64>,
    pub raw_sum: f64,
    /// Normalized attention `alpha_ci`.
    pub alpha: Vec<f64>,
    pub pooled: Vec<f64>,
}

/// Everything backprop needs. Row `k` of every matrix is the instance
/// `order[k]` of the caller's bag.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub order: Vec<usize>,
    /// Normalized inputs before the affine.
    pub normalized: Matrix,
    pub inv_std: Vec<f64>,
    pub affine: Matrix,
    pub hidden_pre: Matrix,
    pub hidden: Matrix,
    pub tanh_out: Matrix,
    pub sigm_out: Matrix,
    pub gated: Matrix,
    pub heads: Vec<HeadTrace>,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
}

impl ForwardTrace {
    pub fn n_instances(&self) -> usize {
        self.order.len()
    }

    /// Normalized attention of `class` in the caller's instance order.
    pub fn attention(&self, class: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.order.len()];
        for (k, &orig) in self.order.iter().enumerate() {
            out[orig] = self.heads[class].alpha[k];
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionResult {
    /// `[class][patch]`, patches in bag order.
    pub attention: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub predicted: usize,
}

impl AttentionResult {
    pub fn predicted_attention(&self) -> &[f64] {
        &self.attention[self.predicted]
    }
}

fn canonical_order(x: &Matrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x.rows).collect();
    order.sort_by(|&a, &b| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    order
}

fn affine_layer(x: &Matrix, w: &Matrix, b: &[f64]) -> Matrix {
    let mut out = matmul_nt(x, w);
    out.add_row_vector(b);
    out
}

pub fn forward(params: &MilParams, x: &Matrix) -> Result<ForwardTrace> {
    let arch = &params.arch;
    let n = x.rows;
    if n == 0 {
        return Err(Error::EmptyBag);
    }
    if x.cols != arch.input_dim {
        return Err(Error::DimensionMismatch { expected: arch.input_dim, found: x.cols });
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("bag embeddings".into()));
    }
    let order = canonical_order(x);
    let mut normalized = x.select_rows(&order);
    let d = arch.input_dim;

    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(normalized.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in var.iter_mut().zip(normalized.row(i)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / (s / n as f64 + arch.bn_epsilon).sqrt()).collect();
    let mut affine = Matrix::zeros(n, d);
    for i in 0..n {
        let row = normalized.row_mut(i);
        for j in 0..d {
            row[j] = (row[j] - mean[j]) * inv_std[j];
        }
        let out = affine.row_mut(i);
        for j in 0..d {
            out[j] = params.bn_gain[j] * row[j] + params.bn_bias[j];
        }
    }

    let hidden_pre = affine_layer(&affine, &params.w1, &params.b1);
    let hidden = Matrix { data: hidden_pre.data.iter().map(|v| v.max(0.0)).collect(), ..hidden_pre.clone() };
    let mut tanh_out = affine_layer(&hidden, &params.wt, &params.bt);
    tanh_out.data.iter_mut().for_each(|v| *v = v.tanh());
    let mut sigm_out = affine_layer(&hidden, &params.ws, &params.bs);
    sigm_out.data.iter_mut().for_each(|v| *v = sigmoid(*v));
    let gated = Matrix {
        data: tanh_out.data.iter().zip(&sigm_out.data).map(|(t, g)| t * g).collect(),
        ..tanh_out.clone()
    };

    let mut heads = Vec::with_capacity(arch.n_classes);
    let mut scores = Vec::with_capacity(arch.n_classes);
    for (c, head) in params.heads.iter().enumerate() {
        let pre = affine_layer(&gated, &head.proj, &head.proj_bias);
        let act = Matrix { data: pre.data.iter().map(|v| v.max(0.0)).collect(), ..pre.clone() };
        let raw: Vec<f64> =
            (0..n).map(|i| sigmoid(crate::linalg::dot(act.row(i), &head.score) + head.score_bias[0])).collect();
        let raw_sum: f64 = raw.iter().sum();
        let alpha: Vec<f64> = raw.iter().map(|a| a / raw_sum).collect();
        let mut pooled = vec![0.0; arch.gate_dim];
        for (i, &w) in alpha.iter().enumerate() {
            for (z, e) in pooled.iter_mut().zip(gated.row(i)) {
                *z += w * e;
            }
        }
        scores.push(crate::linalg::dot(params.cls_w.row(c), &pooled) + params.cls_b[c]);
        heads.push(HeadTrace { pre, act, raw, raw_sum, alpha, pooled });
    }
    let probabilities = softmax(&scores);
    Ok(ForwardTrace {
        order,
        normalized,
        inv_std,
        affine,
        hidden_pre,
        hidden,
        tanh_out,
        sigm_out,
        gated,
        heads,
        scores,
        probabilities,
    })
}

fn check_weights(n_classes: usize, label: FirLabel, class_weights: &[f64]) -> Result<()> {
    if class_weights.len() != n_classes || label.index() >= n_classes {
        return Err(Error::DimensionMismatch { expected: n_classes, found: class_weights.len() });
    }
    if class_weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
        return Err(Error::invalid("class weights must be positive"));
    }
    Ok(())
}

/// `w_y · Σ_c max(0, 1 − y_c s_c)` with `y_c = +1` for the true class and −1 otherwise.
pub fn hinge_loss(scores: &[f64], label: FirLabel, class_weights: &[f64]) -> Result<f64> {
    check_weights(scores.len(), label, class_weights)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let y = label.index();
    let total: f64 = scores
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let sign = if c == y { 1.0 } else { -1.0 };
            (1.0 - sign * s).max(0.0)
        })
        .sum();
    Ok(class_weights[y] * total)
}

/// Derivative of `hinge_loss` with respect to the scores (zero at the kink).
pub fn hinge_grad(scores: &[f64], label: FirLabel, class_weights: &[f64]) -> Vec<f64> {
    let y = label.index();
    scores
        .iter()
        .enumerate()
        .map(|(c, s)| {
            let sign = if c == y { 1.0 } else { -1.0 };
            if 1.0 - sign * s > 0.0 {
                -class_weights[y] * sign
            } else {
                0.0
            }
        })
        .collect()
}

/// Gradient of the hinge loss with respect to every parameter.
pub fn backward(params: &MilParams, trace: &ForwardTrace, label: FirLabel, class_weights: &[f64]) -> Result<MilParams> {
    check_weights(params.arch.n_classes, label, class_weights)?;
    let d_scores = hinge_grad(&trace.scores, label, class_weights);
    Ok(backprop(params, trace, &d_scores, false).0)
}

/// As [`backward`], additionally returning the gradient with respect to the
/// input embeddings (rows in the caller's order).
pub fn backward_with_inputs(
    params: &MilParams,
    trace: &ForwardTrace,
    label: FirLabel,
    class_weights: &[f64],
) -> Result<(MilParams, Matrix)> {
    check_weights(params.arch.n_classes, label, class_weights)?;
    let d_scores = hinge_grad(&trace.scores, label, class_weights);
    let (grads, dx) = backprop(params, trace, &d_scores, true);
    Ok((grads, dx.expect("requested")))
}

/// Backpropagates `d_scores` (dL/ds) through the whole network.
pub fn backprop(params: &MilParams, trace: &ForwardTrace, d_scores: &[f64], want_inputs: bool) -> (MilParams, Option<Matrix>) {
    let arch = &params.arch;
    let n = trace.n_instances();
    let mut grads = MilParams::zeros(arch);
    let mut d_gated = Matrix::zeros(n, arch.gate_dim);

    for (c, (head, ht)) in params.heads.iter().zip(&trace.heads).enumerate() {
        let ds = d_scores[c];
        if ds == 0.0 {
            continue;
        }
        grads.cls_b[c] = ds;
        for (g, z) in grads.cls_w.row_mut(c).iter_mut().zip(&ht.pooled) {
            *g = ds * z;
        }
        let d_pooled: Vec<f64> = params.cls_w.row(c).iter().map(|w| ds * w).collect();

        // z = Σ alpha_i e_i
        let d_alpha: Vec<f64> = (0..n).map(|i| crate::linalg::dot(trace.gated.row(i), &d_pooled)).collect();
        for i in 0..n {
            let a = ht.alpha[i];
            for (g, dz) in d_gated.row_mut(i).iter_mut().zip(&d_pooled) {
                *g += a * dz;
            }
        }
        // alpha_i = a_i / Σ a_j
        let centered: f64 = ht.alpha.iter().zip(&d_alpha).map(|(a, d)| a * d).sum();
        let d_logit: Vec<f64> = (0..n)
            .map(|i| {
                let d_raw = (d_alpha[i] - centered) / ht.raw_sum;
                d_raw * ht.raw[i] * (1.0 - ht.raw[i])
            })
            .collect();
        let gh = &mut grads.heads[c];
        gh.score_bias[0] = d_logit.iter().sum();
        for i in 0..n {
            for (g, a) in gh.score.iter_mut().zip(ht.act.row(i)) {
                *g += d_logit[i] * a;
            }
        }
        let mut d_pre = Matrix::zeros(n, arch.attn_hidden);
        for i in 0..n {
            let pre = ht.pre.row(i);
            for (k, g) in d_pre.row_mut(i).iter_mut().enumerate() {
                if pre[k] > 0.0 {
                    *g = d_logit[i] * head.score[k];
                }
            }
        }
        gemm(1.0, &d_pre, true, &trace.gated, false, 0.0, &mut gh.proj);
        gh.proj_bias = d_pre.col_sums();
        gemm(1.0, &d_pre, false, &head.proj, false, 1.0, &mut d_gated);
    }

    // e = t ⊙ g
    let mut d_tanh_pre = Matrix::zeros(n, arch.gate_dim);
    let mut d_sigm_pre = Matrix::zeros(n, arch.gate_dim);
    for idx in 0..n * arch.gate_dim {
        let de = d_gated.data[idx];
        let t = trace.tanh_out.data[idx];
        let g = trace.sigm_out.data[idx];
        d_tanh_pre.data[idx] = de * g * (1.0 - t * t);
        d_sigm_pre.data[idx] = de * t * g * (1.0 - g);
    }
    gemm(1.0, &d_tanh_pre, true, &trace.hidden, false, 0.0, &mut grads.wt);
    grads.bt = d_tanh_pre.col_sums();
    gemm(1.0, &d_sigm_pre, true, &trace.hidden, false, 0.0, &mut grads.ws);
    grads.bs = d_sigm_pre.col_sums();

    let mut d_hidden = Matrix::zeros(n, arch.hidden_dim);
    gemm(1.0, &d_tanh_pre, false, &params.wt, false, 0.0, &mut d_hidden);
    gemm(1.0, &d_sigm_pre, false, &params.ws, false, 1.0, &mut d_hidden);
    for (g, pre) in d_hidden.data.iter_mut().zip(&trace.hidden_pre.data) {
        if *pre <= 0.0 {
            *g = 0.0;
        }
    }
    gemm(1.0, &d_hidden, true, &trace.affine, false, 0.0, &mut grads.w1);
    grads.b1 = d_hidden.col_sums();

    let mut d_affine = Matrix::zeros(n, arch.input_dim);
    gemm(1.0, &d_hidden, false, &params.w1, false, 0.0, &mut d_affine);
    grads.bn_bias = d_affine.col_sums();
    for i in 0..n {
        for ((g, da), xh) in grads.bn_gain.iter_mut().zip(d_affine.row(i)).zip(trace.normalized.row(i)) {
            *g += da * xh;
        }
    }

    let d_inputs = want_inputs.then(|| {
        // dx = inv_std (dx̂ − mean(dx̂) − x̂ mean(dx̂ ⊙ x̂)), per feature.
        let d = arch.input_dim;
        let mut d_norm = d_affine.clone();
        for i in 0..n {
            for (v, g) in d_norm.row_mut(i).iter_mut().zip(&params.bn_gain) {
                *v *= g;
            }
        }
        let mut mean_d = vec![0.0; d];
        let mut mean_dx = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean_d[j] += d_norm.get(i, j) / n as f64;
                mean_dx[j] += d_norm.get(i, j) * trace.normalized.get(i, j) / n as f64;
            }
        }
        let mut dx = Matrix::zeros(n, d);
        for (k, &orig) in trace.order.iter().enumerate() {
            let out = dx.row_mut(orig);
            for j in 0..d {
                out[j] = trace.inv_std[j] * (d_norm.get(k, j) - mean_d[j] - trace.normalized.get(k, j) * mean_dx[j]);
            }
        }
        dx
    });
    (grads, d_inputs)
}

/// Forward pass plus argmax (lowest index on ties) and per-class attention.
pub fn predict(params: &MilParams, x: &Matrix) -> Result<AttentionResult> {
    let trace = forward(params, x)?;
    let attention = (0..params.arch.n_classes).map(|c| trace.attention(c)).collect();
    Ok(AttentionResult {
        attention,
        predicted: argmax(&trace.probabilities),
        scores: trace.scores,
        probabilities: trace.probabilities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn small_arch() -> ArchConfig {
        ArchConfig { input_dim: 8, hidden_dim: 12, gate_dim: 8, attn_hidden: 6, n_classes: 3, bn_epsilon: 1e-5 }
    }

    fn random_bag(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(n, d, (0..n * d).map(|_| StandardNormal.sample(rng)).collect())
    }

    /// Perturb every parameter so gains and biases are not at their init values.
    fn jitter(p: &mut MilParams, rng: &mut ChaCha8Rng, scale: f64) {
        for t in p.tensors_mut() {
            for v in t {
                let z: f64 = StandardNormal.sample(rng);
                *v += scale * z;
            }
        }
    }

    #[test]
    fn param_count_matches_tensors() {
        let arch = ArchConfig::new(1024);
        let p = MilParams::zeros(&arch);
        assert_eq!(p.len(), arch.param_count());
        assert_eq!(p.tensors().len(), p.tensor_names().len());
    }

    #[test]
    fn zero_params_collapse_to_uniform() {
        let arch = small_arch();
        let p = MilParams::zeros(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_bag(7, 8, &mut rng);
        let t = forward(&p, &x).unwrap();
        assert!(t.gated.data.iter().all(|&v| v == 0.0));
        for h in &t.heads {
            assert!(h.raw.iter().all(|&a| a == 0.5));
            assert!(h.alpha.iter().all(|&a| (a - 1.0 / 7.0).abs() < 1e-15));
        }
        assert_eq!(t.scores, vec![0.0; 3]);
        let r = predict(&p, &x).unwrap();
        assert!(r.probabilities.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        assert_eq!(r.predicted, 0);
    }

    #[test]
    fn single_instance_bag() {
        let arch = small_arch();
        let p = MilParams::init(&arch, 3).unwrap();
        let x = Matrix::from_vec(1, 8, (0..8).map(|v| v as f64).collect());
        let t = forward(&p, &x).unwrap();
        assert!(t.normalized.data.iter().all(|&v| v == 0.0));
        for h in &t.heads {
            assert_eq!(h.alpha, vec![1.0]);
        }
    }

    #[test]
    fn forward_errors() {
        let p = MilParams::init(&small_arch(), 0).unwrap();
        assert!(matches!(forward(&p, &Matrix::zeros(0, 8)), Err(Error::EmptyBag)));
        assert!(matches!(forward(&p, &Matrix::zeros(2, 5)), Err(Error::DimensionMismatch { .. })));
        let mut x = Matrix::zeros(2, 8);
        x.data[3] = f64::INFINITY;
        assert!(matches!(forward(&p, &x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn hinge_examples() {
        let w = [1.0, 1.0, 1.0];
        assert_eq!(hinge_loss(&[2.0, -2.0, -2.0], FirLabel::Fir0, &w).unwrap(), 0.0);
        assert_eq!(hinge_loss(&[0.0; 3], FirLabel::Fir0, &w).unwrap(), 3.0);
        assert_eq!(hinge_loss(&[0.0; 3], FirLabel::Fir1, &[1.0, 5.0, 1.0]).unwrap(), 15.0);
        assert!(hinge_loss(&[0.0; 3], FirLabel::Fir1, &[1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn batch_norm_statistics() {
        let arch = small_arch();
        let p = MilParams::init(&arch, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for n in [2, 5, 40] {
            let mut x = random_bag(n, 8, &mut rng);
            for v in &mut x.data {
                *v = *v * 3.0 + 10.0;
            }
            let t = forward(&p, &x).unwrap();
            for j in 0..8 {
                let raw: Vec<f64> = (0..n).map(|i| x.get(i, j)).collect();
                let raw_mean = raw.iter().sum::<f64>() / n as f64;
                let raw_var = raw.iter().map(|v| (v - raw_mean).powi(2)).sum::<f64>() / n as f64;
                let col: Vec<f64> = (0..n).map(|i| t.normalized.get(i, j)).collect();
                let mean = col.iter().sum::<f64>() / n as f64;
                let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                assert!(mean.abs() < 1e-9);
                let expected = raw_var / (raw_var + arch.bn_epsilon);
                assert!((var - expected).abs() < 1e-9, "var {var} vs {expected}");
            }
        }
    }

    fn loss_at(p: &MilParams, x: &Matrix, label: FirLabel, w: &[f64]) -> f64 {
        hinge_loss(&forward(p, x).unwrap().scores, label, w).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let arch = small_arch();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = [0.7, 1.6, 0.9];
        for trial in 0..5 {
            let mut p = MilParams::init(&arch, trial).unwrap();
            jitter(&mut p, &mut rng, 0.3);
            let x = random_bag(5, 8, &mut rng);
            let label = FirLabel::ALL[trial as usize % 3];
            let trace = forward(&p, &x).unwrap();
            let (g, dx) = backward_with_inputs(&p, &trace, label, &w).unwrap();
            let h = 1e-5;
            let mut probe = p.clone();
            let n_tensors = p.tensors().len();
            for ti in 0..n_tensors {
                for k in 0..p.tensors()[ti].len() {
                    let orig = p.tensors()[ti][k];
                    probe.tensors_mut()[ti][k] = orig + h;
                    let up = loss_at(&probe, &x, label, &w);
                    probe.tensors_mut()[ti][k] = orig - h;
                    let down = loss_at(&probe, &x, label, &w);
                    probe.tensors_mut()[ti][k] = orig;
                    let fd = (up - down) / (2.0 * h);
                    let an = g.tensors()[ti][k];
                    assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "{} [{k}]: fd {fd} vs {an}", p.tensor_names()[ti]);
                }
            }
            for idx in 0..x.data.len() {
                let mut xp = x.clone();
                xp.data[idx] += h;
                let up = loss_at(&p, &xp, label, &w);
                xp.data[idx] -= 2.0 * h;
                let down = loss_at(&p, &xp, label, &w);
                let fd = (up - down) / (2.0 * h);
                assert!((fd - dx.data[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "input {idx}: {fd} vs {}", dx.data[idx]);
            }
        }
    }

    #[test]
    fn satisfied_margins_give_zero_gradient() {
        let arch = small_arch();
        let mut p = MilParams::init(&arch, 4).unwrap();
        p.cls_b = vec![5.0, -5.0, -5.0];
        for v in &mut p.cls_w.data {
            *v *= 0.01;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random_bag(6, 8, &mut rng);
        let t = forward(&p, &x).unwrap();
        assert_eq!(hinge_loss(&t.scores, FirLabel::Fir0, &[1.0; 3]).unwrap(), 0.0);
        let g = backward(&p, &t, FirLabel::Fir0, &[1.0; 3]).unwrap();
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn doubling_true_class_weight_doubles_gradients() {
        let arch = small_arch();
        let p = MilParams::init(&arch, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_bag(5, 8, &mut rng);
        let t = forward(&p, &x).unwrap();
        let g1 = backward(&p, &t, FirLabel::Fir1, &[1.0, 0.8, 1.3]).unwrap();
        let g2 = backward(&p, &t, FirLabel::Fir1, &[1.0, 1.6, 1.3]).unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (u, v) in a.iter().zip(b) {
                assert_eq!(2.0 * u, *v);
            }
        }
    }

    #[test]
    fn permutation_gives_identical_probabilities() {
        use rand::seq::SliceRandom;
        let p = MilParams::init(&small_arch(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_bag(9, 8, &mut rng);
        let mut perm: Vec<usize> = (0..9).collect();
        perm.shuffle(&mut rng);
        let xp = x.select_rows(&perm);
        let a = predict(&p, &x).unwrap();
        let b = predict(&p, &xp).unwrap();
        assert_eq!(a.probabilities, b.probabilities);
        for c in 0..3 {
            for (k, &src) in perm.iter().enumerate() {
                assert_eq!(b.attention[c][k], a.attention[c][src]);
            }
        }
    }

    #[test]
    fn duplicated_bag_halves_attention() {
        let p = MilParams::init(&small_arch(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_bag(6, 8, &mut rng);
        let mut rows: Vec<usize> = (0..6).collect();
        rows.extend(0..6);
        let doubled = x.select_rows(&rows);
        let a = predict(&p, &x).unwrap();
        let b = predict(&p, &doubled).unwrap();
        for (u, v) in a.probabilities.iter().zip(&b.probabilities) {
            assert!((u - v).abs() < 1e-12);
        }
        for c in 0..3 {
            assert!((b.attention[c].iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for i in 0..12 {
                assert!((b.attention[c][i] - a.attention[c][i % 6] / 2.0).abs() < 1e-12);
            }
        }
    }
}
