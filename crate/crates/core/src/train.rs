//! Backpropagation with boosting-like per-sample reweighting.
//!
//! The loss is the per-sample squared error E = (t - y)^2 / 2. The output
//! sensitivity is delta = S'(u) * (y - t) * alpha, where alpha is
//! `alpha_right` when the sample is classified correctly at threshold 0.5
//! (|y - t| < 0.5) and `alpha_wrong` otherwise: misclassified samples receive
//! larger updates, correctly classified ones smaller, which is what damps
//! late-training oscillation. With alpha_right = alpha_wrong = 1 every
//! trajectory is bitwise identical to plain backprop.
//!
//! Hidden layers follow the standard chain rule; S'(u) is recovered from the
//! stored activations as x*(1-x). Updates are per-sample online gradient
//! descent (w <- w - eta * dE/dw) in a seeded shuffle order.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::ChannelStack;
use crate::error::{Error, Result};
use crate::net::{ForwardTrace, NetConfig, Network, ParamId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Classification threshold separating "right" from "wrong" in the penalty
/// rule (and in held-out error).
pub const CLASSIFY_THRESHOLD: f64 = 0.5;

/// Finite-difference step used by the gradient checker.
pub const GRAD_CHECK_STEP: f64 = 1e-6;

/// Relative-error floor: components whose analytic and numeric gradients are
/// both below this magnitude are compared against the floor instead, keeping
/// f64 round-off noise out of the report.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyMode {
    /// The penalty applies per presentation and leaves no state behind.
    Stateless,
    /// Every sample carries a persistent weight, multiplied by the selected
    /// alpha at each presentation (clamped to [0.1, 10]) and renormalized to
    /// mean 1 at each epoch end.
    Cumulative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PenaltyConfig {
    /// Sensitivity multiplier for correctly classified samples.
    pub alpha_right: f64,
    /// Sensitivity multiplier for misclassified samples.
    pub alpha_wrong: f64,
    pub mode: PenaltyMode,
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        PenaltyConfig {
            alpha_right: 0.8,
            alpha_wrong: 1.2,
            mode: PenaltyMode::Stateless,
        }
    }
}

impl PenaltyConfig {
    pub fn neutral() -> Self {
        PenaltyConfig {
            alpha_right: 1.0,
            alpha_wrong: 1.0,
            mode: PenaltyMode::Stateless,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_right > 0.0) || !(self.alpha_wrong > 0.0) {
            return Err(Error::InvalidConfig(
                "penalty coefficients must be positive".into(),
            ));
        }
        if self.alpha_wrong < self.alpha_right {
            return Err(Error::InvalidConfig(format!(
                "alpha_wrong ({}) must be >= alpha_right ({}): wrong-classified \
                 updates grow, right-classified ones shrink",
                self.alpha_wrong, self.alpha_right
            )));
        }
        Ok(())
    }

    /// The alpha selected for a given (output, target) pair.
    pub fn select(&self, output: f64, target: f64) -> f64 {
        if (output - target).abs() < CLASSIFY_THRESHOLD {
            self.alpha_right
        } else {
            self.alpha_wrong
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainVariant {
    /// Boosting-like reweighted sensitivity.
    Boosted,
    /// Plain backprop; the penalty config is ignored.
    Baseline,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Learning rate.
    pub eta: f64,
    pub epochs: usize,
    pub seed: u64,
    pub penalty: PenaltyConfig,
    /// Reshuffle the presentation order each epoch.
    pub shuffle: bool,
    pub variant: TrainVariant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta: 0.05,
            epochs: 10,
            seed: 0,
            penalty: PenaltyConfig::default(),
            shuffle: true,
            variant: TrainVariant::Boosted,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig("eta must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        self.penalty.validate()
    }
}

/// A labeled training window.
#[derive(Debug, Clone)]
pub struct Sample {
    pub stack: ChannelStack,
    /// 0 (background) or 1 (pedestrian).
    pub target: f64,
    /// Persistent boosting weight; only consulted in cumulative mode.
    pub weight: f64,
}

impl Sample {
    pub fn new(stack: ChannelStack, target: f64) -> Result<Self> {
        if target != 0.0 && target != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "sample target must be exactly 0 or 1, got {target}"
            )));
        }
        Ok(Sample {
            stack,
            target,
            weight: 1.0,
        })
    }
}

/// Per-epoch training curves.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean of the per-presentation squared-error loss over each epoch.
    pub train_mse: Vec<f64>,
    /// Classification error on the held-out set after each epoch.
    pub heldout_error: Vec<f64>,
}

impl TrainReport {
    /// Standard deviation (population) of the held-out error over epochs
    /// `warmup..`, the stability score.
    pub fn stability(&self, warmup: usize) -> f64 {
        let tail = &self.heldout_error[warmup.min(self.heldout_error.len())..];
        assert!(!tail.is_empty(), "warmup leaves no epochs to score");
        let n = tail.len() as f64;
        let mean = tail.iter().sum::<f64>() / n;
        (tail.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
    }

    pub fn final_heldout_error(&self) -> f64 {
        *self.heldout_error.last().expect("at least one epoch")
    }
}

/// Squared-error loss of one sample: (t - y)^2 / 2.
pub fn loss(output: f64, target: f64) -> f64 {
    let d = target - output;
    0.5 * d * d
}

/// Plain output sensitivity: S'(u) * (y - t), with S'(u) = y * (1 - y).
pub fn baseline_delta(output: f64, _pre_act: f64, target: f64) -> f64 {
    output * (1.0 - output) * (output - target)
}

/// Boosting-like output sensitivity: the plain sensitivity scaled by the
/// penalty coefficient selected from the classification outcome.
pub fn output_delta(output: f64, pre_act: f64, target: f64, penalty: &PenaltyConfig) -> f64 {
    baseline_delta(output, pre_act, target) * penalty.select(output, target)
}

/// Cumulative-mode sensitivity: additionally scaled by the sample's
/// persistent weight. Returns (delta, selected alpha); the caller folds the
/// alpha into the persistent weight.
pub fn output_delta_weighted(
    output: f64,
    pre_act: f64,
    target: f64,
    penalty: &PenaltyConfig,
    weight: f64,
) -> (f64, f64) {
    let alpha = penalty.select(output, target);
    (
        baseline_delta(output, pre_act, target) * alpha * weight,
        alpha,
    )
}

/// Gradient of the loss for every network parameter; mirrors the parameter
/// layout of [`Network`].
#[derive(Debug, Clone)]
pub struct Gradients {
    pub c2_weights: Tensor,
    pub c2_bias: Tensor,
    pub s3_beta: Tensor,
    pub s3_bias: Tensor,
    pub c4_weights: Vec<Tensor>,
    pub c4_bias: Vec<Tensor>,
    pub fc_weights: Tensor,
    pub fc_bias: f64,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> f64 {
        match id {
            ParamId::C2Weight(i) => self.c2_weights.data()[i],
            ParamId::C2Bias(i) => self.c2_bias.data()[i],
            ParamId::S3Beta(i) => self.s3_beta.data()[i],
            ParamId::S3Bias(i) => self.s3_bias.data()[i],
            ParamId::C4Weight(e, i) => self.c4_weights[e].data()[i],
            ParamId::C4Bias(e, i) => self.c4_bias[e].data()[i],
            ParamId::FcWeight(i) => self.fc_weights.data()[i],
            ParamId::FcBias => self.fc_bias,
        }
    }
}

/// Backpropagate `delta_out` (the output-unit sensitivity) through the trace,
/// producing gradients for every parameter. The input layer receives no
/// gradient; nothing upstream of it is trainable.
pub fn backward(net: &Network, trace: &ForwardTrace, delta_out: f64) -> Result<Gradients> {
    let cfg = net.config();
    let (win_h, win_w) = cfg.window;
    let (ph, pw) = cfg.pooled();
    let pool_cells = ph * pw;
    let fc_in = cfg.fc_inputs();
    let g2 = cfg.c2_geometry();
    if trace.x2.shape() != [cfg.c2_maps, win_h, win_w]
        || trace.x3.shape() != [cfg.c2_maps, ph, pw]
        || trace.x4.len() != fc_in
        || trace.x4_entries.len() != cfg.c4_bank.len()
        || trace.input_cols.len() != g2.patch_len() * g2.cells()
    {
        return Err(Error::ShapeMismatch(
            "trace does not match the network configuration".into(),
        ));
    }

    // FC layer: dE/dw = x * delta, dE/db = delta.
    let fc_w_grad: Vec<f64> = trace.x4.iter().map(|&x| x * delta_out).collect();
    let fc_b_grad = delta_out;

    // C4 entries: per-unit sensitivity, then correlation-adjoint accumulation
    // into weight gradients and the x3 gradient.
    let x3 = trace.x3.data();
    let mut dx3 = vec![0.0f64; cfg.c2_maps * pool_cells];
    let mut c4_w_grads = Vec::with_capacity(cfg.c4_bank.len());
    let mut c4_b_grads = Vec::with_capacity(cfg.c4_bank.len());
    let mut offset = 0usize;
    for (e, entry) in cfg.c4_bank.iter().enumerate() {
        let (oh, ow) = cfg.entry_cells(entry);
        let cells = oh * ow;
        let x4e = trace.x4_entries[e].data();
        let weights = net.c4_weights()[e].data();
        let tap_len = cfg.c2_maps * entry.kh * entry.kw;
        let mut w_grad = vec![0.0f64; entry.count * tap_len];
        let mut b_grad = vec![0.0f64; entry.count];
        for f in 0..entry.count {
            for oi in 0..oh {
                for oj in 0..ow {
                    let unit = f * cells + oi * ow + oj;
                    let x = x4e[unit];
                    let delta =
                        net.fc_weights().data()[offset + unit] * delta_out * x * (1.0 - x);
                    if delta == 0.0 {
                        continue;
                    }
                    b_grad[f] += delta;
                    let wg = &mut w_grad[f * tap_len..(f + 1) * tap_len];
                    let wf = &weights[f * tap_len..(f + 1) * tap_len];
                    for c in 0..cfg.c2_maps {
                        for p in 0..entry.kh {
                            let base = (c * ph + oi + p) * pw + oj;
                            let x3_row = &x3[base..base + entry.kw];
                            let tap_row = (c * entry.kh + p) * entry.kw;
                            for (t, &v) in x3_row.iter().enumerate() {
                                wg[tap_row + t] += delta * v;
                            }
                            let wf_row = &wf[tap_row..tap_row + entry.kw];
                            let dx3_row = &mut dx3[base..base + entry.kw];
                            for (d, &w) in dx3_row.iter_mut().zip(wf_row) {
                                *d += delta * w;
                            }
                        }
                    }
                }
            }
        }
        c4_w_grads.push(Tensor::new(
            vec![entry.count, cfg.c2_maps, entry.kh, entry.kw],
            w_grad,
        )?);
        c4_b_grads.push(Tensor::new(vec![entry.count], b_grad)?);
        offset += entry.count * cells;
    }

    // S3: u3 = beta * pool_sum + bias. The sensitivity reaches beta through
    // the block sum and fans out uniformly over each pooling block.
    let pool_sum = trace.pool_sum.data();
    let mut s3_beta_grad = vec![0.0f64; cfg.c2_maps];
    let mut s3_bias_grad = vec![0.0f64; cfg.c2_maps];
    let x2 = trace.x2.data();
    let win_cells = win_h * win_w;
    let mut delta2 = vec![0.0f64; cfg.c2_maps * win_cells];
    let m = cfg.pool;
    for k in 0..cfg.c2_maps {
        let beta = net.s3_beta.data()[k];
        for oi in 0..ph {
            for oj in 0..pw {
                let cell = k * pool_cells + oi * pw + oj;
                let x = x3[cell];
                let delta3 = dx3[cell] * x * (1.0 - x);
                if delta3 == 0.0 {
                    continue;
                }
                s3_beta_grad[k] += delta3 * pool_sum[cell];
                s3_bias_grad[k] += delta3;
                let dx2_val = delta3 * beta;
                for di in 0..m {
                    let row = k * win_cells + (oi * m + di) * win_w + oj * m;
                    for v in &mut delta2[row..row + m] {
                        *v = dx2_val; // each block cell appears exactly once
                    }
                }
            }
        }
    }

    // delta2 = dx2 * S'(u2)
    for (d, &x) in delta2.iter_mut().zip(x2) {
        *d *= x * (1.0 - x);
    }

    // C2 weight gradients: delta2 [maps x cells] times the im2col matrix
    // transposed [cells x patch_len], the adjoint of the forward GEMM.
    let cells2 = g2.cells();
    let patch_len = g2.patch_len();
    let mut c2_w_grad = vec![0.0f64; cfg.c2_maps * patch_len];
    unsafe {
        matrixmultiply::dgemm(
            cfg.c2_maps,
            cells2,
            patch_len,
            1.0,
            delta2.as_ptr(),
            cells2 as isize,
            1,
            trace.input_cols.as_ptr(),
            1,
            cells2 as isize,
            0.0,
            c2_w_grad.as_mut_ptr(),
            patch_len as isize,
            1,
        );
    }
    let mut c2_b_grad = vec![0.0f64; cfg.c2_maps];
    for k in 0..cfg.c2_maps {
        c2_b_grad[k] = delta2[k * cells2..(k + 1) * cells2].iter().sum();
    }

    Ok(Gradients {
        c2_weights: Tensor::new(net.c2_weights().shape().to_vec(), c2_w_grad)?,
        c2_bias: Tensor::new(vec![cfg.c2_maps], c2_b_grad)?,
        s3_beta: Tensor::new(vec![cfg.c2_maps], s3_beta_grad)?,
        s3_bias: Tensor::new(vec![cfg.c2_maps], s3_bias_grad)?,
        c4_weights: c4_w_grads,
        c4_bias: c4_b_grads,
        fc_weights: Tensor::new(vec![fc_in], fc_w_grad)?,
        fc_bias: fc_b_grad,
    })
}

/// Delta-rule update: w <- w - eta * dE/dw for every parameter.
pub fn sgd_step(net: &mut Network, grads: &Gradients, eta: f64) {
    fn axpy(dst: &mut Tensor, src: &Tensor, eta: f64) {
        for (w, &g) in dst.data_mut().iter_mut().zip(src.data()) {
            *w -= eta * g;
        }
    }
    axpy(&mut net.c2_weights, &grads.c2_weights, eta);
    axpy(&mut net.c2_bias, &grads.c2_bias, eta);
    axpy(&mut net.s3_beta, &grads.s3_beta, eta);
    axpy(&mut net.s3_bias, &grads.s3_bias, eta);
    for (w, g) in net.c4_weights.iter_mut().zip(&grads.c4_weights) {
        axpy(w, g, eta);
    }
    for (b, g) in net.c4_bias.iter_mut().zip(&grads.c4_bias) {
        axpy(b, g, eta);
    }
    axpy(&mut net.fc_weights, &grads.fc_weights, eta);
    net.fc_bias -= eta * grads.fc_bias;
}

/// Fraction of samples misclassified at threshold 0.5 (a score of exactly 0.5
/// predicts the positive class).
pub fn classification_error(net: &Network, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut wrong = 0usize;
    for s in samples {
        let score = net.forward_score(&s.stack)?;
        let predicted = score >= CLASSIFY_THRESHOLD;
        if predicted != (s.target == 1.0) {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / samples.len() as f64)
}

/// Per-sample online SGD over a seeded shuffle order; fully deterministic
/// given (config, data, seed). In cumulative mode the samples' persistent
/// weights are updated in place.
pub fn train(
    net: &mut Network,
    train_set: &mut [Sample],
    heldout: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train_set.is_empty() || heldout.is_empty() {
        return Err(Error::InvalidArgument(
            "training and held-out sets must be nonempty".into(),
        ));
    }
    let mut rng = Rng::new(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut report = TrainReport {
        train_mse: Vec::with_capacity(cfg.epochs),
        heldout_error: Vec::with_capacity(cfg.epochs),
    };

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let mut loss_sum = 0.0;
        for &i in &order {
            let sample = &mut train_set[i];
            let (score, trace) = net.forward(&sample.stack)?;
            loss_sum += loss(score, sample.target);
            let delta = match cfg.variant {
                TrainVariant::Baseline => baseline_delta(score, trace.fc_pre_act, sample.target),
                TrainVariant::Boosted => match cfg.penalty.mode {
                    PenaltyMode::Stateless => {
                        output_delta(score, trace.fc_pre_act, sample.target, &cfg.penalty)
                    }
                    PenaltyMode::Cumulative => {
                        let (delta, alpha) = output_delta_weighted(
                            score,
                            trace.fc_pre_act,
                            sample.target,
                            &cfg.penalty,
                            sample.weight,
                        );
                        sample.weight = (sample.weight * alpha).clamp(0.1, 10.0);
                        delta
                    }
                },
            };
            let grads = backward(net, &trace, delta)?;
            sgd_step(net, &grads, cfg.eta);
        }
        let mse = loss_sum / train_set.len() as f64;
        if !mse.is_finite() || mse > 1e6 {
            return Err(Error::Diverged(format!(
                "epoch {epoch}: training MSE reached {mse}"
            )));
        }
        report.train_mse.push(mse);

        if cfg.variant == TrainVariant::Boosted && cfg.penalty.mode == PenaltyMode::Cumulative {
            // renormalize persistent weights to mean 1, then re-clamp
            let mean: f64 =
                train_set.iter().map(|s| s.weight).sum::<f64>() / train_set.len() as f64;
            for s in train_set.iter_mut() {
                s.weight = (s.weight / mean).clamp(0.1, 10.0);
            }
        }

        report.heldout_error.push(classification_error(net, heldout)?);
    }
    Ok(report)
}

/// Gradient-check report: worst relative error over the checked parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Description of the worst parameter, e.g. "c2.weights[1234]".
    pub worst_param: String,
}

fn describe(id: ParamId) -> String {
    match id {
        ParamId::C2Weight(i) => format!("c2.weights[{i}]"),
        ParamId::C2Bias(i) => format!("c2.bias[{i}]"),
        ParamId::S3Beta(i) => format!("s3.beta[{i}]"),
        ParamId::S3Bias(i) => format!("s3.bias[{i}]"),
        ParamId::C4Weight(e, i) => format!("c4.{e}.weights[{i}]"),
        ParamId::C4Bias(e, i) => format!("c4.{e}.bias[{i}]"),
        ParamId::FcWeight(i) => format!("fc.weights[{i}]"),
        ParamId::FcBias => "fc.bias".into(),
    }
}

/// Map a flat index over the combined C2+C4 parameter space to a ParamId.
fn conv_param_by_index(config: &NetConfig, mut idx: usize) -> ParamId {
    let k2 = config.c2_kernel * config.c2_kernel;
    let c2_w = config.c2_maps * config.input_maps * k2;
    if idx < c2_w {
        return ParamId::C2Weight(idx);
    }
    idx -= c2_w;
    if idx < config.c2_maps {
        return ParamId::C2Bias(idx);
    }
    idx -= config.c2_maps;
    for (e, entry) in config.c4_bank.iter().enumerate() {
        let w_len = entry.count * config.c2_maps * entry.kh * entry.kw;
        if idx < w_len {
            return ParamId::C4Weight(e, idx);
        }
        idx -= w_len;
        if idx < entry.count {
            return ParamId::C4Bias(e, idx);
        }
        idx -= entry.count;
    }
    unreachable!("index out of the conv parameter space")
}

/// Compare analytic gradients against central finite differences of the
/// (alpha-scaled) loss on a random net and random input: every FC and S3
/// parameter, plus `n_sampled` parameters drawn from the C2/C4 space.
pub fn gradient_check(
    config: &NetConfig,
    rng: &mut Rng,
    n_sampled: usize,
) -> Result<GradCheckReport> {
    gradient_check_with(config, &PenaltyConfig::default(), rng, n_sampled)
}

pub fn gradient_check_with(
    config: &NetConfig,
    penalty: &PenaltyConfig,
    rng: &mut Rng,
    n_sampled: usize,
) -> Result<GradCheckReport> {
    config.validate()?;
    penalty.validate()?;
    let net = Network::init(config.clone(), rng)?;
    let stack_len = config.input_maps * config.window.0 * config.window.1;
    let stack = ChannelStack::from_tensor(Tensor::new(
        vec![config.input_maps, config.window.0, config.window.1],
        (0..stack_len).map(|_| rng.uniform(-1.5, 1.5)).collect(),
    )?)?;
    let target = if rng.next_f64() < 0.5 { 0.0 } else { 1.0 };

    let (score, trace) = net.forward(&stack)?;
    // The alpha factor is frozen at the unperturbed output, so it scales the
    // loss by a constant and the finite differences stay consistent with the
    // penalized sensitivity.
    let alpha = penalty.select(score, target);
    let delta = output_delta(score, trace.fc_pre_act, target, penalty);
    let grads = backward(&net, &trace, delta)?;

    let mut ids: Vec<ParamId> = Vec::new();
    for i in 0..config.fc_inputs() {
        ids.push(ParamId::FcWeight(i));
    }
    ids.push(ParamId::FcBias);
    for i in 0..config.c2_maps {
        ids.push(ParamId::S3Beta(i));
        ids.push(ParamId::S3Bias(i));
    }
    let counts = config.param_counts();
    let conv_space = counts.c2 + counts.c4;
    for _ in 0..n_sampled {
        ids.push(conv_param_by_index(config, rng.below(conv_space)));
    }

    let errors: Vec<(f64, ParamId)> = ids
        .par_iter()
        .map_init(
            || net.clone(),
            |probe, &id| {
                let original = probe.param(id);
                *probe.param_mut(id) = original + GRAD_CHECK_STEP;
                let up = alpha * loss(probe.forward_score(&stack).unwrap(), target);
                *probe.param_mut(id) = original - GRAD_CHECK_STEP;
                let down = alpha * loss(probe.forward_score(&stack).unwrap(), target);
                *probe.param_mut(id) = original;
                let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
                let analytic = grads.param(id);
                let rel = (analytic - numeric).abs()
                    / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
                (rel, id)
            },
        )
        .collect();

    let (max_rel_error, worst) =
        errors
            .iter()
            .cloned()
            .fold((0.0f64, ParamId::FcBias), |acc, (rel, id)| {
                if rel > acc.0 {
                    (rel, id)
                } else {
                    acc
                }
            });
    Ok(GradCheckReport {
        max_rel_error,
        checked: errors.len(),
        worst_param: describe(worst),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model;
    use crate::net::C4Entry;

    fn tiny_config() -> NetConfig {
        NetConfig {
            window: (12, 8),
            input_maps: 3,
            c2_maps: 4,
            c2_kernel: 3,
            pool: 4,
            c4_bank: vec![
                C4Entry {
                    count: 2,
                    kh: 2,
                    kw: 2,
                },
                C4Entry {
                    count: 1,
                    kh: 3,
                    kw: 1,
                },
            ],
            fc_out: 1,
        }
    }

    fn random_stack_for(config: &NetConfig, seed: u64) -> ChannelStack {
        let mut rng = Rng::new(seed);
        let len = config.input_maps * config.window.0 * config.window.1;
        ChannelStack::from_tensor(
            Tensor::new(
                vec![config.input_maps, config.window.0, config.window.1],
                (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect(),
            )
            .unwrap(),
        )
        .unwrap()
    }

    fn tiny_samples(config: &NetConfig, n: usize, seed: u64) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                Sample::new(random_stack_for(config, seed + i as u64), (i % 2) as f64).unwrap()
            })
            .collect()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss(1.0, 1.0), 0.0);
        assert_eq!(loss(0.0, 1.0), 0.5);
        assert_eq!(loss(0.5, 0.0), 0.125);
    }

    #[test]
    fn output_delta_examples() {
        let penalty = PenaltyConfig::default();
        // correctly classified: |0.9 - 1| < 0.5, alpha_right = 0.8
        let d = output_delta(0.9, 0.0, 1.0, &penalty);
        assert!((d - (0.09 * (-0.1) * 0.8)).abs() < 1e-15);
        assert!((d + 0.0072).abs() < 1e-15);
        // misclassified: |0.9 - 0| >= 0.5, alpha_wrong = 1.2
        let d = output_delta(0.9, 0.0, 0.0, &penalty);
        assert!((d - 0.09 * 0.9 * 1.2).abs() < 1e-15);
        assert!((d - 0.0972).abs() < 1e-15);
    }

    #[test]
    fn neutral_penalty_equals_baseline_delta() {
        let neutral = PenaltyConfig::neutral();
        for &(y, t) in &[(0.3, 1.0), (0.9, 0.0), (0.5001, 1.0)] {
            assert_eq!(output_delta(y, 0.0, t, &neutral), baseline_delta(y, 0.0, t));
        }
    }

    #[test]
    fn penalty_monotonicity() {
        // For a fixed (output, target) the wrong-penalty magnitude strictly
        // dominates the right-penalty magnitude whenever alpha_wrong > alpha_right.
        let penalty = PenaltyConfig::default();
        for &(y, t) in &[(0.7, 0.0), (0.2, 1.0), (0.55, 0.0)] {
            let raw = baseline_delta(y, 0.0, t).abs();
            let with_wrong = raw * penalty.alpha_wrong;
            let with_right = raw * penalty.alpha_right;
            assert!(with_wrong > with_right);
        }
        // and the selected alpha matches the classification outcome
        assert_eq!(penalty.select(0.9, 1.0), penalty.alpha_right);
        assert_eq!(penalty.select(0.9, 0.0), penalty.alpha_wrong);
        assert_eq!(penalty.select(0.5, 1.0), penalty.alpha_wrong); // boundary
    }

    #[test]
    fn invalid_penalty_rejected() {
        let p = PenaltyConfig {
            alpha_right: 1.2,
            alpha_wrong: 0.8,
            mode: PenaltyMode::Stateless,
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn zero_delta_zero_gradients() {
        let net = Network::init(tiny_config(), &mut Rng::new(1)).unwrap();
        let stack = random_stack_for(net.config(), 2);
        let (_, trace) = net.forward(&stack).unwrap();
        let grads = backward(&net, &trace, 0.0).unwrap();
        assert!(grads.c2_weights.iter().all(|&g| g == 0.0));
        assert!(grads.s3_beta.iter().all(|&g| g == 0.0));
        assert!(grads.fc_weights.iter().all(|&g| g == 0.0));
        assert_eq!(grads.fc_bias, 0.0);
    }

    #[test]
    fn zero_fc_input_gives_bias_only_gradient() {
        // A hand-built trace with x4 = 0 forces zero FC weight gradients while
        // the bias still receives the full sensitivity.
        let net = Network::init(tiny_config(), &mut Rng::new(3)).unwrap();
        let stack = random_stack_for(net.config(), 4);
        let (_, mut trace) = net.forward(&stack).unwrap();
        for x in &mut trace.x4 {
            *x = 0.0;
        }
        for e in &mut trace.x4_entries {
            for v in e.data_mut() {
                *v = 0.0;
            }
        }
        let delta = 0.37;
        let grads = backward(&net, &trace, delta).unwrap();
        assert!(grads.fc_weights.iter().all(|&g| g == 0.0));
        assert_eq!(grads.fc_bias, delta);
    }

    #[test]
    fn sgd_examples() {
        let mut net = Network::init(tiny_config(), &mut Rng::new(5)).unwrap();
        let stack = random_stack_for(net.config(), 6);
        let (_, trace) = net.forward(&stack).unwrap();
        let zero = backward(&net, &trace, 0.0).unwrap();
        let before = net.clone();
        sgd_step(&mut net, &zero, 0.5);
        assert_eq!(net, before);

        let grads = backward(&net, &trace, 0.2).unwrap();
        sgd_step(&mut net, &grads, 0.0);
        assert_eq!(net, before);

        // scalar arithmetic: w' = w - eta * g
        let w0 = net.fc_bias();
        let mut g = backward(&net, &trace, 0.0).unwrap();
        g.fc_bias = 0.5;
        sgd_step(&mut net, &g, 0.1);
        assert!((net.fc_bias() - (w0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = Rng::new(40);
        let report = gradient_check(&tiny_config(), &mut rng, 120).unwrap();
        assert!(
            report.max_rel_error <= 1e-4,
            "max rel error {} at {}",
            report.max_rel_error,
            report.worst_param
        );
        assert!(report.checked >= 120);
    }

    #[test]
    fn gradient_check_with_large_wrong_penalty() {
        let penalty = PenaltyConfig {
            alpha_right: 0.8,
            alpha_wrong: 5.0,
            mode: PenaltyMode::Stateless,
        };
        let mut rng = Rng::new(41);
        let report = gradient_check_with(&tiny_config(), &penalty, &mut rng, 80).unwrap();
        assert!(
            report.max_rel_error <= 1e-4,
            "max rel error {} at {}",
            report.max_rel_error,
            report.worst_param
        );
    }

    #[test]
    fn corrupted_gradient_reports_order_two() {
        // A sign-flipped analytic gradient must show up as relative error ~2.
        let config = tiny_config();
        let mut rng = Rng::new(42);
        let net = Network::init(config.clone(), &mut rng).unwrap();
        let stack = random_stack_for(&config, 43);
        let target = 1.0;
        let (score, trace) = net.forward(&stack).unwrap();
        let delta = baseline_delta(score, trace.fc_pre_act, target);
        let grads = backward(&net, &trace, delta).unwrap();

        let id = ParamId::FcWeight(0);
        let mut probe = net.clone();
        let orig = probe.param(id);
        *probe.param_mut(id) = orig + GRAD_CHECK_STEP;
        let up = loss(probe.forward_score(&stack).unwrap(), target);
        *probe.param_mut(id) = orig - GRAD_CHECK_STEP;
        let down = loss(probe.forward_score(&stack).unwrap(), target);
        let numeric = (up - down) / (2.0 * GRAD_CHECK_STEP);
        let flipped = -grads.param(id);
        let rel =
            (flipped - numeric).abs() / flipped.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        assert!(
            numeric.abs() > GRAD_CHECK_FLOOR && (rel - 2.0).abs() < 0.05,
            "rel {rel} (numeric {numeric})"
        );
    }

    #[test]
    fn single_sample_loss_decreases() {
        let config = tiny_config();
        let mut net = Network::init(config.clone(), &mut Rng::new(7)).unwrap();
        let mut samples = tiny_samples(&config, 1, 100);
        samples[0].target = 1.0;
        let heldout = tiny_samples(&config, 2, 200);
        let before = loss(net.forward_score(&samples[0].stack).unwrap(), 1.0);
        let cfg = TrainConfig {
            eta: 0.01,
            epochs: 1,
            ..TrainConfig::default()
        };
        train(&mut net, &mut samples, &heldout, &cfg).unwrap();
        let after = loss(net.forward_score(&samples[0].stack).unwrap(), 1.0);
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn neutral_alpha_is_bitwise_baseline() {
        let config = tiny_config();
        let heldout = tiny_samples(&config, 4, 300);

        let mut net_a = Network::init(config.clone(), &mut Rng::new(9)).unwrap();
        let mut samples_a = tiny_samples(&config, 6, 400);
        let neutral_cfg = TrainConfig {
            epochs: 3,
            seed: 77,
            penalty: PenaltyConfig::neutral(),
            variant: TrainVariant::Boosted,
            ..TrainConfig::default()
        };
        let report_a = train(&mut net_a, &mut samples_a, &heldout, &neutral_cfg).unwrap();

        let mut net_b = Network::init(config.clone(), &mut Rng::new(9)).unwrap();
        let mut samples_b = tiny_samples(&config, 6, 400);
        let baseline_cfg = TrainConfig {
            variant: TrainVariant::Baseline,
            ..neutral_cfg
        };
        let report_b = train(&mut net_b, &mut samples_b, &heldout, &baseline_cfg).unwrap();

        assert_eq!(model::digest(&net_a), model::digest(&net_b));
        assert_eq!(report_a, report_b);
    }

    #[test]
    fn training_is_deterministic() {
        let config = tiny_config();
        let heldout = tiny_samples(&config, 4, 500);
        let cfg = TrainConfig {
            epochs: 3,
            seed: 21,
            ..TrainConfig::default()
        };
        let mut digests = Vec::new();
        let mut reports = Vec::new();
        for _ in 0..2 {
            let mut net = Network::init(config.clone(), &mut Rng::new(10)).unwrap();
            let mut samples = tiny_samples(&config, 6, 600);
            reports.push(train(&mut net, &mut samples, &heldout, &cfg).unwrap());
            digests.push(model::digest(&net));
        }
        assert_eq!(digests[0], digests[1]);
        assert_eq!(reports[0], reports[1]);
    }

    #[test]
    fn cumulative_weights_stay_bounded_and_centered() {
        let config = tiny_config();
        let mut net = Network::init(config.clone(), &mut Rng::new(11)).unwrap();
        let mut samples = tiny_samples(&config, 8, 700);
        let heldout = tiny_samples(&config, 4, 800);
        let cfg = TrainConfig {
            epochs: 4,
            penalty: PenaltyConfig {
                alpha_right: 0.8,
                alpha_wrong: 1.2,
                mode: PenaltyMode::Cumulative,
            },
            ..TrainConfig::default()
        };
        train(&mut net, &mut samples, &heldout, &cfg).unwrap();
        let mean: f64 = samples.iter().map(|s| s.weight).sum::<f64>() / samples.len() as f64;
        for s in &samples {
            assert!((0.1..=10.0).contains(&s.weight), "weight {}", s.weight);
        }
        assert!((mean - 1.0).abs() < 1e-9, "mean {mean}");
    }

    #[test]
    fn empty_sets_rejected() {
        let config = tiny_config();
        let mut net = Network::init(config.clone(), &mut Rng::new(1)).unwrap();
        let mut samples = tiny_samples(&config, 2, 900);
        let heldout = tiny_samples(&config, 2, 950);
        let cfg = TrainConfig::default();
        assert!(train(&mut net, &mut [], &heldout, &cfg).is_err());
        assert!(train(&mut net, &mut samples, &[], &cfg).is_err());
    }

    #[test]
    fn report_stability_is_population_std() {
        let report = TrainReport {
            train_mse: vec![0.0; 4],
            heldout_error: vec![0.5, 0.1, 0.2, 0.3],
        };
        // tail after warmup 1: [0.1, 0.2, 0.3], mean 0.2
        let expected = (((0.1f64 - 0.2).powi(2) + 0.0 + (0.3f64 - 0.2).powi(2)) / 3.0).sqrt();
        assert!((report.stability(1) - expected).abs() < 1e-15);
        assert_eq!(report.final_heldout_error(), 0.3);
    }

    #[test]
    fn target_must_be_binary() {
        let config = tiny_config();
        let stack = random_stack_for(&config, 1);
        assert!(Sample::new(stack.clone(), 0.5).is_err());
        assert!(Sample::new(stack, 1.0).is_ok());
    }
}
