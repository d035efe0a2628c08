//! The detection network: a 10-plane channel stack feeds a same-padded 9x9
//! convolution to 64 maps (C2), a 4x4 block-sum pooling stage with one
//! trainable scale and bias per map (S3), a bank of valid convolutions with
//! mixed kernel sizes (C4) concatenated into the fully connected input, and a
//! single sigmoid output unit. The logistic sigmoid is the activation after
//! every stage.

use serde::{Deserialize, Serialize};

use crate::channels::ChannelStack;
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom, Padding};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One C4 bank entry: `count` filters of size `kh` x `kw`, each spanning all
/// C2 maps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct C4Entry {
    pub count: usize,
    pub kh: usize,
    pub kw: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    /// Input window (height, width).
    pub window: (usize, usize),
    /// Channel planes in the input stack.
    pub input_maps: usize,
    /// C2 output maps.
    pub c2_maps: usize,
    /// C2 kernel side; odd, because C2 uses same padding.
    pub c2_kernel: usize,
    /// S3 pooling block side.
    pub pool: usize,
    /// C4 filter bank. The default reproduces 20 filters and 565
    /// fully-connected inputs: 15*(7*4) + 4*(7*5) + 1*(5*1).
    pub c4_bank: Vec<C4Entry>,
    /// Output units; the classifier is a single sigmoid unit.
    pub fc_out: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            window: (84, 28),
            input_maps: 10,
            c2_maps: 64,
            c2_kernel: 9,
            pool: 4,
            c4_bank: vec![
                C4Entry {
                    count: 15,
                    kh: 15,
                    kw: 4,
                },
                C4Entry {
                    count: 4,
                    kh: 15,
                    kw: 3,
                },
                C4Entry {
                    count: 1,
                    kh: 17,
                    kw: 7,
                },
            ],
            fc_out: 1,
        }
    }
}

/// Per-layer parameter tallies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCounts {
    pub c2: usize,
    pub s3: usize,
    pub c4: usize,
    pub fc: usize,
}

impl ParamCounts {
    pub fn total(&self) -> usize {
        self.c2 + self.s3 + self.c4 + self.fc
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.window.0 == 0 || self.window.1 == 0 {
            return fail("window dimensions must be positive".into());
        }
        if self.input_maps == 0 {
            return fail("input_maps must be positive".into());
        }
        if self.c2_maps == 0 {
            return fail("c2_maps must be positive".into());
        }
        if self.c2_kernel == 0 || self.c2_kernel % 2 == 0 {
            return fail(format!(
                "c2_kernel must be odd for same padding, got {}",
                self.c2_kernel
            ));
        }
        if self.pool == 0 || self.window.0 % self.pool != 0 || self.window.1 % self.pool != 0 {
            return fail(format!(
                "pool {} must divide the window {}x{}",
                self.pool, self.window.0, self.window.1
            ));
        }
        if self.c4_bank.is_empty() {
            return fail("c4_bank must not be empty".into());
        }
        let (ph, pw) = self.pooled();
        for (i, e) in self.c4_bank.iter().enumerate() {
            if e.count == 0 {
                return fail(format!("c4_bank[{i}].count must be positive"));
            }
            if e.kh == 0 || e.kh > ph || e.kw == 0 || e.kw > pw {
                return fail(format!(
                    "c4_bank[{i}] kernel {}x{} must fit the pooled maps {ph}x{pw}",
                    e.kh, e.kw
                ));
            }
        }
        if self.fc_out != 1 {
            return fail(format!(
                "fc_out must be 1 (single sigmoid classifier), got {}",
                self.fc_out
            ));
        }
        Ok(())
    }

    /// Post-pooling map size.
    pub fn pooled(&self) -> (usize, usize) {
        (self.window.0 / self.pool, self.window.1 / self.pool)
    }

    /// Output cells of one C4 bank entry.
    pub fn entry_cells(&self, e: &C4Entry) -> (usize, usize) {
        let (ph, pw) = self.pooled();
        (ph - e.kh + 1, pw - e.kw + 1)
    }

    /// Length of the concatenated fully-connected input (565 by default).
    pub fn fc_inputs(&self) -> usize {
        self.c4_bank
            .iter()
            .map(|e| {
                let (oh, ow) = self.entry_cells(e);
                e.count * oh * ow
            })
            .sum()
    }

    /// Total number of C4 filters (20 by default).
    pub fn bank_filters(&self) -> usize {
        self.c4_bank.iter().map(|e| e.count).sum()
    }

    /// Exact parameter counts by layer: one bias per C2/C4 output map, a
    /// scale and a bias per pooled map, and the fully connected unit.
    pub fn param_counts(&self) -> ParamCounts {
        let k2 = self.c2_kernel * self.c2_kernel;
        ParamCounts {
            c2: (self.input_maps * k2 + 1) * self.c2_maps,
            s3: 2 * self.c2_maps,
            c4: self
                .c4_bank
                .iter()
                .map(|e| e.count * (self.c2_maps * e.kh * e.kw + 1))
                .sum(),
            fc: self.fc_inputs() + 1,
        }
    }

    pub(crate) fn c2_geometry(&self) -> ConvGeom {
        ops::conv_geometry(
            &[self.input_maps, self.window.0, self.window.1],
            &[self.c2_maps, self.input_maps, self.c2_kernel, self.c2_kernel],
            self.c2_maps,
            Padding::Same,
        )
        .expect("validated config")
    }
}

/// Full parameter set of the network.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub(crate) config: NetConfig,
    pub(crate) c2_weights: Tensor,
    pub(crate) c2_bias: Tensor,
    pub(crate) s3_beta: Tensor,
    pub(crate) s3_bias: Tensor,
    pub(crate) c4_weights: Vec<Tensor>,
    pub(crate) c4_bias: Vec<Tensor>,
    pub(crate) fc_weights: Tensor,
    pub(crate) fc_bias: f64,
}

/// Addresses a single scalar parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamId {
    C2Weight(usize),
    C2Bias(usize),
    S3Beta(usize),
    S3Bias(usize),
    /// (bank entry, flat index within the entry's weight tensor)
    C4Weight(usize, usize),
    C4Bias(usize, usize),
    FcWeight(usize),
    FcBias,
}

/// Per-layer activations retained by a traced forward pass; sigmoid
/// derivatives are recovered as x*(1-x), so activations are what backprop
/// needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// im2col matrix of the input stack under C2's same-padding geometry.
    pub input_cols: Vec<f64>,
    /// C2 activations [c2_maps, H, W].
    pub x2: Tensor,
    /// S3 block sums before scale/bias [c2_maps, H/m, W/m].
    pub pool_sum: Tensor,
    /// S3 activations.
    pub x3: Tensor,
    /// C4 activations per bank entry.
    pub x4_entries: Vec<Tensor>,
    /// Concatenated fully-connected input.
    pub x4: Vec<f64>,
    /// Output unit pre-activation.
    pub fc_pre_act: f64,
    /// Sigmoid output score.
    pub score: f64,
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn sigmoid_inplace(xs: &mut [f64]) {
    for v in xs {
        *v = sigmoid(*v);
    }
}

impl Network {
    /// Initialize with uniform weights in +-sqrt(6/(fan_in+fan_out)) per
    /// layer, zero biases, and pooling scales at 1/pool^2 (a true block mean).
    ///
    /// Draw order is fixed: C2 weights row-major, then each bank entry's
    /// weights, then the fully connected weights.
    pub fn init(config: NetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let k2 = config.c2_kernel * config.c2_kernel;
        let draw = |rng: &mut Rng, n: usize, fan_in: usize, fan_out: usize| -> Vec<f64> {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..n).map(|_| rng.uniform(-bound, bound)).collect()
        };

        let c2_len = config.c2_maps * config.input_maps * k2;
        let c2_weights = Tensor::new(
            vec![
                config.c2_maps,
                config.input_maps,
                config.c2_kernel,
                config.c2_kernel,
            ],
            draw(rng, c2_len, config.input_maps * k2, config.c2_maps * k2),
        )?;

        let mut c4_weights = Vec::new();
        let mut c4_bias = Vec::new();
        for e in &config.c4_bank {
            let len = e.count * config.c2_maps * e.kh * e.kw;
            c4_weights.push(Tensor::new(
                vec![e.count, config.c2_maps, e.kh, e.kw],
                draw(rng, len, config.c2_maps * e.kh * e.kw, e.count * e.kh * e.kw),
            )?);
            c4_bias.push(Tensor::zeros(vec![e.count]));
        }

        let fc_in = config.fc_inputs();
        let fc_weights = Tensor::new(vec![fc_in], draw(rng, fc_in, fc_in, 1))?;

        Ok(Network {
            c2_bias: Tensor::zeros(vec![config.c2_maps]),
            s3_beta: Tensor::full(
                vec![config.c2_maps],
                1.0 / (config.pool * config.pool) as f64,
            ),
            s3_bias: Tensor::zeros(vec![config.c2_maps]),
            fc_bias: 0.0,
            c2_weights,
            c4_weights,
            c4_bias,
            fc_weights,
            config,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn c2_weights(&self) -> &Tensor {
        &self.c2_weights
    }

    pub fn c4_weights(&self) -> &[Tensor] {
        &self.c4_weights
    }

    pub fn fc_weights(&self) -> &Tensor {
        &self.fc_weights
    }

    pub fn fc_bias(&self) -> f64 {
        self.fc_bias
    }

    pub fn set_fc_bias(&mut self, b: f64) {
        self.fc_bias = b;
    }

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

    pub fn param_mut(&mut self, id: ParamId) -> &mut f64 {
        match id {
            ParamId::C2Weight(i) => &mut self.c2_weights.data_mut()[i],
            ParamId::C2Bias(i) => &mut self.c2_bias.data_mut()[i],
            ParamId::S3Beta(i) => &mut self.s3_beta.data_mut()[i],
            ParamId::S3Bias(i) => &mut self.s3_bias.data_mut()[i],
            ParamId::C4Weight(e, i) => &mut self.c4_weights[e].data_mut()[i],
            ParamId::C4Bias(e, i) => &mut self.c4_bias[e].data_mut()[i],
            ParamId::FcWeight(i) => &mut self.fc_weights.data_mut()[i],
            ParamId::FcBias => &mut self.fc_bias,
        }
    }

    fn check_stack(&self, stack: &ChannelStack) -> Result<()> {
        let (h, w) = stack.window();
        if stack.channels() != self.config.input_maps || (h, w) != self.config.window {
            return Err(Error::ShapeMismatch(format!(
                "stack {:?} does not match network input [{},{},{}]",
                stack.tensor().shape(),
                self.config.input_maps,
                self.config.window.0,
                self.config.window.1
            )));
        }
        Ok(())
    }

    /// Forward pass retaining the per-layer activations needed by backprop.
    pub fn forward(&self, stack: &ChannelStack) -> Result<(f64, ForwardTrace)> {
        self.check_stack(stack)?;
        let g2 = self.config.c2_geometry();
        let mut cols = Vec::new();
        ops::im2col_into(stack.tensor().data(), &g2, &mut cols);
        let (score, trace) = self.forward_from_cols(cols, &g2)?;
        Ok((score, trace))
    }

    /// Forward pass without trace retention; the im2col scratch buffer is
    /// reused per thread.
    pub fn forward_score(&self, stack: &ChannelStack) -> Result<f64> {
        thread_local! {
            static SCRATCH: std::cell::RefCell<Vec<f64>> = const { std::cell::RefCell::new(Vec::new()) };
        }
        self.check_stack(stack)?;
        let g2 = self.config.c2_geometry();
        SCRATCH.with(|scratch| {
            let mut cols = scratch.borrow_mut();
            ops::im2col_into(stack.tensor().data(), &g2, &mut cols);
            let (score, _) = self.forward_from_cols_ref(&cols, &g2)?;
            Ok(score)
        })
    }

    fn forward_from_cols(&self, cols: Vec<f64>, g2: &ConvGeom) -> Result<(f64, ForwardTrace)> {
        let (score, parts) = self.forward_from_cols_ref(&cols, g2)?;
        let parts = parts.expect("trace requested");
        Ok((
            score,
            ForwardTrace {
                input_cols: cols,
                x2: parts.0,
                pool_sum: parts.1,
                x3: parts.2,
                x4_entries: parts.3,
                x4: parts.4,
                fc_pre_act: parts.5,
                score,
            },
        ))
    }

    #[allow(clippy::type_complexity)]
    fn forward_from_cols_ref(
        &self,
        cols: &[f64],
        g2: &ConvGeom,
    ) -> Result<(f64, Option<(Tensor, Tensor, Tensor, Vec<Tensor>, Vec<f64>, f64)>)> {
        let cfg = &self.config;

        // C2: same-padded convolution, sigmoid
        let mut x2_data = ops::conv_gemm(self.c2_weights.data(), self.c2_bias.data(), cols, g2);
        sigmoid_inplace(&mut x2_data);
        let x2 = Tensor::new(vec![cfg.c2_maps, cfg.window.0, cfg.window.1], x2_data)?;

        // S3: block sum, trainable scale and bias per map, sigmoid
        let pool_sum = ops::meanpool2d(&x2, cfg.pool)?;
        let (ph, pw) = cfg.pooled();
        let cells = ph * pw;
        let mut x3_data = vec![0.0f64; cfg.c2_maps * cells];
        for m in 0..cfg.c2_maps {
            let beta = self.s3_beta.data()[m];
            let bias = self.s3_bias.data()[m];
            let src = &pool_sum.data()[m * cells..(m + 1) * cells];
            let dst = &mut x3_data[m * cells..(m + 1) * cells];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = sigmoid(beta * s + bias);
            }
        }
        let x3 = Tensor::new(vec![cfg.c2_maps, ph, pw], x3_data)?;

        // C4: valid convolutions per bank entry, sigmoid, concatenate
        let mut x4 = Vec::with_capacity(cfg.fc_inputs());
        let mut x4_entries = Vec::with_capacity(cfg.c4_bank.len());
        for (w, b) in self.c4_weights.iter().zip(&self.c4_bias) {
            let mut out = ops::conv2d(&x3, w, b, Padding::Valid)?;
            sigmoid_inplace(out.data_mut());
            x4.extend_from_slice(out.data());
            x4_entries.push(out);
        }

        // FC: single sigmoid unit
        let mut pre = self.fc_bias;
        for (w, x) in self.fc_weights.iter().zip(&x4) {
            pre += w * x;
        }
        let score = sigmoid(pre);
        Ok((score, Some((x2, pool_sum, x3, x4_entries, x4, pre))))
    }
}
