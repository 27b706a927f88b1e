//! Assembly of the encoder grid `{bidepth, deepshallow, shallowdeep, none} × {csac, convlstm}`.

use crate::bidepth::{
    bidepth_forward, make_schedule, stack_param_count, Branches, DepthSchedule, SharedStack,
};
use crate::error::{Error, Result};
use crate::nn::{conv_param_count, Binder, Parameterized};
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};
use crate::timeseries::{
    convlstm_forward, convlstm_param_count, csac_forward_newest, csac_param_count, predict_head,
    ConvLstmParams, CsacOptions, CsacParams, EncoderOutput, HeadParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    Bidepth,
    Deepshallow,
    Shallowdeep,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TsEncoder {
    Csac,
    Convlstm,
}

impl EncoderVariant {
    pub const ALL: [EncoderVariant; 4] = [
        Self::Bidepth,
        Self::Deepshallow,
        Self::Shallowdeep,
        Self::None,
    ];

    fn branches(self) -> Option<Branches> {
        match self {
            Self::Bidepth => Some(Branches::Both),
            Self::Deepshallow => Some(Branches::DeepShallow),
            Self::Shallowdeep => Some(Branches::ShallowDeep),
            Self::None => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Bidepth => "bidepth",
            Self::Deepshallow => "deepshallow",
            Self::Shallowdeep => "shallowdeep",
            Self::None => "none",
        }
    }
}

impl TsEncoder {
    pub const ALL: [TsEncoder; 2] = [Self::Csac, Self::Convlstm];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Csac => "csac",
            Self::Convlstm => "convlstm",
        }
    }
}

impl FromStr for EncoderVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::usage(format!("unknown encoder variant {s:?}")))
    }
}

impl FromStr for TsEncoder {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::usage(format!("unknown time-series encoder {s:?}")))
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl fmt::Display for TsEncoder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

fn default_kernel() -> usize {
    3
}

fn default_c_h() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_variant: EncoderVariant,
    pub ts_encoder: TsEncoder,
    /// Initial maximum depth `L` of the shared stack.
    pub depth: usize,
    /// Window size `n`.
    pub window: usize,
    pub c_in: usize,
    #[serde(default = "default_c_h")]
    pub c_h: usize,
    pub c_out: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    /// Kernel of the Q/K/V convolutions; defaults to `kernel`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qkv_kernel: Option<usize>,
    /// ConvLSTM hidden width; defaults to `2·c_h`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_hid: Option<usize>,
    /// Scale attention scores by `1/sqrt(c·h·w)`.
    #[serde(default)]
    pub attn_scale: bool,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("depth", self.depth),
            ("window", self.window),
            ("c_in", self.c_in),
            ("c_h", self.c_h),
            ("c_out", self.c_out),
            ("height", self.height),
            ("width", self.width),
            ("kernel", self.kernel),
            ("qkv_kernel", self.qkv_kernel()),
            ("c_hid", self.c_hid()),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::usage(format!(
                "model config field {name} must be >= 1"
            )));
        }
        if self.kernel.is_multiple_of(2) || self.qkv_kernel().is_multiple_of(2) {
            return Err(Error::usage("kernel extents must be odd"));
        }
        Ok(())
    }

    pub fn qkv_kernel(&self) -> usize {
        self.qkv_kernel.unwrap_or(self.kernel)
    }

    pub fn c_hid(&self) -> usize {
        self.c_hid.unwrap_or(2 * self.c_h)
    }

    /// Channels entering the time-series encoder.
    pub fn encoder_channels(&self) -> usize {
        match self.encoder_variant {
            EncoderVariant::Bidepth => 2 * self.c_h,
            EncoderVariant::Deepshallow | EncoderVariant::Shallowdeep => self.c_h,
            EncoderVariant::None => self.c_in,
        }
    }

    /// Short label such as `bidepth+csac`.
    pub fn label(&self) -> String {
        format!("{}+{}", self.encoder_variant, self.ts_encoder)
    }
}

/// Closed-form parameter count of the model described by `cfg`.
pub fn param_count_formula(cfg: &ModelConfig) -> usize {
    let k = cfg.kernel;
    let stack = match cfg.encoder_variant {
        EncoderVariant::None => 0,
        _ => stack_param_count(cfg.c_in, cfg.c_h, cfg.depth, k),
    };
    let c = cfg.encoder_channels();
    let (temporal, head_in) = match cfg.ts_encoder {
        TsEncoder::Csac => (csac_param_count(c, cfg.qkv_kernel(), k), c),
        TsEncoder::Convlstm => (convlstm_param_count(c, cfg.c_hid(), k), cfg.c_hid()),
    };
    stack + temporal + conv_param_count(head_in, cfg.c_out, k)
}

#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum TemporalParams {
    Csac(CsacParams),
    ConvLstm(ConvLstmParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub stack: Option<SharedStack>,
    pub temporal: TemporalParams,
    pub head: HeadParams,
}

impl Parameterized for ModelParams {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(stack) = &self.stack {
            stack.visit_params(&format!("{prefix}stack."), f);
        }
        match &self.temporal {
            TemporalParams::Csac(p) => p.visit_params(&format!("{prefix}csac."), f),
            TemporalParams::ConvLstm(p) => p.visit_params(&format!("{prefix}convlstm."), f),
        }
        self.head.visit_params(&format!("{prefix}head."), f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        if let Some(stack) = &mut self.stack {
            stack.visit_params_mut(f);
        }
        match &mut self.temporal {
            TemporalParams::Csac(p) => p.visit_params_mut(f),
            TemporalParams::ConvLstm(p) => p.visit_params_mut(f),
        }
        self.head.visit_params_mut(f);
    }
}

/// Deterministically initializes every parameter from `cfg.seed`.
pub fn build(cfg: &ModelConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let stack = match cfg.encoder_variant {
        EncoderVariant::None => None,
        _ => Some(SharedStack::init(
            cfg.c_in, cfg.c_h, cfg.depth, cfg.kernel, &mut rng,
        )?),
    };
    let c = cfg.encoder_channels();
    let (temporal, head_in) = match cfg.ts_encoder {
        TsEncoder::Csac => (
            TemporalParams::Csac(CsacParams::init(c, cfg.qkv_kernel(), cfg.kernel, &mut rng)?),
            c,
        ),
        TsEncoder::Convlstm => (
            TemporalParams::ConvLstm(ConvLstmParams::init(c, cfg.c_hid(), cfg.kernel, &mut rng)?),
            cfg.c_hid(),
        ),
    };
    let head = HeadParams::init(head_in, cfg.c_out, cfg.kernel, &mut rng)?;
    Ok(ModelParams {
        stack,
        temporal,
        head,
    })
}

/// A model bound onto a tape for one forward (and possibly backward) pass.
pub struct BoundModel {
    /// Parameter handles in [`Parameterized::visit_params`] order.
    pub params: Vec<Var>,
    stack: Option<crate::bidepth::StackVars>,
    temporal: BoundTemporal,
    head: crate::nn::ConvVars,
    schedule: DepthSchedule,
}

enum BoundTemporal {
    Csac(crate::timeseries::CsacVars),
    ConvLstm(crate::timeseries::ConvLstmVars),
}

impl ModelParams {
    pub fn bind(&self, cfg: &ModelConfig, mut binder: Binder<'_>) -> Result<BoundModel> {
        let stack = self.stack.as_ref().map(|s| s.bind(&mut binder));
        let temporal = match &self.temporal {
            TemporalParams::Csac(p) => BoundTemporal::Csac(p.bind(&mut binder)),
            TemporalParams::ConvLstm(p) => BoundTemporal::ConvLstm(p.bind(&mut binder)),
        };
        let head = self.head.bind(&mut binder);
        Ok(BoundModel {
            params: binder.finish(),
            stack,
            temporal,
            head,
            schedule: make_schedule(cfg.depth, cfg.window)?,
        })
    }
}

impl BoundModel {
    /// `[b, n, c_in, h, w] -> [b, c_out, h, w]`.
    pub fn forward(&self, tape: &mut Tape, cfg: &ModelConfig, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let expect = [cfg.window, cfg.c_in, cfg.height, cfg.width];
        if s.len() != 5 || s[1..] != expect {
            return Err(Error::dim(
                "model forward",
                format!(
                    "input {s:?} does not match [b, {}, {}, {}, {}]",
                    expect[0], expect[1], expect[2], expect[3]
                ),
            ));
        }
        let encoded = match (cfg.encoder_variant.branches(), &self.stack) {
            (Some(branches), Some(stack)) => {
                bidepth_forward(tape, stack, &self.schedule, x, branches)?
            }
            (None, _) => x,
            (Some(_), None) => return Err(Error::usage("encoder variant needs a shared stack")),
        };
        let enc = match &self.temporal {
            BoundTemporal::Csac(p) => {
                let opts = CsacOptions {
                    scaled: cfg.attn_scale,
                    identity_attention: false,
                };
                EncoderOutput::Sequence(csac_forward_newest(tape, p, encoded, opts)?.output)
            }
            BoundTemporal::ConvLstm(p) => EncoderOutput::Frame(convlstm_forward(tape, p, encoded)?),
        };
        predict_head(tape, &self.head, enc)
    }
}

/// Inference on a plain tensor.
pub fn forward(params: &ModelParams, cfg: &ModelConfig, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(cfg, Binder::frozen(&mut tape))?;
    let xv = tape.constant(x.clone());
    let y = bound.forward(&mut tape, cfg, xv)?;
    Ok(tape.value(y).clone())
}

/// Finite-difference check of the full model: every parameter and the input
/// batch `[batch, n, c_in, h, w]` against an MSE objective on a fixed random
/// target. Inputs and target are drawn from `seed`.
///
/// Biases are jittered off their zero initialization: otherwise a pixel whose
/// receptive field is entirely dead feeds exactly 0 into the next ReLU, a kink
/// where finite differences disagree with any subgradient.
pub fn grad_check_model(
    cfg: &ModelConfig,
    batch: usize,
    seed: u64,
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut params = build(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let is_bias: Vec<bool> = params
        .named_params()
        .iter()
        .map(|(n, _)| n.ends_with(".bias"))
        .collect();
    let mut idx = 0;
    params.visit_params_mut(&mut |t| {
        if is_bias[idx] {
            t.data_mut()
                .iter_mut()
                .for_each(|b| *b += rng.random_range(-0.1..0.1));
        }
        idx += 1;
    });
    let x = Tensor::from_fn(
        &[batch, cfg.window, cfg.c_in, cfg.height, cfg.width],
        |_| rng.random_range(-1.0..1.0),
    );
    let target = Tensor::from_fn(&[batch, cfg.c_out, cfg.height, cfg.width], |_| {
        rng.random_range(-1.0..1.0)
    });
    let mut leaves: Vec<Tensor> = params
        .named_params()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let n_params = leaves.len();
    leaves.push(x);
    grad_check(
        |tape, vars| {
            let bound = params.bind(cfg, Binder::reuse(tape, &vars[..n_params]))?;
            let y = bound.forward(tape, cfg, vars[n_params])?;
            tape.mse_loss(y, &target)
        },
        &leaves,
        eps,
        tol,
    )
}

/// Odd `(kernel, qkv_kernel)` pair, each at most `max_kernel`, whose
/// parameter count for `cfg` is closest to `target`. Ties go to the pair with
/// the smaller kernel spread, then the smaller kernel. `qkv_kernel` only
/// matters for CSAC and stays unset otherwise.
pub fn kernel_for_budget(cfg: &ModelConfig, target: usize, max_kernel: usize) -> ModelConfig {
    let qkv_choices: Vec<Option<usize>> = match cfg.ts_encoder {
        TsEncoder::Csac => (1..=max_kernel).step_by(2).map(Some).collect(),
        TsEncoder::Convlstm => vec![None],
    };
    let mut best = cfg.clone();
    let mut best_key = (usize::MAX, usize::MAX, usize::MAX);
    for k in (1..=max_kernel).step_by(2) {
        for &q in &qkv_choices {
            let trial = ModelConfig {
                kernel: k,
                qkv_kernel: q.filter(|&q| q != k),
                ..cfg.clone()
            };
            let key = (
                param_count_formula(&trial).abs_diff(target),
                k.abs_diff(q.unwrap_or(k)),
                k,
            );
            if key < best_key {
                best_key = key;
                best = trial;
            }
        }
    }
    best
}
