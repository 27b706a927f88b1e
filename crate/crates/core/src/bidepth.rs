//! Bidirectional-depth encoder.
//!
//! Every frame of the history window is pushed through a prefix of one
//! shared convolution stack `CNN_1 … CNN_L`. The DeepShallow branch gives old
//! frames many layers and recent frames few; the ShallowDeep branch does the
//! opposite. Both branches draw on the same layer objects, so the parameter
//! count depends on `L` only, never on the window length.
//!
//! Positions are indexed oldest → newest throughout this crate.

use crate::error::{Error, Result};
use crate::nn::{
    apply_conv, conv_param_count, init_conv, Binder, ConvLayer, ConvVars, Parameterized,
};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use serde::Serialize;

/// Per-position convolution depths for the two branches.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DepthSchedule {
    pub max_depth: usize,
    pub window: usize,
    /// DeepShallow depths, oldest first.
    pub ds: Vec<usize>,
    /// ShallowDeep depths, oldest first.
    pub sd: Vec<usize>,
}

/// Linear depth schedule with decrement `δ = (L − 1)/(n − 1)` (`δ = 0` when `n = 1`).
///
/// With `r(m) = round(m·δ)` rounded half away from zero, the ShallowDeep
/// depth at position `j` (1 = oldest) is `max(1, r(j − 1) + 1)` and the
/// DeepShallow depth is the same rule counted from the newest end,
/// `max(1, r(n − j) + 1)`. DeepShallow therefore starts at `L` on the oldest
/// frame and reaches 1 on the newest; ShallowDeep mirrors it.
pub fn make_schedule(max_depth: usize, window: usize) -> Result<DepthSchedule> {
    if max_depth < 1 || window < 1 {
        return Err(Error::usage(format!(
            "depth schedule needs L >= 1 and n >= 1 (got L={max_depth}, n={window})"
        )));
    }
    if window == 1 {
        return Ok(DepthSchedule {
            max_depth,
            window,
            ds: vec![max_depth],
            sd: vec![1],
        });
    }
    let delta = (max_depth - 1) as f64 / (window - 1) as f64;
    let depth_at = |steps: usize| ((steps as f64 * delta).round() as usize + 1).clamp(1, max_depth);
    let sd: Vec<usize> = (0..window).map(depth_at).collect();
    let ds: Vec<usize> = (0..window).map(|j| depth_at(window - 1 - j)).collect();
    Ok(DepthSchedule {
        max_depth,
        window,
        ds,
        sd,
    })
}

/// Which outputs of the bidirectional encoder to emit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branches {
    Both,
    DeepShallow,
    ShallowDeep,
}

/// The `L` convolution layers shared by both branches.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedStack {
    pub layers: Vec<ConvLayer>,
}

impl SharedStack {
    /// `CNN_1: c_in → c_h`, then `CNN_d: c_h → c_h` for `d = 2..=L`.
    pub fn init(
        c_in: usize,
        c_h: usize,
        depth: usize,
        k: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if depth < 1 {
            return Err(Error::usage("shared stack needs at least one layer"));
        }
        let layers = (0..depth)
            .map(|d| init_conv(if d == 0 { c_in } else { c_h }, c_h, k, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn bind(&self, binder: &mut Binder<'_>) -> StackVars {
        StackVars {
            layers: self.layers.iter().map(|l| l.bind(binder)).collect(),
        }
    }
}

impl Parameterized for SharedStack {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (d, layer) in self.layers.iter().enumerate() {
            layer.visit_params(&format!("{prefix}cnn{}.", d + 1), f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        for layer in &mut self.layers {
            layer.visit_params_mut(f);
        }
    }
}

pub fn stack_param_count(c_in: usize, c_h: usize, depth: usize, k: usize) -> usize {
    conv_param_count(c_in, c_h, k) + (depth - 1) * conv_param_count(c_h, c_h, k)
}

#[derive(Debug, Clone)]
pub struct StackVars {
    pub layers: Vec<ConvVars>,
}

/// `ReLU(CNN_d(… ReLU(CNN_1(x))))` on a `[b, c_in, h, w]` frame batch.
pub fn ds_forward(tape: &mut Tape, stack: &StackVars, x: Var, depth: usize) -> Result<Var> {
    Ok(depth_taps(tape, stack, x, &[depth])?[0])
}

/// Runs the shared stack once up to the deepest requested depth and returns
/// the activation after each requested depth. Paths of different depth over
/// the same input share their common prefix.
pub fn depth_taps(
    tape: &mut Tape,
    stack: &StackVars,
    x: Var,
    depths: &[usize],
) -> Result<Vec<Var>> {
    let max = depths.iter().copied().max().unwrap_or(0);
    if let Some(&bad) = depths.iter().find(|&&d| d < 1 || d > stack.layers.len()) {
        return Err(Error::usage(format!(
            "depth {bad} outside 1..={}",
            stack.layers.len()
        )));
    }
    let mut acts = Vec::with_capacity(max);
    let mut h = x;
    for layer in &stack.layers[..max] {
        let z = apply_conv(tape, layer, h)?;
        h = tape.relu(z)?;
        acts.push(h);
    }
    Ok(depths.iter().map(|&d| acts[d - 1]).collect())
}

/// Encodes a `[b, n, c_in, h, w]` window into `[b, n, C, h, w]`, where `C` is
/// `2·c_h` for both branches (DeepShallow channels first) or `c_h` for one.
pub fn bidepth_forward(
    tape: &mut Tape,
    stack: &StackVars,
    schedule: &DepthSchedule,
    x: Var,
    branches: Branches,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 5 {
        return Err(Error::dim(
            "bidepth_forward",
            format!("expected [b,n,c,h,w], got {shape:?}"),
        ));
    }
    let (b, n, c, h, w) = (shape[0], shape[1], shape[2], shape[3], shape[4]);
    if schedule.window != n {
        return Err(Error::usage(format!(
            "schedule built for window {} but input has {n} frames",
            schedule.window
        )));
    }
    if schedule.max_depth != stack.layers.len() {
        return Err(Error::usage(format!(
            "schedule depth {} does not match stack depth {}",
            schedule.max_depth,
            stack.layers.len()
        )));
    }
    let mut frames = Vec::with_capacity(n);
    for j in 0..n {
        let slot = tape.slice(x, 1, j, 1)?;
        let frame = tape.reshape(slot, &[b, c, h, w])?;
        let depths: Vec<usize> = match branches {
            Branches::Both => vec![schedule.ds[j], schedule.sd[j]],
            Branches::DeepShallow => vec![schedule.ds[j]],
            Branches::ShallowDeep => vec![schedule.sd[j]],
        };
        let taps = depth_taps(tape, stack, frame, &depths)?;
        let joined = if taps.len() == 1 {
            taps[0]
        } else {
            tape.concat(&taps, 1)?
        };
        let c_out = tape.shape(joined)[1];
        frames.push(tape.reshape(joined, &[b, 1, c_out, h, w])?);
    }
    if frames.len() == 1 {
        Ok(frames[0])
    } else {
        tape.concat(&frames, 1)
    }
}
