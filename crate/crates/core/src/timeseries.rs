//! Temporal encoders over `[b, n, c, h, w]` windows and the prediction head.
//!
//! The convolutional self-attention cell (CSAC) computes Q, K and V with
//! per-frame convolutions, flattens each frame only to score frames against
//! each other (`A = softmax(Q Kᵀ)`, shape `[b, n, n]`), restores `Y = A V` to
//! the full grid, and then fuses `[X′, Y]` through a channel LayerNorm and an
//! output convolution. The ConvLSTM is the usual gated recurrence with
//! convolutional gates over `[x_t, h_{t-1}]`.

use crate::error::{Error, Result};
use crate::nn::{
    apply_conv, apply_layer_norm, conv_param_count, init_conv, Binder, ConvLayer, ConvVars,
    LayerNormLayer, LayerNormVars, Parameterized,
};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct CsacParams {
    pub q_conv: ConvLayer,
    pub k_conv: ConvLayer,
    pub v_conv: ConvLayer,
    pub out_conv: ConvLayer,
    pub norm: LayerNormLayer,
}

impl CsacParams {
    pub fn init(c: usize, qkv_kernel: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            q_conv: init_conv(c, c, qkv_kernel, rng)?,
            k_conv: init_conv(c, c, qkv_kernel, rng)?,
            v_conv: init_conv(c, c, qkv_kernel, rng)?,
            out_conv: init_conv(2 * c, c, kernel, rng)?,
            norm: LayerNormLayer::new(2 * c),
        })
    }

    pub fn bind(&self, binder: &mut Binder<'_>) -> CsacVars {
        CsacVars {
            q: self.q_conv.bind(binder),
            k: self.k_conv.bind(binder),
            v: self.v_conv.bind(binder),
            out: self.out_conv.bind(binder),
            norm: self.norm.bind(binder),
        }
    }
}

impl Parameterized for CsacParams {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.q_conv.visit_params(&format!("{prefix}q."), f);
        self.k_conv.visit_params(&format!("{prefix}k."), f);
        self.v_conv.visit_params(&format!("{prefix}v."), f);
        self.out_conv.visit_params(&format!("{prefix}out."), f);
        self.norm.visit_params(&format!("{prefix}norm."), f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.q_conv.visit_params_mut(f);
        self.k_conv.visit_params_mut(f);
        self.v_conv.visit_params_mut(f);
        self.out_conv.visit_params_mut(f);
        self.norm.visit_params_mut(f);
    }
}

pub fn csac_param_count(c: usize, qkv_kernel: usize, kernel: usize) -> usize {
    3 * conv_param_count(c, c, qkv_kernel) + conv_param_count(2 * c, c, kernel) + 2 * (2 * c)
}

#[derive(Debug, Clone)]
pub struct CsacVars {
    pub q: ConvVars,
    pub k: ConvVars,
    pub v: ConvVars,
    pub out: ConvVars,
    pub norm: LayerNormVars,
}

/// How attention scores are formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsacOptions {
    /// Divide `Q Kᵀ` by `sqrt(c·h·w)` before the softmax.
    pub scaled: bool,
    /// Replace `A` by the identity, so each frame attends only to itself.
    pub identity_attention: bool,
}

/// Intermediate tensors of one CSAC pass.
#[derive(Debug, Clone, Copy)]
pub struct CsacTrace {
    /// `[b, n, n]`, rows sum to one.
    pub attention: Var,
    /// `[b, n, c, h, w]`
    pub values: Var,
    /// `A V`, `[b, n, c, h, w]`
    pub attended: Var,
    /// `[b, n, c, h, w]`, or `[b, 1, c, h, w]` when only the newest frame was fused.
    pub output: Var,
}

fn window_dims(tape: &Tape, x: Var, op: &'static str) -> Result<[usize; 5]> {
    let s = tape.shape(x);
    if s.len() != 5 {
        return Err(Error::dim(op, format!("expected [b,n,c,h,w], got {s:?}")));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

pub fn csac_forward(
    tape: &mut Tape,
    p: &CsacVars,
    xp: Var,
    opts: CsacOptions,
) -> Result<CsacTrace> {
    csac_pass(tape, p, xp, opts, false)
}

/// Same as [`csac_forward`] but fuses and projects only the newest frame,
/// which is all the prediction head consumes.
pub fn csac_forward_newest(
    tape: &mut Tape,
    p: &CsacVars,
    xp: Var,
    opts: CsacOptions,
) -> Result<CsacTrace> {
    csac_pass(tape, p, xp, opts, true)
}

fn csac_pass(
    tape: &mut Tape,
    p: &CsacVars,
    xp: Var,
    opts: CsacOptions,
    newest_only: bool,
) -> Result<CsacTrace> {
    let [b, n, c, h, w] = window_dims(tape, xp, "csac_forward")?;
    let d = c * h * w;
    let frames = tape.reshape(xp, &[b * n, c, h, w])?;

    let v4 = apply_conv(tape, &p.v, frames)?;
    let v = tape.reshape(v4, &[b, n, d])?;
    let attention = if opts.identity_attention {
        let eye = Tensor::from_fn(&[b, n, n], |i| if (i / n) % n == i % n { 1.0 } else { 0.0 });
        tape.constant(eye)
    } else {
        let q4 = apply_conv(tape, &p.q, frames)?;
        let k4 = apply_conv(tape, &p.k, frames)?;
        let q = tape.reshape(q4, &[b, n, d])?;
        let k = tape.reshape(k4, &[b, n, d])?;
        let kt = tape.transpose_last2(k)?;
        let mut scores = tape.matmul_batched(q, kt)?;
        if opts.scaled {
            scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        }
        tape.softmax_lastdim(scores)?
    };
    let y = tape.matmul_batched(attention, v)?;
    let attended = tape.reshape(y, &[b, n, c, h, w])?;
    let values = tape.reshape(v, &[b, n, c, h, w])?;

    let (x_in, y_in, frames_out) = if newest_only {
        (
            tape.slice(xp, 1, n - 1, 1)?,
            tape.slice(attended, 1, n - 1, 1)?,
            1,
        )
    } else {
        (xp, attended, n)
    };
    let joined = tape.concat(&[x_in, y_in], 2)?;
    let normed = apply_layer_norm(tape, &p.norm, joined, 2)?;
    let flat = tape.reshape(normed, &[b * frames_out, 2 * c, h, w])?;
    let z = apply_conv(tape, &p.out, flat)?;
    let output = tape.reshape(z, &[b, frames_out, c, h, w])?;
    Ok(CsacTrace {
        attention,
        values,
        attended,
        output,
    })
}

/// ConvLSTM gates; one convolution produces input, forget, output and
/// candidate pre-activations stacked along the channel axis in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmParams {
    pub gates: ConvLayer,
    pub c_hid: usize,
}

impl ConvLstmParams {
    pub fn init(c_in: usize, c_hid: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            gates: init_conv(c_in + c_hid, 4 * c_hid, kernel, rng)?,
            c_hid,
        })
    }

    pub fn bind(&self, binder: &mut Binder<'_>) -> ConvLstmVars {
        ConvLstmVars {
            gates: self.gates.bind(binder),
            c_hid: self.c_hid,
        }
    }
}

impl Parameterized for ConvLstmParams {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.gates.visit_params(&format!("{prefix}gates."), f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.gates.visit_params_mut(f);
    }
}

pub fn convlstm_param_count(c_in: usize, c_hid: usize, kernel: usize) -> usize {
    conv_param_count(c_in + c_hid, 4 * c_hid, kernel)
}

#[derive(Debug, Clone, Copy)]
pub struct ConvLstmVars {
    pub gates: ConvVars,
    pub c_hid: usize,
}

/// One recurrence step; returns `(h_t, c_t)`.
pub fn convlstm_step(
    tape: &mut Tape,
    p: &ConvLstmVars,
    x: Var,
    hidden: Var,
    cell: Var,
) -> Result<(Var, Var)> {
    let ch = p.c_hid;
    let joined = tape.concat(&[x, hidden], 1)?;
    let pre = apply_conv(tape, &p.gates, joined)?;
    let gate = |tape: &mut Tape, idx: usize| tape.slice(pre, 1, idx * ch, ch);
    let i_pre = gate(tape, 0)?;
    let f_pre = gate(tape, 1)?;
    let o_pre = gate(tape, 2)?;
    let g_pre = gate(tape, 3)?;
    let i = tape.sigmoid(i_pre)?;
    let f = tape.sigmoid(f_pre)?;
    let o = tape.sigmoid(o_pre)?;
    let g = tape.tanh(g_pre)?;
    let kept = tape.mul(f, cell)?;
    let written = tape.mul(i, g)?;
    let cell = tape.add(kept, written)?;
    let squashed = tape.tanh(cell)?;
    let hidden = tape.mul(o, squashed)?;
    Ok((hidden, cell))
}

/// Runs the recurrence oldest → newest from zero states; returns the final
/// hidden state `[b, c_hid, h, w]`.
pub fn convlstm_forward(tape: &mut Tape, p: &ConvLstmVars, xp: Var) -> Result<Var> {
    let [b, n, c, h, w] = window_dims(tape, xp, "convlstm_forward")?;
    let mut hidden = tape.constant(Tensor::zeros(&[b, p.c_hid, h, w]));
    let mut cell = tape.constant(Tensor::zeros(&[b, p.c_hid, h, w]));
    for t in 0..n {
        let slot = tape.slice(xp, 1, t, 1)?;
        let frame = tape.reshape(slot, &[b, c, h, w])?;
        (hidden, cell) = convlstm_step(tape, p, frame, hidden, cell)?;
    }
    Ok(hidden)
}

/// Maps encoder channels to the forecast channels.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub head_conv: ConvLayer,
}

impl HeadParams {
    pub fn init(c_enc: usize, c_out: usize, kernel: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(Self {
            head_conv: init_conv(c_enc, c_out, kernel, rng)?,
        })
    }

    pub fn bind(&self, binder: &mut Binder<'_>) -> ConvVars {
        self.head_conv.bind(binder)
    }
}

impl Parameterized for HeadParams {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.head_conv.visit_params(&format!("{prefix}conv."), f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.head_conv.visit_params_mut(f);
    }
}

/// Encoder output handed to the head.
#[derive(Debug, Clone, Copy)]
pub enum EncoderOutput {
    /// `[b, n, c, h, w]`; the newest frame is used.
    Sequence(Var),
    /// `[b, c, h, w]`, e.g. a final ConvLSTM hidden state.
    Frame(Var),
}

pub fn predict_head(tape: &mut Tape, head: &ConvVars, enc: EncoderOutput) -> Result<Var> {
    let frame = match enc {
        EncoderOutput::Frame(v) => v,
        EncoderOutput::Sequence(v) => {
            let [b, n, c, h, w] = window_dims(tape, v, "predict_head")?;
            let newest = tape.slice(v, 1, n - 1, 1)?;
            tape.reshape(newest, &[b, c, h, w])?
        }
    };
    apply_conv(tape, head, frame)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn csac_shape_and_row_sums() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CsacParams::init(8, 3, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut Binder::frozen(&mut tape));
        let x = tape.constant(random(&[2, 6, 8, 5, 5], 2));
        let trace = csac_forward(
            &mut tape,
            &vars,
            x,
            CsacOptions {
                scaled: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(tape.shape(trace.output), &[2, 6, 8, 5, 5]);
        assert_eq!(tape.shape(trace.attention), &[2, 6, 6]);
        for row in tape.value(trace.attention).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_frames_attend_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = CsacParams::init(2, 3, 3, &mut rng).unwrap();
        let frame = random(&[1, 1, 2, 4, 4], 4);
        let repeated = Tensor::from_fn(&[1, 5, 2, 4, 4], |i| frame.data()[i % 32]);
        let mut tape = Tape::new();
        let vars = p.bind(&mut Binder::frozen(&mut tape));
        let x = tape.constant(repeated);
        let trace = csac_forward(&mut tape, &vars, x, CsacOptions::default()).unwrap();
        for a in tape.value(trace.attention).data() {
            assert!((a - 0.2).abs() < 1e-12);
        }
        let gap = tape
            .value(trace.attended)
            .max_abs_diff(tape.value(trace.values))
            .unwrap();
        assert!(gap < 1e-9, "{gap}");
    }

    #[test]
    fn newest_only_pass_matches_full_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = CsacParams::init(3, 3, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let vars = p.bind(&mut Binder::frozen(&mut tape));
        let x = tape.constant(random(&[2, 4, 3, 4, 4], 6));
        let full = csac_forward(&mut tape, &vars, x, CsacOptions::default()).unwrap();
        let newest = csac_forward_newest(&mut tape, &vars, x, CsacOptions::default()).unwrap();
        let last = tape.value(full.output).slice_axis(1, 3, 1).unwrap();
        assert!(last.max_abs_diff(tape.value(newest.output)).unwrap() < 1e-14);
    }

    #[test]
    fn convlstm_zero_input_stays_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ConvLstmParams::init(3, 4, 3, &mut rng).unwrap();
        // Weights may be anything; zero input and zero state still give zero pre-activations.
        p.gates.bias = Tensor::zeros(&[16]);
        let mut tape = Tape::new();
        let vars = p.bind(&mut Binder::frozen(&mut tape));
        let x = tape.constant(Tensor::zeros(&[2, 5, 3, 6, 6]));
        let h = convlstm_forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.shape(h), &[2, 4, 6, 6]);
        assert!(tape.value(h).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_head_reproduces_newest_frame() {
        let head = HeadParams {
            head_conv: ConvLayer::identity(3),
        };
        let x = random(&[2, 4, 3, 5, 5], 8);
        let mut tape = Tape::new();
        let hv = head.bind(&mut Binder::frozen(&mut tape));
        let xv = tape.constant(x.clone());
        let y = predict_head(&mut tape, &hv, EncoderOutput::Sequence(xv)).unwrap();
        let newest = x
            .slice_axis(1, 3, 1)
            .unwrap()
            .reshape(&[2, 3, 5, 5])
            .unwrap();
        assert_eq!(tape.value(y), &newest);
    }

    #[test]
    fn head_output_for_sixteen_interval_forecast() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let head = HeadParams::init(8, 16, 3, &mut rng).unwrap();
        let mut tape = Tape::new();
        let hv = head.bind(&mut Binder::frozen(&mut tape));
        let h = tape.constant(random(&[2, 8, 6, 6], 1));
        let y = predict_head(&mut tape, &hv, EncoderOutput::Frame(h)).unwrap();
        assert_eq!(tape.shape(y), &[2, 16, 6, 6]);
    }
}
