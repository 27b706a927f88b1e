//! Parameterized layers shared by every encoder.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;

/// Registers parameter tensors on a tape in a fixed visiting order.
///
/// The order in which `bind` is called must match the order of
/// [`Parameterized::visit_params`] so gradients line up with the tensors the
/// optimizer mutates.
pub struct Binder<'t> {
    tape: &'t mut Tape,
    trainable: bool,
    vars: Vec<Var>,
    reuse: Option<std::vec::IntoIter<Var>>,
}

impl<'t> Binder<'t> {
    /// Binds parameters as gradient-carrying leaves.
    pub fn trainable(tape: &'t mut Tape) -> Self {
        Self {
            tape,
            trainable: true,
            vars: Vec::new(),
            reuse: None,
        }
    }

    /// Binds parameters as constants, for inference.
    pub fn frozen(tape: &'t mut Tape) -> Self {
        Self {
            tape,
            trainable: false,
            vars: Vec::new(),
            reuse: None,
        }
    }

    /// Hands out existing tape handles in order instead of creating leaves,
    /// so a model can be evaluated on caller-owned variables (e.g. inside a
    /// gradient check). Panics if fewer handles than parameters are supplied.
    pub fn reuse(tape: &'t mut Tape, vars: &[Var]) -> Self {
        Self {
            tape,
            trainable: false,
            vars: Vec::new(),
            reuse: Some(Vec::from(vars).into_iter()),
        }
    }

    pub fn bind(&mut self, t: &Tensor) -> Var {
        let v = if let Some(it) = &mut self.reuse {
            let v = it
                .next()
                .expect("Binder::reuse given fewer handles than parameters");
            assert_eq!(
                self.tape.shape(v),
                t.shape(),
                "reused handle shape mismatch"
            );
            v
        } else if self.trainable {
            self.tape.param(t.clone())
        } else {
            self.tape.constant(t.clone())
        };
        self.vars.push(v);
        v
    }

    /// Parameter handles in binding order.
    pub fn finish(self) -> Vec<Var> {
        self.vars
    }
}

/// Anything owning trainable tensors.
pub trait Parameterized {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params("", &mut |_, t| n += t.numel());
        n
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit_params("", &mut |name, t| out.push((name, t)));
        out
    }
}

impl Parameterized for Vec<Tensor> {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, t) in self.iter().enumerate() {
            f(format!("{prefix}{i}"), t);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        self.iter_mut().for_each(f);
    }
}

/// A same-padded square convolution: `[b, c_in, h, w] -> [b, c_out, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub k: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvVars {
    pub weight: Var,
    pub bias: Var,
    pub k: usize,
}

/// Fan-in uniform initialization: `w ~ U(-s, s)`, `s = sqrt(1 / (c_in k²))`, zero bias.
pub fn init_conv(c_in: usize, c_out: usize, k: usize, rng: &mut impl Rng) -> Result<ConvLayer> {
    if c_in == 0 || c_out == 0 || k == 0 {
        return Err(Error::usage(format!(
            "conv extents must be positive (c_in={c_in}, c_out={c_out}, k={k})"
        )));
    }
    if k.is_multiple_of(2) {
        return Err(Error::usage(format!("kernel extent must be odd, got {k}")));
    }
    let bound = (1.0 / (c_in * k * k) as f64).sqrt();
    let weight = Tensor::from_fn(&[c_out, c_in, k, k], |_| rng.random_range(-bound..=bound));
    Ok(ConvLayer {
        weight,
        bias: Tensor::zeros(&[c_out]),
        k,
    })
}

impl ConvLayer {
    /// A 1×1 layer passing each of `c` channels through unchanged.
    pub fn identity(c: usize) -> Self {
        let weight = Tensor::from_fn(&[c, c, 1, 1], |i| if i / c == i % c { 1.0 } else { 0.0 });
        Self {
            weight,
            bias: Tensor::zeros(&[c]),
            k: 1,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, binder: &mut Binder<'_>) -> ConvVars {
        ConvVars {
            weight: binder.bind(&self.weight),
            bias: binder.bind(&self.bias),
            k: self.k,
        }
    }
}

impl Parameterized for ConvLayer {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}weight"), &self.weight);
        f(format!("{prefix}bias"), &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

/// Closed-form parameter count of a conv layer.
pub fn conv_param_count(c_in: usize, c_out: usize, k: usize) -> usize {
    c_out * c_in * k * k + c_out
}

pub fn apply_conv(tape: &mut Tape, layer: &ConvVars, x: Var) -> Result<Var> {
    tape.conv2d(x, layer.weight, layer.bias, (layer.k - 1) / 2)
}

pub const DEFAULT_LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormLayer {
    pub gain: Tensor,
    pub shift: Tensor,
    pub eps: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNormVars {
    pub gain: Var,
    pub shift: Var,
    pub eps: f64,
}

impl LayerNormLayer {
    pub fn new(c: usize) -> Self {
        Self {
            gain: Tensor::filled(&[c], 1.0),
            shift: Tensor::zeros(&[c]),
            eps: DEFAULT_LN_EPS,
        }
    }

    pub fn bind(&self, binder: &mut Binder<'_>) -> LayerNormVars {
        LayerNormVars {
            gain: binder.bind(&self.gain),
            shift: binder.bind(&self.shift),
            eps: self.eps,
        }
    }
}

impl Parameterized for LayerNormLayer {
    fn visit_params<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(format!("{prefix}gain"), &self.gain);
        f(format!("{prefix}shift"), &self.shift);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Tensor)) {
        f(&mut self.gain);
        f(&mut self.shift);
    }
}

/// Normalizes across `axis` (the channel axis of the caller's layout).
pub fn apply_layer_norm(
    tape: &mut Tape,
    layer: &LayerNormVars,
    x: Var,
    axis: usize,
) -> Result<Var> {
    tape.layer_norm(x, layer.gain, layer.shift, axis, layer.eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_conv(3, 5, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = init_conv(3, 5, 3, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        let bound = (1.0f64 / 27.0).sqrt();
        assert!(a.weight.data().iter().all(|w| w.abs() <= bound));
        assert!(a.bias.data().iter().all(|&v| v == 0.0));
        assert_eq!(a.param_count(), conv_param_count(3, 5, 3));
        assert_eq!(a.param_count(), 5 * 3 * 9 + 5);
    }

    #[test]
    fn init_rejects_bad_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(init_conv(0, 2, 3, &mut rng), Err(Error::Usage(_))));
        assert!(matches!(init_conv(2, 2, 2, &mut rng), Err(Error::Usage(_))));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let layer = ConvLayer::identity(3);
        let x = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f64).sin());
        let mut tape = Tape::new();
        let vars = layer.bind(&mut Binder::frozen(&mut tape));
        let xv = tape.constant(x.clone());
        let y = apply_conv(&mut tape, &vars, xv).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn apply_conv_shape_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = init_conv(2, 3, 3, &mut rng).unwrap();
        let x = Tensor::from_fn(&[1, 2, 5, 5], |_| rng.random_range(-1.0..1.0));
        let report = grad_check(
            |tape, v| {
                let vars = ConvVars {
                    weight: v[1],
                    bias: v[2],
                    k: 3,
                };
                let y = apply_conv(tape, &vars, v[0])?;
                assert_eq!(tape.shape(y), &[1, 3, 5, 5]);
                let sq = tape.mul(y, y)?;
                tape.sum(sq)
            },
            &[x, layer.weight.clone(), layer.bias.clone()],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}
