//! Parameterised building blocks shared by the encoder, fusion and decoders.

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Rng, Scalar};

fn init_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    Tensor::uniform(shape, (1.0 / fan_in as f64).sqrt(), rng)
}

/// Token-wise affine map `x·W (+ b)` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.w"), init_uniform(&[d_in, d_out], d_in, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), init_uniform(&[d_out], d_in, rng)));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_bias(y, b, 1)
            }
            None => Ok(y),
        }
    }
}

/// 2-D convolution with bias on a single `C×H×W` sample.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut Rng,
    ) -> Self {
        let fan_in = c_in * kernel * kernel;
        let w = store.add(format!("{name}.w"), init_uniform(&[c_out, c_in, kernel, kernel], fan_in, rng));
        let b = store.add(format!("{name}.b"), init_uniform(&[c_out], fan_in, rng));
        Self { w, b, stride, pad }
    }

    /// `k×k` stride-1 convolution preserving the spatial extent (`k` odd).
    pub fn same<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize, k: usize, rng: &mut Rng) -> Self {
        Self::new(store, name, c_in, c_out, k, 1, k / 2, rng)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }
}

/// Layer normalisation over the last dimension with learnable affine.
#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl Norm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize, eps: f64) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::ones(&[dim]));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias, eps }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, self.eps)
    }
}
