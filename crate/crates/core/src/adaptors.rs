//! Two-layer MLP adaptors from fused item vectors / behavior graph
//! embeddings into the language model's token-embedding space.

use rand::Rng;
use tmf_autodiff::{Bindings, Element, ParamId, ParamStore, Tape, Tensor, Var};

use crate::{Result, TmfError};

/// `gelu(x·W1 + b1)·W2 + b2`
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Adaptor {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

pub fn uniform<R: Rng>(rng: &mut R, rows: usize, cols: usize, bound: f32) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, cols, data).expect("finite init")
}

/// Uniform in `±1/√fan_in`.
pub fn scaled_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    uniform(rng, fan_in, fan_out, 1.0 / (fan_in as f32).sqrt())
}

impl Adaptor {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, prefix: &str, d_in: usize, hidden: usize, d_out: usize) -> Self {
        Self {
            w1: store.add(format!("{prefix}.w1"), scaled_uniform(rng, d_in, hidden)),
            b1: store.add(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden])),
            w2: store.add(format!("{prefix}.w2"), scaled_uniform(rng, hidden, d_out)),
            b2: store.add(format!("{prefix}.b2"), Tensor::zeros(&[1, d_out])),
            d_in,
            d_out,
        }
    }

    pub fn ids(&self) -> [ParamId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }

    /// Maps each row of `x` (`n × d_in`) to `n × d_out`.
    pub fn forward<F: Element>(&self, tape: &mut Tape<F>, b: &Bindings, x: Var) -> Result<Var> {
        let d = tape.shape(x)[1];
        if d != self.d_in {
            return Err(TmfError::Config(format!(
                "adaptor expects inputs of width {}, got {d}",
                self.d_in
            )));
        }
        let h = tape.matmul(x, b[self.w1])?;
        let h = tape.add_row(h, b[self.b1])?;
        let h = tape.gelu(h)?;
        let y = tape.matmul(h, b[self.w2])?;
        Ok(tape.add_row(y, b[self.b2])?)
    }
}
