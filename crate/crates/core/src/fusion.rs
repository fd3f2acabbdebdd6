//! Modality fusion: concatenation, all-modality self-attention (AMSA) and
//! the two cross-modality attention (CMA) hops.
//!
//! Everything here is written against the tape so it runs in `f32` for
//! training and in `f64` for finite-difference oracles.

use serde::{Deserialize, Serialize};
use tmf_autodiff::{Element, Tape, Var};

use crate::{Result, TmfError};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// AMSA projected by `W_q`; the CMA hops are skipped.
    AmsaOnly,
    #[default]
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub d_g: usize,
    /// Heads used by the CMA hops; each head gets `d_v / heads` columns.
    pub heads: usize,
    pub mode: FusionMode,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            d_v: 16,
            d_t: 16,
            d_g: 8,
            heads: 1,
            mode: FusionMode::Full,
        }
    }
}

impl FusionConfig {
    pub fn d(&self) -> usize {
        self.d_v + self.d_t + self.d_g
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_v != self.d_t {
            return Err(TmfError::Config(format!(
                "cross-modality attention needs d_v == d_t (got {} and {})",
                self.d_v, self.d_t
            )));
        }
        if self.heads == 0 || self.d_v % self.heads != 0 {
            return Err(TmfError::Config(format!(
                "{} heads do not divide d_v = {}",
                self.heads, self.d_v
            )));
        }
        Ok(())
    }
}

/// Intermediate values of one fusion pass, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct FusionTrace {
    pub concat: Var,
    pub amsa_attention: Var,
    pub amsa: Var,
    pub query: Var,
    /// `None` in [`FusionMode::AmsaOnly`].
    pub cma: Option<CmaTrace>,
    pub output: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct CmaTrace {
    pub first_attention: Var,
    pub first: Var,
    pub second_attention: Var,
    pub output: Var,
}

fn rows_and_cols<F: Element>(tape: &Tape<F>, v: Var) -> (usize, usize) {
    let s = tape.shape(v);
    (s[0], s[1])
}

/// `[image ‖ text ‖ graph]` per row.
pub fn concat_modalities<F: Element>(tape: &mut Tape<F>, image: Var, text: Var, graph: Var) -> Result<Var> {
    let n = rows_and_cols(tape, image).0;
    if n == 0 {
        return Err(TmfError::Usage("empty sequence".into()));
    }
    Ok(tape.concat_cols(&[image, text, graph])?)
}

/// Scaled dot-product attention with the same tensor as query, key and
/// value. Returns `(output, weights)`.
pub fn amsa<F: Element>(tape: &mut Tape<F>, vm: Var) -> Result<(Var, Var)> {
    let d = rows_and_cols(tape, vm).1;
    let scores = tape.matmul_t(vm, vm)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
    let w = tape.softmax_rows(scaled)?;
    Ok((tape.matmul(w, vm)?, w))
}

/// `softmax(q kᵀ / √d_k) v`, returning `(output, weights)`.
fn attend<F: Element>(tape: &mut Tape<F>, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dk = rows_and_cols(tape, k).1;
    let scores = tape.matmul_t(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let w = tape.softmax_rows(scaled)?;
    Ok((tape.matmul(w, v)?, w))
}

fn multi_head<F: Element>(tape: &mut Tape<F>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    if heads == 1 {
        return attend(tape, q, k, v);
    }
    let d = rows_and_cols(tape, q).1;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let (o, w) = attend(tape, qh, kh, vh)?;
        outs.push(o);
        weights.push(w);
    }
    // per-head weights are stacked along columns
    Ok((tape.concat_cols(&outs)?, tape.concat_cols(&weights)?))
}

/// Two cross-modality hops: image keys with text values, then text keys
/// with image values.
pub fn cma<F: Element>(
    tape: &mut Tape<F>,
    query: Var,
    image: Var,
    text: Var,
    heads: usize,
) -> Result<CmaTrace> {
    let (_, dv) = rows_and_cols(tape, image);
    let (_, dt) = rows_and_cols(tape, text);
    if dv != dt {
        return Err(TmfError::Config(format!("d_v = {dv} differs from d_t = {dt}")));
    }
    let (first, first_attention) = multi_head(tape, query, image, text, heads)?;
    let (output, second_attention) = multi_head(tape, first, text, image, heads)?;
    Ok(CmaTrace {
        first_attention,
        first,
        second_attention,
        output,
    })
}

/// Full fusion pass for one user sequence. `image`, `text`, `graph` hold one
/// row per history interaction; `w_q` is `d × d_v`.
pub fn fuse<F: Element>(
    tape: &mut Tape<F>,
    cfg: &FusionConfig,
    image: Var,
    text: Var,
    graph: Var,
    w_q: Var,
) -> Result<FusionTrace> {
    cfg.validate()?;
    let (n, dv) = rows_and_cols(tape, image);
    let (nt, dt) = rows_and_cols(tape, text);
    let (ng, dg) = rows_and_cols(tape, graph);
    if n != nt || n != ng {
        return Err(TmfError::Tensor(tmf_autodiff::TensorError::Shape {
            op: "concat_modalities",
            lhs: vec![n, nt],
            rhs: vec![ng],
        }));
    }
    if (dv, dt, dg) != (cfg.d_v, cfg.d_t, cfg.d_g) {
        return Err(TmfError::Config(format!(
            "embedding dims ({dv}, {dt}, {dg}) do not match fusion config ({}, {}, {})",
            cfg.d_v, cfg.d_t, cfg.d_g
        )));
    }
    let concat = concat_modalities(tape, image, text, graph)?;
    let (amsa_out, amsa_attention) = amsa(tape, concat)?;
    let query = tape.matmul(amsa_out, w_q)?;
    let (cma_trace, output) = match cfg.mode {
        FusionMode::AmsaOnly => (None, query),
        FusionMode::Full => {
            let t = cma(tape, query, image, text, cfg.heads)?;
            (Some(t), t.output)
        }
    };
    Ok(FusionTrace {
        concat,
        amsa_attention,
        amsa: amsa_out,
        query,
        cma: cma_trace,
        output,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tmf_autodiff::Tensor;

    fn mat(tape: &mut Tape<f64>, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        tape.constant(Tensor::matrix(rows, cols, data).unwrap())
    }

    #[test]
    fn concat_small_example() {
        let mut tape = Tape::<f64>::new();
        let i = mat(&mut tape, 1, 2, vec![1.0, 0.0]);
        let t = mat(&mut tape, 1, 2, vec![0.0, 1.0]);
        let g = mat(&mut tape, 1, 1, vec![5.0]);
        let c = concat_modalities(&mut tape, i, t, g).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 0.0, 0.0, 1.0, 5.0]);
    }

    #[test]
    fn amsa_single_row_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = mat(&mut tape, 1, 3, vec![0.3, -1.2, 2.0]);
        let (y, _) = amsa(&mut tape, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn amsa_identical_rows_are_fixed() {
        let mut tape = Tape::<f64>::new();
        let x = mat(&mut tape, 3, 2, vec![0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
        let (y, _) = amsa(&mut tape, x).unwrap();
        assert!(tape.value(y).max_abs_diff(tape.value(x)) < 1e-12);
    }

    #[test]
    fn mismatched_dims_are_config_errors() {
        let cfg = FusionConfig {
            d_t: 8,
            ..FusionConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TmfError::Config(_))));
        let cfg = FusionConfig {
            heads: 3,
            ..FusionConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(TmfError::Config(_))));
    }
}
