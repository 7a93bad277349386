//! Multi-head self-attention over token windows.
//!
//! Scaled dot-product attention `softmax(Q Kᵀ / sqrt(d) + mask [+ B]) V` runs
//! per window and per head; `d` is the per-head channel width. The optional
//! `B` is a relative positional bias looked up from a per-head table indexed
//! by the coordinate difference of the two tokens inside the window.

use crate::error::{Error, Result};
use crate::model::weights::{Attention, Linear};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Number of distinct per-axis coordinate differences inside a window of
/// extent `w`: offsets -(w-1)..=(w-1).
fn offsets(w: usize) -> usize {
    2 * w - 1
}

/// Flattened size of the relative-bias table for a window.
pub fn bias_table_len(window: [usize; 4]) -> usize {
    window.iter().map(|&w| offsets(w)).product()
}

/// Index map from token pair `(i, j)` to the flat bias-table entry, for all
/// `L*L` pairs of window positions in row-major order.
pub fn bias_index_map(window: [usize; 4]) -> Vec<usize> {
    let l: usize = window.iter().product();
    let coords: Vec<[usize; 4]> = {
        let mut v = Vec::with_capacity(l);
        for t in 0..window[0] {
            for h in 0..window[1] {
                for w in 0..window[2] {
                    for d in 0..window[3] {
                        v.push([t, h, w, d]);
                    }
                }
            }
        }
        v
    };
    let dims: Vec<usize> = window.iter().map(|&w| offsets(w)).collect();
    let mut idx = Vec::with_capacity(l * l);
    for ci in &coords {
        for cj in &coords {
            let mut flat = 0usize;
            for a in 0..4 {
                let delta = ci[a] + window[a] - 1 - cj[a];
                flat = flat * dims[a] + delta;
            }
            idx.push(flat);
        }
    }
    idx
}

/// Expand a per-head bias table `[heads, table_len]` into the dense
/// `[heads, L, L]` bias used by one window shape.
pub fn relative_bias_lookup<T: Elem>(
    tape: &Tape<T>,
    table: &Var<T>,
    window: [usize; 4],
) -> Result<Var<T>> {
    let heads = table.shape()[0];
    let expected = bias_table_len(window);
    if table.shape() != [heads, expected] {
        return Err(Error::ShapeMismatch {
            op: "relative_bias_lookup",
            lhs: table.shape().to_vec(),
            rhs: vec![heads, expected],
        });
    }
    let l: usize = window.iter().product();
    let idx = bias_index_map(window);
    let gathered = tape.gather_cols(table, &idx)?;
    tape.reshape(&gathered, &[heads, l, l])
}

/// Window multi-head self-attention.
///
/// `x` is `[num_windows, L, C]`; the mask, when present, is `[num_windows, L, L]`
/// and is broadcast over heads; the bias, when present, is the raw per-head
/// table and is broadcast over windows.
pub fn windowed_attention<T: Elem>(
    tape: &Tape<T>,
    x: &Var<T>,
    params: &Attention<Var<T>>,
    heads: usize,
    mask: Option<&Tensor<T>>,
    bias_window: Option<[usize; 4]>,
) -> Result<Var<T>> {
    let shape = x.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "windowed_attention",
            lhs: shape,
            rhs: vec![0, 0, 0],
        });
    }
    let (nw, l, c) = (shape[0], shape[1], shape[2]);
    if c % heads != 0 {
        return Err(Error::Config(format!(
            "channels {c} not divisible by {heads} heads"
        )));
    }
    let d = c / heads;
    let scale = T::of_f64(1.0 / (d as f64).sqrt());

    let split = |proj: &Linear<Var<T>>| -> Result<Var<T>> {
        let y = tape.linear(x, &proj.weight, &proj.bias)?;
        let y = tape.reshape(&y, &[nw, l, heads, d])?;
        tape.permute(&y, &[0, 2, 1, 3]) // [nw, heads, L, d]
    };
    let q = split(&params.query)?;
    let k = split(&params.key)?;
    let v = split(&params.value)?;

    let kt = tape.permute(&k, &[0, 1, 3, 2])?;
    let qk = tape.matmul(&q, &kt)?;
    let mut logits = tape.mul_scalar(&qk, scale); // [nw, heads, L, L]

    if let (Some(window), Some(table)) = (bias_window, params.bias_table.as_ref()) {
        let bias = relative_bias_lookup(tape, table, window)?;
        let bias = tape.reshape(&bias, &[1, heads, l, l])?;
        logits = tape.add_broadcast(&logits, &bias)?;
    }
    if let Some(m) = mask {
        if m.shape() != [nw, l, l] {
            return Err(Error::ShapeMismatch {
                op: "attention_mask",
                lhs: m.shape().to_vec(),
                rhs: vec![nw, l, l],
            });
        }
        let m = tape.watch(m.reshaped(&[nw, 1, l, l])?);
        logits = tape.add_broadcast(&logits, &m)?;
    }

    let probs = tape.softmax(&logits, 3)?;
    let out = tape.matmul(&probs, &v)?; // [nw, heads, L, d]
    let out = tape.permute(&out, &[0, 2, 1, 3])?;
    let out = tape.reshape(&out, &[nw, l, c])?;
    tape.linear(&out, &params.proj.weight, &params.proj.bias)
}

/// Attention over one flat sequence `[n, C]`: a single window spanning every
/// token, no mask, no shift.
pub fn global_attention<T: Elem>(
    tape: &Tape<T>,
    x: &Var<T>,
    params: &Attention<Var<T>>,
    heads: usize,
    bias_window: Option<[usize; 4]>,
) -> Result<Var<T>> {
    let n = x.shape()[0];
    let c = x.shape()[1];
    let seq = tape.reshape(x, &[1, n, c])?;
    let out = windowed_attention(tape, &seq, params, heads, None, bias_window)?;
    tape.reshape(&out, &[n, c])
}
