//! Independent reference implementations used to verify the main code paths.
//!
//! Everything here is deliberately naive: plain `f64` loops, no shared code
//! with the tensor engine or the model. The headline routine is
//! [`shifted_window_attention_reference`], which evaluates shifted-window
//! attention by enumerating the displaced window groups directly instead of
//! using the cyclic-roll-plus-mask trick.

use crate::model::weights::{Attention, Linear};
use crate::tensor::{Tensor, Var};

/// Plain triple-loop matrix product.
pub fn matmul_reference(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[i * k + l] * b[l * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Direct `exp / sum(exp)` softmax of one row (with max subtraction).
pub fn softmax_reference(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Per-axis segments of the displaced window partition.
///
/// Boundaries sit at `shift + k*window`, clipped to `[0, extent)`; with zero
/// shift this degenerates to the regular ceiling partition.
pub fn displaced_segments(extent: usize, window: usize, shift: usize) -> Vec<(usize, usize)> {
    let mut cuts = vec![0usize];
    let mut b = if shift == 0 { window } else { shift };
    while b < extent {
        cuts.push(b);
        b += window;
    }
    cuts.push(extent);
    cuts.windows(2).map(|w| (w[0], w[1])).collect()
}

/// Number of windows in the displaced (shifted) partition of a 4D grid.
pub fn shifted_window_count(token_dims: [usize; 4], window: [usize; 4]) -> usize {
    (0..4)
        .map(|a| displaced_segments(token_dims[a], window[a], window[a] / 2).len())
        .product()
}

struct LinearRef {
    w: Vec<f64>, // [din, dout]
    b: Vec<f64>,
    din: usize,
    dout: usize,
}

impl LinearRef {
    fn of(l: &Linear<Var<f64>>) -> Self {
        Self {
            w: l.weight.value().data().to_vec(),
            b: l.bias.value().data().to_vec(),
            din: l.weight.shape()[0],
            dout: l.weight.shape()[1],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.b.clone();
        for l in 0..self.din {
            for j in 0..self.dout {
                out[j] += x[l] * self.w[l * self.dout + j];
            }
        }
        out
    }
}

/// Reference multi-head attention over one explicit token group.
///
/// `tokens` are flat indices into `x` (row-major over the 4D grid); `coords`
/// are their 4D coordinates, used only for the optional relative bias. The
/// attended outputs are written back to the same indices of `out`.
#[allow(clippy::too_many_arguments)]
fn attend_group(
    x: &[f64],
    out: &mut [f64],
    tokens: &[usize],
    coords: &[[usize; 4]],
    params: &Attention<Var<f64>>,
    heads: usize,
    channels: usize,
    bias_window: Option<[usize; 4]>,
) {
    let d = channels / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let (wq, wk, wv, wo) = (
        LinearRef::of(&params.query),
        LinearRef::of(&params.key),
        LinearRef::of(&params.value),
        LinearRef::of(&params.proj),
    );
    let n = tokens.len();
    let q: Vec<Vec<f64>> = tokens.iter().map(|&t| wq.apply(&x[t * channels..(t + 1) * channels])).collect();
    let k: Vec<Vec<f64>> = tokens.iter().map(|&t| wk.apply(&x[t * channels..(t + 1) * channels])).collect();
    let v: Vec<Vec<f64>> = tokens.iter().map(|&t| wv.apply(&x[t * channels..(t + 1) * channels])).collect();

    let bias = params.bias_table.as_ref().map(|t| {
        let table = t.value().data().to_vec();
        let cols = t.value().shape()[1];
        (table, cols)
    });

    let mut attended = vec![0.0; n * channels];
    for h in 0..heads {
        for i in 0..n {
            let mut logits = vec![0.0; n];
            for j in 0..n {
                let mut dotp = 0.0;
                for c in 0..d {
                    dotp += q[i][h * d + c] * k[j][h * d + c];
                }
                logits[j] = dotp * scale;
                if let (Some((table, cols)), Some(bw)) = (&bias, bias_window) {
                    // bias index from the in-window coordinate difference
                    let mut flat = 0usize;
                    for a in 0..4 {
                        let delta = coords[i][a] + bw[a] - 1 - coords[j][a];
                        flat = flat * (2 * bw[a] - 1) + delta;
                    }
                    logits[j] += table[h * cols + flat];
                }
            }
            let probs = softmax_reference(&logits);
            for j in 0..n {
                for c in 0..d {
                    attended[i * channels + h * d + c] += probs[j] * v[j][h * d + c];
                }
            }
        }
    }
    for (i, &t) in tokens.iter().enumerate() {
        let o = wo.apply(&attended[i * channels..(i + 1) * channels]);
        out[t * channels..(t + 1) * channels].copy_from_slice(&o);
    }
}

/// Shifted-window attention by direct enumeration of displaced groups.
///
/// `x` is `[T, H', W', D', C]`. Only real tokens participate; there is no
/// padding, no roll, and no mask. With `shift == [0; 4]` this evaluates
/// regular window attention on the ceiling partition.
pub fn shifted_window_attention_reference(
    x: &Tensor<f64>,
    params: &Attention<Var<f64>>,
    heads: usize,
    window: [usize; 4],
    shift: [usize; 4],
    use_bias: bool,
) -> Tensor<f64> {
    let s = x.shape();
    let dims = [s[0], s[1], s[2], s[3]];
    let channels = s[4];
    let xd = x.data();
    let mut out = vec![0.0; xd.len()];

    let segs: Vec<Vec<(usize, usize)>> = (0..4)
        .map(|a| displaced_segments(dims[a], window[a], shift[a]))
        .collect();
    let strides = [dims[1] * dims[2] * dims[3], dims[2] * dims[3], dims[3], 1];

    for st in &segs[0] {
        for sh in &segs[1] {
            for sw in &segs[2] {
                for sd in &segs[3] {
                    let mut tokens = Vec::new();
                    let mut coords = Vec::new();
                    for t in st.0..st.1 {
                        for h in sh.0..sh.1 {
                            for w in sw.0..sw.1 {
                                for d in sd.0..sd.1 {
                                    tokens.push(t * strides[0] + h * strides[1] + w * strides[2] + d);
                                    // in-window coordinates relative to the group origin
                                    coords.push([t - st.0, h - sh.0, w - sw.0, d - sd.0]);
                                }
                            }
                        }
                    }
                    attend_group(
                        xd,
                        &mut out,
                        &tokens,
                        &coords,
                        params,
                        heads,
                        channels,
                        use_bias.then_some(window),
                    );
                }
            }
        }
    }
    Tensor::from_f64_slice(s, &out).expect("shape preserved")
}

/// Rank-statistic AUC by explicit pair counting: ties contribute one half.
pub fn auc_pair_counting(scores: &[f64], labels: &[u8]) -> f64 {
    let mut pairs = 0.0f64;
    let mut wins = 0.0f64;
    for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
        for (&sj, &lj) in scores.iter().zip(labels).skip(i + 1) {
            let (pos, neg) = match (li, lj) {
                (1, 0) => (si, sj),
                (0, 1) => (sj, si),
                _ => continue,
            };
            pairs += 1.0;
            if pos > neg {
                wins += 1.0;
            } else if pos == neg {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        return f64::NAN;
    }
    wins / pairs
}
