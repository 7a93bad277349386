//! Building blocks of the hierarchy: patch embedding, patch merging,
//! broadcast positional embeddings, the windowed/global transformer blocks,
//! and the pooled prediction head.

use crate::error::{Error, Result};
use crate::model::attention::{global_attention, windowed_attention};
use crate::model::weights::{Block, Head, Linear};
use crate::model::window::{window_partition, window_reverse, WindowGrid};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Embed each `p^3` voxel cube of one frame through a shared linear map.
///
/// Input `[T, H, W, D, 1]`, output `[T, H/p, W/p, D/p, C]`.
pub fn patch_embed<T: Elem>(
    tape: &Tape<T>,
    x: &Var<T>,
    proj: &Linear<Var<T>>,
    patch: usize,
) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    if s.len() != 5 || s[4] != 1 {
        return Err(Error::ShapeMismatch {
            op: "patch_embed",
            lhs: s,
            rhs: vec![0, 0, 0, 0, 1],
        });
    }
    let (t, h, w, d) = (s[0], s[1], s[2], s[3]);
    if h % patch != 0 || w % patch != 0 || d % patch != 0 {
        return Err(Error::Config(format!(
            "spatial dims {h}x{w}x{d} not divisible by patch size {patch}"
        )));
    }
    let (hh, ww, dd) = (h / patch, w / patch, d / patch);
    let split = tape.reshape(x, &[t, hh, patch, ww, patch, dd, patch])?;
    let grouped = tape.permute(&split, &[0, 1, 3, 5, 2, 4, 6])?;
    let flat = tape.reshape(&grouped, &[t, hh, ww, dd, patch * patch * patch])?;
    tape.linear(&flat, &proj.weight, &proj.bias)
}

/// Concatenate each 2x2x2 spatial token group (temporal axis untouched) and
/// project `8C -> 2C`. Gathered channel order: offset `(dh, dw, dd)` occupies
/// channel block `dh*4 + dw*2 + dd`.
pub fn patch_merge<T: Elem>(tape: &Tape<T>, x: &Var<T>, proj: &Linear<Var<T>>) -> Result<Var<T>> {
    let s = x.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::ShapeMismatch {
            op: "patch_merge",
            lhs: s,
            rhs: vec![0; 5],
        });
    }
    let (t, h, w, d, c) = (s[0], s[1], s[2], s[3], s[4]);
    if h % 2 != 0 || w % 2 != 0 || d % 2 != 0 {
        return Err(Error::Config(format!(
            "patch_merge requires even spatial extents, got {h}x{w}x{d}"
        )));
    }
    let split = tape.reshape(x, &[t, h / 2, 2, w / 2, 2, d / 2, 2, c])?;
    let grouped = tape.permute(&split, &[0, 1, 3, 5, 2, 4, 6, 7])?;
    let flat = tape.reshape(&grouped, &[t, h / 2, w / 2, d / 2, 8 * c])?;
    tape.linear(&flat, &proj.weight, &proj.bias)
}

/// `x + spatial + temporal`, both embeddings broadcast: spatial is
/// `[1, H', W', D', C]`, temporal `[T, 1, 1, 1, C]`.
pub fn add_positional_embedding<T: Elem>(
    tape: &Tape<T>,
    x: &Var<T>,
    spatial: &Var<T>,
    temporal: &Var<T>,
) -> Result<Var<T>> {
    let with_spatial = tape.add_broadcast(x, spatial)?;
    tape.add_broadcast(&with_spatial, temporal)
}

fn mlp<T: Elem>(
    tape: &Tape<T>,
    x: &Var<T>,
    fc_in: &Linear<Var<T>>,
    fc_out: &Linear<Var<T>>,
) -> Result<Var<T>> {
    let h = tape.linear(x, &fc_in.weight, &fc_in.bias)?;
    let h = tape.gelu(&h);
    tape.linear(&h, &fc_out.weight, &fc_out.bias)
}

/// One pre-norm residual transformer block with windowed attention:
/// `z_hat = W-MSA(LN(z)) + z; z' = MLP(LN(z_hat)) + z_hat`.
#[allow(clippy::too_many_arguments)]
pub fn swin_block<T: Elem>(
    tape: &Tape<T>,
    z: &Var<T>,
    params: &Block<Var<T>>,
    grid: &WindowGrid,
    mask: Option<&Tensor<T>>,
    heads: usize,
    eps: f64,
) -> Result<Var<T>> {
    let normed = tape.layer_norm(z, &params.norm1.gamma, &params.norm1.beta, eps)?;
    let windows = window_partition(tape, &normed, grid)?;
    let attended = windowed_attention(tape, &windows, &params.attn, heads, mask, Some(grid.window))?;
    let spatial = window_reverse(tape, &attended, grid)?;
    let z_hat = tape.add(z, &spatial)?;

    let normed2 = tape.layer_norm(&z_hat, &params.norm2.gamma, &params.norm2.beta, eps)?;
    let m = mlp(tape, &normed2, &params.mlp_in, &params.mlp_out)?;
    tape.add(&z_hat, &m)
}

/// Two successive blocks: regular window attention first, shifted second.
#[allow(clippy::too_many_arguments)]
pub fn swin_block_pair<T: Elem>(
    tape: &Tape<T>,
    z: &Var<T>,
    first: &Block<Var<T>>,
    second: &Block<Var<T>>,
    window: [usize; 4],
    heads: usize,
    eps: f64,
) -> Result<Var<T>> {
    let token_dims: [usize; 4] = z.shape()[..4].try_into().expect("rank-5 tokens");
    let grid_w = WindowGrid::new(token_dims, window, false);
    let grid_sw = WindowGrid::new(token_dims, window, true);
    let mask_w = grid_w
        .needs_mask()
        .then(|| crate::model::window::build_shift_mask::<T>(&grid_w).per_window);
    let mask_sw = grid_sw
        .needs_mask()
        .then(|| crate::model::window::build_shift_mask::<T>(&grid_sw).per_window);
    let z = swin_block(tape, z, first, &grid_w, mask_w.as_ref(), heads, eps)?;
    swin_block(tape, &z, second, &grid_sw, mask_sw.as_ref(), heads, eps)
}

/// Final-stage block: same residual structure, attention over the full
/// flattened token sequence; no window, no shift, no mask.
pub fn global_block<T: Elem>(
    tape: &Tape<T>,
    z: &Var<T>,
    params: &Block<Var<T>>,
    heads: usize,
    eps: f64,
) -> Result<Var<T>> {
    let s = z.shape().to_vec();
    let token_dims: [usize; 4] = s[..4].try_into().expect("rank-5 tokens");
    let n: usize = token_dims.iter().product();
    let c = s[4];

    let normed = tape.layer_norm(z, &params.norm1.gamma, &params.norm1.beta, eps)?;
    let seq = tape.reshape(&normed, &[n, c])?;
    let attended = global_attention(tape, &seq, &params.attn, heads, Some(token_dims))?;
    let back = tape.reshape(&attended, &s)?;
    let z_hat = tape.add(z, &back)?;

    let normed2 = tape.layer_norm(&z_hat, &params.norm2.gamma, &params.norm2.beta, eps)?;
    let m = mlp(tape, &normed2, &params.mlp_in, &params.mlp_out)?;
    tape.add(&z_hat, &m)
}

/// Global average pool over all four token axes, then a two-layer MLP head.
pub fn pooled_head<T: Elem>(tape: &Tape<T>, features: &Var<T>, head: &Head<Var<T>>) -> Result<Var<T>> {
    let s = features.shape().to_vec();
    let c = *s.last().ok_or_else(|| Error::Config("empty feature shape".into()))?;
    let rows = features.value().len() / c;
    let flat = tape.reshape(features, &[rows, c])?;
    let pooled = tape.mean_rows(&flat)?;
    let pooled = tape.reshape(&pooled, &[1, c])?;
    let h = tape.linear(&pooled, &head.hidden.weight, &head.hidden.bias)?;
    let h = tape.gelu(&h);
    let out = tape.linear(&h, &head.out.weight, &head.out.bias)?;
    let out_dim = head.out.weight.shape()[1];
    tape.reshape(&out, &[out_dim])
}
