//! 4D window partitioning and the shifted-window attention mask.
//!
//! Tokens live on a `[T, H', W', D', C]` grid. Attention groups them into
//! non-overlapping `Pt x M x M x M` windows; the shifted variant displaces the
//! partition by half a window. Shifted attention is computed with the regular
//! partition by cyclically rolling the grid and masking token pairs that were
//! not neighbors in the displaced partition.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Metadata for one window partition of a token grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowGrid {
    pub token_dims: [usize; 4],
    pub window: [usize; 4],
    pub shift: [usize; 4],
    /// Trailing zero-pad per axis bringing extents to ceiling multiples.
    pub pad: [usize; 4],
    /// Windows per axis: `ceil(token_dims / window)`.
    pub counts: [usize; 4],
}

impl WindowGrid {
    pub fn new(token_dims: [usize; 4], window: [usize; 4], shifted: bool) -> Self {
        let counts = std::array::from_fn(|a| token_dims[a].div_ceil(window[a]));
        let pad = std::array::from_fn(|a| counts[a] * window[a] - token_dims[a]);
        let shift = if shifted {
            std::array::from_fn(|a| window[a] / 2)
        } else {
            [0; 4]
        };
        Self {
            token_dims,
            window,
            shift,
            pad,
            counts,
        }
    }

    pub fn padded_dims(&self) -> [usize; 4] {
        std::array::from_fn(|a| self.token_dims[a] + self.pad[a])
    }

    pub fn num_windows(&self) -> usize {
        self.counts.iter().product()
    }

    /// Tokens per window.
    pub fn window_len(&self) -> usize {
        self.window.iter().product()
    }

    pub fn has_shift(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    pub fn has_pad(&self) -> bool {
        self.pad.iter().any(|&p| p > 0)
    }

    /// True when attention needs an additive mask (shift or padding present).
    pub fn needs_mask(&self) -> bool {
        self.has_shift() || self.has_pad()
    }
}

/// Additive attention mask, one `[L, L]` matrix per window: 0 for permitted
/// pairs, a large negative value for pairs split by the displaced partition
/// and for padded key positions.
#[derive(Debug, Clone)]
pub struct AttentionMask<T: Elem> {
    /// Shape `[num_windows, L, L]`.
    pub per_window: Tensor<T>,
}

/// Tile the token grid into windows: pad to ceiling multiples, roll by
/// `-shift` when shifted, then gather each window's tokens.
///
/// Input `[T, H', W', D', C]`, output `[num_windows, window_len, C]`.
pub fn window_partition<T: Elem>(
    tape: &Tape<T>,
    x: &Var<T>,
    grid: &WindowGrid,
) -> Result<Var<T>> {
    let shape = x.shape();
    if shape.len() != 5 || shape[..4] != grid.token_dims {
        return Err(Error::ShapeMismatch {
            op: "window_partition",
            lhs: shape.to_vec(),
            rhs: grid.token_dims.to_vec(),
        });
    }
    let ch = shape[4];
    let mut cur = x.clone();
    if grid.has_pad() {
        let mut pads = grid.pad.to_vec();
        pads.push(0);
        cur = tape.pad_trailing(&cur, &pads)?;
    }
    if grid.has_shift() {
        let mut shifts: Vec<isize> = grid.shift.iter().map(|&s| -(s as isize)).collect();
        shifts.push(0);
        cur = tape.cyclic_roll(&cur, &shifts)?;
    }
    let c = grid.counts;
    let w = grid.window;
    let split = [c[0], w[0], c[1], w[1], c[2], w[2], c[3], w[3], ch];
    let cur = tape.reshape(&cur, &split)?;
    let cur = tape.permute(&cur, &[0, 2, 4, 6, 1, 3, 5, 7, 8])?;
    tape.reshape(&cur, &[grid.num_windows(), grid.window_len(), ch])
}

/// Exact inverse of [`window_partition`]: scatter windows back, roll by
/// `+shift`, and drop the padding.
pub fn window_reverse<T: Elem>(
    tape: &Tape<T>,
    windows: &Var<T>,
    grid: &WindowGrid,
) -> Result<Var<T>> {
    let shape = windows.shape();
    if shape.len() != 3 || shape[0] != grid.num_windows() || shape[1] != grid.window_len() {
        return Err(Error::ShapeMismatch {
            op: "window_reverse",
            lhs: shape.to_vec(),
            rhs: vec![grid.num_windows(), grid.window_len()],
        });
    }
    let ch = shape[2];
    let c = grid.counts;
    let w = grid.window;
    let cur = tape.reshape(windows, &[c[0], c[1], c[2], c[3], w[0], w[1], w[2], w[3], ch])?;
    let cur = tape.permute(&cur, &[0, 4, 1, 5, 2, 6, 3, 7, 8])?;
    let padded = grid.padded_dims();
    let mut cur = tape.reshape(&cur, &[padded[0], padded[1], padded[2], padded[3], ch])?;
    if grid.has_shift() {
        let mut shifts: Vec<isize> = grid.shift.iter().map(|&s| s as isize).collect();
        shifts.push(0);
        cur = tape.cyclic_roll(&cur, &shifts)?;
    }
    if grid.has_pad() {
        let mut crops = grid.pad.to_vec();
        crops.push(0);
        cur = tape.crop_trailing(&cur, &crops)?;
    }
    Ok(cur)
}

/// Region id of a post-roll coordinate. The three per-axis regions
/// `[0, E-w)`, `[E-w, E-s)`, `[E-s, E)` distinguish tokens that belonged to
/// different windows of the displaced partition once the grid has been rolled
/// by `-s`.
fn region_id(pos: usize, extent: usize, window: usize, shift: usize) -> usize {
    if shift > 0 && pos >= extent - shift {
        2
    } else if pos >= extent.saturating_sub(window) {
        1
    } else {
        0
    }
}

/// Build the additive mask for one grid. Pairs whose 4D region ids differ get
/// the large negative value, as do all pairs whose key lies in the padding.
pub fn build_shift_mask<T: Elem>(grid: &WindowGrid) -> AttentionMask<T> {
    let padded = grid.padded_dims();
    let w = grid.window;
    let nw = grid.num_windows();
    let l = grid.window_len();
    let neg = T::mask_neg_large();

    // per post-roll token: (combined region id, is_pad)
    let label = |coord: [usize; 4]| -> (usize, bool) {
        let mut rid = 0usize;
        let mut pad = false;
        for a in 0..4 {
            rid = rid * 3 + region_id(coord[a], padded[a], w[a], grid.shift[a]);
            // pre-roll coordinate decides padding
            let orig = (coord[a] + grid.shift[a]) % padded[a];
            pad |= orig >= grid.token_dims[a];
        }
        (rid, pad)
    };

    let mut mask = vec![T::zero(); nw * l * l];
    let c = grid.counts;
    let mut labels = vec![(0usize, false); l];
    for wt in 0..c[0] {
        for wh in 0..c[1] {
            for ww in 0..c[2] {
                for wd in 0..c[3] {
                    let widx = ((wt * c[1] + wh) * c[2] + ww) * c[3] + wd;
                    let mut i = 0;
                    for dt in 0..w[0] {
                        for dh in 0..w[1] {
                            for dw in 0..w[2] {
                                for dd in 0..w[3] {
                                    labels[i] = label([
                                        wt * w[0] + dt,
                                        wh * w[1] + dh,
                                        ww * w[2] + dw,
                                        wd * w[3] + dd,
                                    ]);
                                    i += 1;
                                }
                            }
                        }
                    }
                    let base = widx * l * l;
                    for qi in 0..l {
                        let (rq, pq) = labels[qi];
                        for kj in 0..l {
                            let (rk, pk) = labels[kj];
                            if pq || pk || rq != rk {
                                mask[base + qi * l + kj] = neg;
                            }
                        }
                    }
                }
            }
        }
    }
    AttentionMask {
        per_window: Tensor::from_parts(vec![nw, l, l], mask),
    }
}
