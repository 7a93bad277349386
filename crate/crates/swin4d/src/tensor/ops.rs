//! Differentiable tensor operations.
//!
//! Each op validates shapes, computes the forward value, and (on a recording
//! tape) pushes a backward rule that maps the output gradient to one gradient
//! per input. Backward rules capture whatever forward values they need; the
//! shared buffers make those captures cheap.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{numel, strides_of, Elem, Tensor};

/// Below this many scalar multiply-adds a matmul stays on one thread.
const PAR_THRESHOLD: usize = 1 << 16;

fn ensure_same<T: Elem>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_map<T: Elem>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data: Vec<T> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl<T: Elem> Tape<T> {
    // ── elementwise binary ─────────────────────────────────────────────

    pub fn add(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        ensure_same("add", a.value(), b.value())?;
        let out = zip_map(a.value(), b.value(), |x, y| x + y);
        Ok(self.push(
            out,
            vec![a.id, b.id],
            self.is_recording()
                .then(|| -> super::tape::BackFn<T> { Box::new(|g| vec![g.clone(), g.clone()]) }),
        ))
    }

    pub fn sub(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        ensure_same("sub", a.value(), b.value())?;
        let out = zip_map(a.value(), b.value(), |x, y| x - y);
        Ok(self.push(
            out,
            vec![a.id, b.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(|g| vec![g.clone(), g.map(|v| -v)])
            }),
        ))
    }

    pub fn mul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        ensure_same("mul", a.value(), b.value())?;
        let out = zip_map(a.value(), b.value(), |x, y| x * y);
        let (av, bv) = (a.value().clone(), b.value().clone());
        Ok(self.push(
            out,
            vec![a.id, b.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| vec![zip_map(g, &bv, |gv, y| gv * y), zip_map(g, &av, |gv, x| gv * x)])
            }),
        ))
    }

    pub fn div(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        ensure_same("div", a.value(), b.value())?;
        let out = zip_map(a.value(), b.value(), |x, y| x / y);
        let (av, bv) = (a.value().clone(), b.value().clone());
        Ok(self.push(
            out,
            vec![a.id, b.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| {
                    let da = zip_map(g, &bv, |gv, y| gv / y);
                    let db_data: Vec<T> = g
                        .data()
                        .iter()
                        .zip(av.data())
                        .zip(bv.data())
                        .map(|((&gv, &x), &y)| -gv * x / (y * y))
                        .collect();
                    vec![da, Tensor::from_parts(bv.shape().to_vec(), db_data)]
                })
            }),
        ))
    }

    // ── elementwise unary ──────────────────────────────────────────────

    pub fn add_scalar(&self, a: &Var<T>, c: T) -> Var<T> {
        let out = a.value().map(|v| v + c);
        self.push(
            out,
            vec![a.id],
            self.is_recording()
                .then(|| -> super::tape::BackFn<T> { Box::new(|g| vec![g.clone()]) }),
        )
    }

    pub fn mul_scalar(&self, a: &Var<T>, c: T) -> Var<T> {
        let out = a.value().map(|v| v * c);
        self.push(
            out,
            vec![a.id],
            self.is_recording()
                .then(|| -> super::tape::BackFn<T> { Box::new(move |g| vec![g.map(|v| v * c)]) }),
        )
    }

    pub fn neg(&self, a: &Var<T>) -> Var<T> {
        self.mul_scalar(a, -T::one())
    }

    pub fn exp(&self, a: &Var<T>) -> Var<T> {
        let out = a.value().map(|v| v.exp());
        let y = out.clone();
        self.push(
            out,
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| vec![zip_map(g, &y, |gv, yv| gv * yv)])
            }),
        )
    }

    pub fn ln(&self, a: &Var<T>) -> Var<T> {
        let out = a.value().map(|v| v.ln());
        let x = a.value().clone();
        self.push(
            out,
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| vec![zip_map(g, &x, |gv, xv| gv / xv)])
            }),
        )
    }

    pub fn sqrt(&self, a: &Var<T>) -> Var<T> {
        let out = a.value().map(|v| v.sqrt());
        let y = out.clone();
        let half = T::of_f64(0.5);
        self.push(
            out,
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| vec![zip_map(g, &y, |gv, yv| gv * half / yv)])
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self, a: &Var<T>) -> Var<T> {
        let c = T::of_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
        let k = T::of_f64(0.044_715);
        let half = T::of_f64(0.5);
        let three = T::of_f64(3.0);
        let out = a.value().map(|x| {
            let u = c * (x + k * x * x * x);
            half * x * (T::one() + u.tanh())
        });
        let x = a.value().clone();
        self.push(
            out,
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| {
                    let dx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .map(|(&gv, &xv)| {
                            let u = c * (xv + k * xv * xv * xv);
                            let t = u.tanh();
                            let du = c * (T::one() + three * k * xv * xv);
                            gv * (half * (T::one() + t) + half * xv * (T::one() - t * t) * du)
                        })
                        .collect();
                    vec![Tensor::from_parts(x.shape().to_vec(), dx)]
                })
            }),
        )
    }

    // ── matmul ─────────────────────────────────────────────────────────

    /// Batched matrix product. Leading batch extents must match exactly or be
    /// absent on one side (that side is then shared across the batch).
    pub fn matmul(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (ash, bsh) = (a.shape().to_vec(), b.shape().to_vec());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        let abatch = &ash[..ash.len() - 2];
        let bbatch = &bsh[..bsh.len() - 2];
        let (batch, a_batched, b_batched) = if abatch == bbatch {
            (abatch.to_vec(), true, true)
        } else if bbatch.is_empty() {
            (abatch.to_vec(), true, false)
        } else if abatch.is_empty() {
            (bbatch.to_vec(), false, true)
        } else {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ash,
                rhs: bsh,
            });
        }
        let nb = numel(&batch);
        let out = mm_batched(a.value().data(), b.value().data(), nb, m, k, n, a_batched, b_batched);
        let mut out_shape = batch.clone();
        out_shape.push(m);
        out_shape.push(n);
        let (av, bv) = (a.value().clone(), b.value().clone());
        Ok(self.push(
            Tensor::from_parts(out_shape, out),
            vec![a.id, b.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| {
                    let gd = g.data();
                    let (ad, bd) = (av.data(), bv.data());
                    let mut da = vec![T::zero(); ad.len()];
                    let mut db = vec![T::zero(); bd.len()];
                    for batch_i in 0..nb {
                        let go = batch_i * m * n;
                        let ao = if a_batched { batch_i * m * k } else { 0 };
                        let bo = if b_batched { batch_i * k * n } else { 0 };
                        // dA += dC · Bᵀ
                        for i in 0..m {
                            for l in 0..k {
                                let mut acc = T::zero();
                                for j in 0..n {
                                    acc += gd[go + i * n + j] * bd[bo + l * n + j];
                                }
                                da[ao + i * k + l] += acc;
                            }
                        }
                        // dB += Aᵀ · dC
                        for i in 0..m {
                            for l in 0..k {
                                let av = ad[ao + i * k + l];
                                let drow = &mut db[bo + l * n..bo + (l + 1) * n];
                                let grow = &gd[go + i * n..go + (i + 1) * n];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d += av * gv;
                                }
                            }
                        }
                    }
                    vec![
                        Tensor::from_parts(av.shape().to_vec(), da),
                        Tensor::from_parts(bv.shape().to_vec(), db),
                    ]
                })
            }),
        ))
    }

    /// `x · w + bias` over the last axis of `x`; `w` is `[in, out]`, `bias` `[out]`.
    pub fn linear(&self, x: &Var<T>, w: &Var<T>, bias: &Var<T>) -> Result<Var<T>> {
        let xs = x.shape().to_vec();
        let (din, dout) = (w.shape()[0], w.shape()[1]);
        let rows = x.value().len() / din.max(1);
        let flat = self.reshape(x, &[rows, din])?;
        let prod = self.matmul(&flat, w)?;
        let b2 = self.reshape(bias, &[1, dout])?;
        let with_bias = self.add_broadcast(&prod, &b2)?;
        let mut out_shape = xs;
        *out_shape.last_mut().expect("linear input must have rank >= 1") = dout;
        self.reshape(&with_bias, &out_shape)
    }

    // ── softmax / layer norm ───────────────────────────────────────────

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, a: &Var<T>, axis: usize) -> Result<Var<T>> {
        let shape = a.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let lane = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xd = a.value().data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * lane * inner + i;
                let mut mx = T::neg_infinity();
                for l in 0..lane {
                    mx = mx.max(xd[base + l * inner]);
                }
                let mut sum = T::zero();
                for l in 0..lane {
                    let e = (xd[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..lane {
                    out[base + l * inner] /= sum;
                }
            }
        }
        let y = Tensor::from_parts(shape, out);
        let yc = y.clone();
        Ok(self.push(
            y,
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| {
                    let gd = g.data();
                    let yd = yc.data();
                    let mut dx = vec![T::zero(); gd.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * lane * inner + i;
                            let mut dot = T::zero();
                            for l in 0..lane {
                                dot += gd[base + l * inner] * yd[base + l * inner];
                            }
                            for l in 0..lane {
                                let p = base + l * inner;
                                dx[p] = yd[p] * (gd[p] - dot);
                            }
                        }
                    }
                    vec![Tensor::from_parts(yc.shape().to_vec(), dx)]
                })
            }),
        ))
    }

    /// Layer normalization over the last axis with learnable affine.
    pub fn layer_norm(&self, x: &Var<T>, gamma: &Var<T>, beta: &Var<T>, eps: f64) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        let ch = *shape.last().unwrap_or(&1);
        if gamma.shape() != [ch] || beta.shape() != [ch] {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: shape,
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = x.value().len() / ch;
        let xd = x.value().data();
        let gd = gamma.value().data();
        let bd = beta.value().data();
        let epst = T::of_f64(eps);
        let chn = T::of_f64(ch as f64);
        let mut out = vec![T::zero(); xd.len()];
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xd[r * ch..(r + 1) * ch];
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= chn;
            let mut var = T::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var /= chn;
            let iv = (var + epst).sqrt().recip();
            inv[r] = iv;
            for c in 0..ch {
                let h = (row[c] - mean) * iv;
                xhat[r * ch + c] = h;
                out[r * ch + c] = gd[c] * h + bd[c];
            }
        }
        let xhat = Tensor::from_parts(x.shape().to_vec(), xhat);
        let gamma_v = gamma.value().clone();
        let xhat_c = xhat.clone();
        Ok(self.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            vec![x.id, gamma.id, beta.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| {
                    let gd_out = g.data();
                    let hd = xhat_c.data();
                    let gm = gamma_v.data();
                    let mut dx = vec![T::zero(); gd_out.len()];
                    let mut dgamma = vec![T::zero(); ch];
                    let mut dbeta = vec![T::zero(); ch];
                    for r in 0..rows {
                        let mut sum_dh = T::zero();
                        let mut sum_dh_h = T::zero();
                        for c in 0..ch {
                            let p = r * ch + c;
                            let dh = gd_out[p] * gm[c];
                            sum_dh += dh;
                            sum_dh_h += dh * hd[p];
                            dgamma[c] += gd_out[p] * hd[p];
                            dbeta[c] += gd_out[p];
                        }
                        let iv = inv[r];
                        for c in 0..ch {
                            let p = r * ch + c;
                            let dh = gd_out[p] * gm[c];
                            dx[p] = iv * (dh - sum_dh / chn - hd[p] * sum_dh_h / chn);
                        }
                    }
                    vec![
                        Tensor::from_parts(xhat_c.shape().to_vec(), dx),
                        Tensor::from_parts(vec![ch], dgamma),
                        Tensor::from_parts(vec![ch], dbeta),
                    ]
                })
            }),
        ))
    }

    // ── layout ─────────────────────────────────────────────────────────

    /// Row-major relayout to `new_shape`; zero-copy, element count must match.
    pub fn reshape(&self, a: &Var<T>, new_shape: &[usize]) -> Result<Var<T>> {
        let out = a.value().reshaped(new_shape)?;
        let old_shape = a.shape().to_vec();
        Ok(self.push(
            out,
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| vec![g.reshaped(&old_shape).expect("reshape backward")])
            }),
        ))
    }

    /// Axis permutation: output axis `a` is input axis `order[a]`.
    pub fn permute(&self, a: &Var<T>, order: &[usize]) -> Result<Var<T>> {
        let rank = a.shape().len();
        let mut seen = vec![false; rank];
        if order.len() != rank || order.iter().any(|&o| o >= rank || std::mem::replace(&mut seen[o], true)) {
            return Err(Error::InvalidPermutation {
                order: order.to_vec(),
                rank,
            });
        }
        let out = permute_tensor(a.value(), order);
        let mut inverse = vec![0usize; rank];
        for (axis, &o) in order.iter().enumerate() {
            inverse[o] = axis;
        }
        Ok(self.push(
            out,
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| vec![permute_tensor(g, &inverse)])
            }),
        ))
    }

    /// Circular shift per axis; shifts are taken modulo the extent.
    pub fn cyclic_roll(&self, a: &Var<T>, shifts: &[isize]) -> Result<Var<T>> {
        if shifts.len() != a.shape().len() {
            return Err(Error::InvalidArgument(format!(
                "cyclic_roll expects {} shifts, got {}",
                a.shape().len(),
                shifts.len()
            )));
        }
        let out = roll_tensor(a.value(), shifts);
        let neg: Vec<isize> = shifts.iter().map(|&s| -s).collect();
        Ok(self.push(
            out,
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| vec![roll_tensor(g, &neg)])
            }),
        ))
    }

    /// Zero-pad at the trailing (high-index) end of each axis.
    pub fn pad_trailing(&self, a: &Var<T>, pads: &[usize]) -> Result<Var<T>> {
        if pads.len() != a.shape().len() {
            return Err(Error::InvalidArgument(format!(
                "pad_trailing expects {} pads, got {}",
                a.shape().len(),
                pads.len()
            )));
        }
        let out = pad_trailing_tensor(a.value(), pads);
        let pads_v = pads.to_vec();
        Ok(self.push(
            out,
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| vec![crop_trailing_tensor(g, &pads_v)])
            }),
        ))
    }

    /// Drop `crops[axis]` trailing positions from each axis.
    pub fn crop_trailing(&self, a: &Var<T>, crops: &[usize]) -> Result<Var<T>> {
        if crops.len() != a.shape().len() || a.shape().iter().zip(crops).any(|(&d, &c)| c > d) {
            return Err(Error::InvalidArgument(format!(
                "crop_trailing {:?} invalid for shape {:?}",
                crops,
                a.shape()
            )));
        }
        let out = crop_trailing_tensor(a.value(), crops);
        let crops_v = crops.to_vec();
        Ok(self.push(
            out,
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| vec![pad_trailing_tensor(g, &crops_v)])
            }),
        ))
    }

    // ── broadcast / gather ─────────────────────────────────────────────

    /// `x + e` where every axis of `e` either matches `x` or has extent 1.
    pub fn add_broadcast(&self, x: &Var<T>, e: &Var<T>) -> Result<Var<T>> {
        let xs = x.shape().to_vec();
        let es = e.shape().to_vec();
        if es.len() != xs.len() || xs.iter().zip(&es).any(|(&a, &b)| b != a && b != 1) {
            return Err(Error::ShapeMismatch {
                op: "add_broadcast",
                lhs: xs,
                rhs: es,
            });
        }
        let e_strides_full = strides_of(&es);
        let e_strides: Vec<usize> = es
            .iter()
            .zip(&e_strides_full)
            .map(|(&d, &s)| if d == 1 { 0 } else { s })
            .collect();
        let xd = x.value().data();
        let ed = e.value().data();
        let mut out = vec![T::zero(); xd.len()];
        odometer(&xs, &e_strides, |flat, eoff| {
            out[flat] = xd[flat] + ed[eoff];
        });
        let xs_c = xs.clone();
        let es_c = es.clone();
        Ok(self.push(
            Tensor::from_parts(xs, out),
            vec![x.id, e.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| {
                    let gd = g.data();
                    let mut de = vec![T::zero(); numel(&es_c)];
                    let e_strides_full = strides_of(&es_c);
                    let e_strides: Vec<usize> = es_c
                        .iter()
                        .zip(&e_strides_full)
                        .map(|(&d, &s)| if d == 1 { 0 } else { s })
                        .collect();
                    odometer(&xs_c, &e_strides, |flat, eoff| {
                        de[eoff] += gd[flat];
                    });
                    vec![g.clone(), Tensor::from_parts(es_c.clone(), de)]
                })
            }),
        ))
    }

    /// Column gather on a rank-2 tensor: `out[r][j] = x[r][idx[j]]`.
    pub fn gather_cols(&self, x: &Var<T>, idx: &[usize]) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "gather_cols expects rank-2 input, got {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= cols) {
            return Err(Error::InvalidArgument(format!(
                "gather_cols index {bad} out of range {cols}"
            )));
        }
        let xd = x.value().data();
        let j = idx.len();
        let mut out = vec![T::zero(); rows * j];
        for r in 0..rows {
            for (jj, &ix) in idx.iter().enumerate() {
                out[r * j + jj] = xd[r * cols + ix];
            }
        }
        let idx_v = idx.to_vec();
        Ok(self.push(
            Tensor::from_parts(vec![rows, j], out),
            vec![x.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| {
                    let gd = g.data();
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        for (jj, &ix) in idx_v.iter().enumerate() {
                            dx[r * cols + ix] += gd[r * j + jj];
                        }
                    }
                    vec![Tensor::from_parts(vec![rows, cols], dx)]
                })
            }),
        ))
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum_all(&self, a: &Var<T>) -> Var<T> {
        let mut sum = T::zero();
        for &v in a.value().data() {
            sum += v;
        }
        let shape = a.shape().to_vec();
        self.push(
            Tensor::scalar(sum),
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| vec![Tensor::full(&shape, g.item())])
            }),
        )
    }

    pub fn mean_all(&self, a: &Var<T>) -> Var<T> {
        let n = T::of_f64(a.value().len() as f64);
        let s = self.sum_all(a);
        self.mul_scalar(&s, n.recip())
    }

    /// Mean over axis 0 of a rank-2 tensor: `[rows, cols] -> [cols]`.
    pub fn mean_rows(&self, a: &Var<T>) -> Result<Var<T>> {
        let shape = a.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "mean_rows expects rank-2 input, got {shape:?}"
            )));
        }
        let (rows, cols) = (shape[0], shape[1]);
        let xd = a.value().data();
        let rn = T::of_f64(rows as f64);
        let mut out = vec![T::zero(); cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c] += xd[r * cols + c];
            }
        }
        for v in &mut out {
            *v /= rn;
        }
        Ok(self.push(
            Tensor::from_parts(vec![cols], out),
            vec![a.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| {
                    let gd = g.data();
                    let mut dx = vec![T::zero(); rows * cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dx[r * cols + c] = gd[c] / rn;
                        }
                    }
                    vec![Tensor::from_parts(vec![rows, cols], dx)]
                })
            }),
        ))
    }

    /// Inner product of two same-shape tensors, as a scalar.
    pub fn dot(&self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let prod = self.mul(a, b)?;
        Ok(self.sum_all(&prod))
    }

    // ── losses ─────────────────────────────────────────────────────────

    /// Elementwise binary cross entropy on logits, in the stable
    /// `max(x,0) + ln(1+exp(-|x|)) - y*x` form. Labels must be exactly 0 or 1.
    pub fn bce_with_logits(&self, logits: &Var<T>, labels: &Tensor<T>) -> Result<Var<T>> {
        ensure_same("bce_with_logits", logits.value(), labels)?;
        if labels.data().iter().any(|&y| y != T::zero() && y != T::one()) {
            return Err(Error::InvalidArgument(
                "bce_with_logits labels must be 0 or 1".into(),
            ));
        }
        let xd = logits.value().data();
        let yd = labels.data();
        let out: Vec<T> = xd
            .iter()
            .zip(yd)
            .map(|(&x, &y)| x.max(T::zero()) + (-x.abs()).exp().ln_1p() - y * x)
            .collect();
        let x = logits.value().clone();
        let y = labels.clone();
        Ok(self.push(
            Tensor::from_parts(labels.shape().to_vec(), out),
            vec![logits.id],
            self.is_recording().then(|| -> super::tape::BackFn<T> {
                Box::new(move |g| {
                    let dx: Vec<T> = g
                        .data()
                        .iter()
                        .zip(x.data())
                        .zip(y.data())
                        .map(|((&gv, &xv), &yv)| gv * (sigmoid(xv) - yv))
                        .collect();
                    vec![Tensor::from_parts(x.shape().to_vec(), dx)]
                })
            }),
        ))
    }
}

pub(crate) fn sigmoid<T: Elem>(x: T) -> T {
    if x >= T::zero() {
        (T::one() + (-x).exp()).recip()
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Walk all indices of `shape` row-major, yielding the flat index and the
/// offset under `strides` (which may contain zeros for broadcast axes).
fn odometer(shape: &[usize], strides: &[usize], mut f: impl FnMut(usize, usize)) {
    let n = numel(shape);
    if n == 0 {
        return;
    }
    let rank = shape.len();
    let mut counters = vec![0usize; rank];
    let mut off = 0usize;
    for flat in 0..n {
        f(flat, off);
        for ax in (0..rank).rev() {
            counters[ax] += 1;
            off += strides[ax];
            if counters[ax] < shape[ax] {
                break;
            }
            counters[ax] = 0;
            off -= strides[ax] * shape[ax];
        }
    }
}

fn permute_tensor<T: Elem>(x: &Tensor<T>, order: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let in_strides = strides_of(in_shape);
    let out_shape: Vec<usize> = order.iter().map(|&o| in_shape[o]).collect();
    let mapped: Vec<usize> = order.iter().map(|&o| in_strides[o]).collect();
    let xd = x.data();
    let mut out = Vec::with_capacity(xd.len());
    odometer(&out_shape, &mapped, |_, src| out.push(xd[src]));
    Tensor::from_parts(out_shape, out)
}

fn roll_tensor<T: Elem>(x: &Tensor<T>, shifts: &[isize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    // run length: product of trailing axes with zero effective shift
    let norm: Vec<usize> = shifts
        .iter()
        .zip(shape)
        .map(|(&s, &n)| if n == 0 { 0 } else { s.rem_euclid(n as isize) as usize })
        .collect();
    let mut run_axes = rank;
    while run_axes > 0 && norm[run_axes - 1] == 0 {
        run_axes -= 1;
    }
    let run: usize = shape[run_axes..].iter().product();
    let outer_shape = &shape[..run_axes];
    let strides = strides_of(shape);
    let xd = x.data();
    let mut out = vec![T::zero(); xd.len()];
    let mut idx = vec![0usize; run_axes];
    let n_outer = numel(outer_shape);
    for flat_out in 0..n_outer {
        // source index per axis: (i - shift) mod extent
        let mut src = 0usize;
        for ax in 0..run_axes {
            let n = shape[ax];
            let s = norm[ax];
            let i = idx[ax];
            let j = (i + n - s) % n;
            src += j * strides[ax];
        }
        let dst = flat_out * run;
        out[dst..dst + run].copy_from_slice(&xd[src..src + run]);
        for ax in (0..run_axes).rev() {
            idx[ax] += 1;
            if idx[ax] < outer_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn pad_trailing_tensor<T: Elem>(x: &Tensor<T>, pads: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = in_shape.iter().zip(pads).map(|(&d, &p)| d + p).collect();
    let out_strides = strides_of(&out_shape);
    let mut out = vec![T::zero(); numel(&out_shape)];
    let xd = x.data();
    // copy runs along the last axis
    let rank = in_shape.len();
    if rank == 0 {
        return x.clone();
    }
    let run = in_shape[rank - 1];
    let outer = &in_shape[..rank - 1];
    let mut idx = vec![0usize; rank - 1];
    let n_outer = numel(outer);
    for flat in 0..n_outer {
        let mut dst = 0usize;
        for ax in 0..rank - 1 {
            dst += idx[ax] * out_strides[ax];
        }
        out[dst..dst + run].copy_from_slice(&xd[flat * run..(flat + 1) * run]);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < outer[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn crop_trailing_tensor<T: Elem>(x: &Tensor<T>, crops: &[usize]) -> Tensor<T> {
    let in_shape = x.shape();
    let out_shape: Vec<usize> = in_shape.iter().zip(crops).map(|(&d, &c)| d - c).collect();
    let in_strides = strides_of(in_shape);
    let rank = in_shape.len();
    if rank == 0 {
        return x.clone();
    }
    let run = out_shape[rank - 1];
    let outer = &out_shape[..rank - 1];
    let xd = x.data();
    let mut out = Vec::with_capacity(numel(&out_shape));
    let mut idx = vec![0usize; rank - 1];
    let n_outer = numel(outer);
    for _ in 0..n_outer {
        let mut src = 0usize;
        for ax in 0..rank - 1 {
            src += idx[ax] * in_strides[ax];
        }
        out.extend_from_slice(&xd[src..src + run]);
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            if idx[ax] < outer[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

#[allow(clippy::too_many_arguments)]
fn mm_batched<T: Elem>(
    a: &[T],
    b: &[T],
    nb: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
) -> Vec<T> {
    let mut out = vec![T::zero(); nb * m * n];
    let row_kernel = |row: usize, orow: &mut [T]| {
        let batch = row / m;
        let i = row % m;
        let ao = if a_batched { batch * m * k } else { 0 };
        let bo = if b_batched { batch * k * n } else { 0 };
        let arow = &a[ao + i * k..ao + (i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[bo + l * n..bo + (l + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if nb * m * k * n >= PAR_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(row, orow)| row_kernel(row, orow));
    } else {
        for (row, orow) in out.chunks_mut(n).enumerate() {
            row_kernel(row, orow);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_leaves_matrix_unchanged() {
        let tape = Tape::new();
        let eye = tape.watch(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let m = tape.watch(t(&[3, 3], &[2., 7., 1., 8., 2., 8., 1., 8., 3.]));
        let out = tape.matmul(&eye, &m).unwrap();
        assert_eq!(out.value(), m.value());
    }

    #[test]
    fn matmul_permutation_case() {
        let tape = Tape::<f64>::new();
        let a = tape.watch(t(&[2, 2], &[1., 2., 3., 4.]));
        let p = tape.watch(t(&[2, 2], &[0., 1., 1., 0.]));
        let out = tape.matmul(&a, &p).unwrap();
        assert_eq!(out.value().data(), &[2., 1., 4., 3.]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut rng = 37u64;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        };
        let a: Vec<f64> = (0..20).map(|_| next()).collect();
        let b: Vec<f64> = (0..30).map(|_| next()).collect();
        let tape = Tape::new();
        let av = tape.watch(t(&[4, 5], &a));
        let bv = tape.watch(t(&[5, 6], &b));
        let out = tape.matmul(&av, &bv).unwrap();
        for i in 0..4 {
            for j in 0..6 {
                let mut acc = 0.0;
                for l in 0..5 {
                    acc += a[i * 5 + l] * b[l * 6 + j];
                }
                assert!((out.value().data()[i * 6 + j] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let tape = Tape::<f64>::new();
        let a = tape.watch(Tensor::zeros(&[2, 3]));
        let b = tape.watch(Tensor::zeros(&[4, 2]));
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_unbatched_rhs() {
        let tape = Tape::<f64>::new();
        let a = tape.watch(t(&[2, 2, 2], &[1., 0., 0., 1., 2., 0., 0., 2.]));
        let b = tape.watch(t(&[2, 2], &[1., 2., 3., 4.]));
        let out = tape.matmul(&a, &b).unwrap();
        assert_eq!(out.shape(), &[2, 2, 2]);
        assert_eq!(out.value().data(), &[1., 2., 3., 4., 2., 4., 6., 8.]);
    }

    #[test]
    fn softmax_uniform_and_dominance() {
        let tape = Tape::new();
        let x = tape.watch(t(&[3], &[0., 0., 0.]));
        let y = tape.softmax(&x, 0).unwrap();
        for &v in y.value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.watch(t(&[2], &[1000., 0.]));
        let y = tape.softmax(&x, 0).unwrap();
        assert!((y.value().data()[0] - 1.0).abs() < 1e-12);
        assert!(y.value().data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_exp_sum_oracle() {
        let tape = Tape::new();
        let x = tape.watch(t(&[3], &[1., 2., 3.]));
        let y = tape.softmax(&x, 0).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, &v) in y.value().data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new();
        let x = tape.watch(t(&[4], &[5., 5., 5., 5.]));
        let g = tape.watch(Tensor::full(&[4], 1.0));
        let b = tape.watch(Tensor::zeros(&[4]));
        let y = tape.layer_norm(&x, &g, &b, 1e-5).unwrap();
        for &v in y.value().data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_two_point_symmetry() {
        let tape = Tape::new();
        let x = tape.watch(t(&[2], &[1., 3.]));
        let g = tape.watch(Tensor::full(&[2], 1.0));
        let b = tape.watch(Tensor::zeros(&[2]));
        let y = tape.layer_norm(&x, &g, &b, 0.0).unwrap();
        assert!((y.value().data()[0] + 1.0).abs() < 1e-12);
        assert!((y.value().data()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_output_moments() {
        let tape = Tape::new();
        let x = tape.watch(t(&[8], &[0.3, -1.2, 2.4, 0.9, -0.5, 1.7, -2.2, 0.1]));
        let g = tape.watch(Tensor::full(&[8], 1.0));
        let b = tape.watch(Tensor::zeros(&[8]));
        let y = tape.layer_norm(&x, &g, &b, 1e-12).unwrap();
        let mean: f64 = y.value().data().iter().sum::<f64>() / 8.0;
        let var: f64 = y.value().data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "var {var}");
    }

    #[test]
    fn gelu_reference_points() {
        let tape = Tape::new();
        let x = tape.watch(t(&[3], &[0.0, 30.0, -30.0]));
        let y = tape.gelu(&x);
        assert_eq!(y.value().data()[0], 0.0);
        assert!((y.value().data()[1] - 30.0).abs() < 1e-9);
        assert!(y.value().data()[2].abs() < 1e-9);

        // independent scalar evaluation of the tanh form
        let xv = 1.0f64;
        let u = (2.0 / std::f64::consts::PI).sqrt() * (xv + 0.044715 * xv.powi(3));
        let reference = 0.5 * xv * (1.0 + u.tanh());
        let x1 = tape.watch(Tensor::scalar(1.0));
        let y1 = tape.gelu(&x1);
        assert!((y1.item() - reference).abs() < 1e-9);
    }

    #[test]
    fn reshape_round_trip_and_permute_index_map() {
        let tape = Tape::new();
        let x = tape.watch(Tensor::from_fn(&[2, 3, 4], |ix| (ix[0] * 100 + ix[1] * 10 + ix[2]) as f64));
        let r = tape.reshape(&x, &[4, 6]).unwrap();
        let back = tape.reshape(&r, &[2, 3, 4]).unwrap();
        assert_eq!(back.value(), x.value());

        let ident = tape.permute(&x, &[0, 1, 2]).unwrap();
        assert_eq!(ident.value(), x.value());

        // 2x3x4 -> axis order (2,0,1): element (i,j,k) lands at (k,i,j)
        let p = tape.permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(p.value().at(&[k, i, j]), x.value().at(&[i, j, k]));
                }
            }
        }
    }

    #[test]
    fn roll_small_cases() {
        let tape = Tape::new();
        let x = tape.watch(t(&[4], &[1., 2., 3., 4.]));
        let y = tape.cyclic_roll(&x, &[2]).unwrap();
        assert_eq!(y.value().data(), &[3., 4., 1., 2.]);
        let z = tape.cyclic_roll(&x, &[0]).unwrap();
        assert_eq!(z.value(), x.value());
        let back = tape.cyclic_roll(&y, &[-2]).unwrap();
        assert_eq!(back.value(), x.value());
    }

    #[test]
    fn roll_multi_axis_round_trip_exact() {
        let tape = Tape::new();
        let x = tape.watch(Tensor::from_fn(&[3, 4, 5], |ix| {
            (ix[0] * 31 + ix[1] * 7 + ix[2]) as f64 * 0.37
        }));
        let s = [2isize, -3, 7];
        let y = tape.cyclic_roll(&x, &s).unwrap();
        let neg: Vec<isize> = s.iter().map(|v| -v).collect();
        let back = tape.cyclic_roll(&y, &neg).unwrap();
        assert_eq!(back.value(), x.value());
    }

    #[test]
    fn pad_crop_round_trip() {
        let tape = Tape::new();
        let x = tape.watch(Tensor::from_fn(&[2, 3], |ix| (ix[0] * 3 + ix[1]) as f64));
        let p = tape.pad_trailing(&x, &[1, 2]).unwrap();
        assert_eq!(p.shape(), &[3, 5]);
        assert_eq!(p.value().at(&[1, 2]), 5.0);
        assert_eq!(p.value().at(&[2, 4]), 0.0);
        let c = tape.crop_trailing(&p, &[1, 2]).unwrap();
        assert_eq!(c.value(), x.value());
    }

    #[test]
    fn backward_sum_and_square() {
        let tape = Tape::new();
        let x = tape.watch(t(&[3], &[1., -2., 3.]));
        let loss = tape.sum_all(&x);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[1., 1., 1.]);

        let tape = Tape::new();
        let x = tape.watch(t(&[3], &[1., -2., 3.]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[2., -4., 6.]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let tape = Tape::new();
        let x = tape.watch(t(&[2], &[1., 2.]));
        let err = tape.backward(&x).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss { .. }));
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        // f(x) + g(x) gradient equals sum of separate gradients
        let x0 = t(&[4], &[0.5, -1.0, 2.0, 0.25]);

        let run = |which: u8| -> Vec<f64> {
            let tape = Tape::new();
            let x = tape.watch(x0.clone());
            let f = tape.sum_all(&tape.mul(&x, &x).unwrap());
            let g = {
                let e = tape.exp(&x);
                tape.sum_all(&e)
            };
            let loss = match which {
                0 => tape.add(&f, &g).unwrap(),
                1 => f,
                _ => g,
            };
            let grads = tape.backward(&loss).unwrap();
            grads.wrt(&x).unwrap().data().to_vec()
        };
        let combined = run(0);
        let f_only = run(1);
        let g_only = run(2);
        for i in 0..4 {
            assert!((combined[i] - f_only[i] - g_only[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn composite_chain_passes_grad_check() {
        let x = t(&[2, 3], &[0.3, -0.7, 1.2, 0.9, -0.1, 0.4]);
        let w = t(&[3, 3], &[0.5, -0.2, 0.1, 0.3, 0.8, -0.5, 0.2, 0.1, 0.6]);
        let err = grad_check(
            |tape, xv| {
                let wv = tape.watch(w.clone());
                let h = tape.matmul(xv, &wv)?;
                let s = tape.softmax(&h, 1)?;
                let g = tape.watch(Tensor::full(&[3], 1.0));
                let b = tape.watch(Tensor::zeros(&[3]));
                let n = tape.layer_norm(&s, &g, &b, 1e-5)?;
                let e = tape.gelu(&n);
                Ok(tape.sum_all(&e))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "max rel error {err}");
    }

    #[test]
    fn bce_reference_values() {
        let tape = Tape::new();
        let x = tape.watch(t(&[1], &[0.0]));
        let l = tape.bce_with_logits(&x, &t(&[1], &[1.0])).unwrap();
        assert!((l.value().data()[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let x = tape.watch(t(&[1], &[30.0]));
        let l = tape.bce_with_logits(&x, &t(&[1], &[1.0])).unwrap();
        assert!(l.value().data()[0] < 1e-12);

        // naive formula at moderate logits
        let logit = 1.3f64;
        let x = tape.watch(t(&[1], &[logit]));
        let l = tape.bce_with_logits(&x, &t(&[1], &[0.0])).unwrap();
        let s = 1.0 / (1.0 + (-logit).exp());
        assert!((l.value().data()[0] + (1.0 - s).ln()).abs() < 1e-10);
    }

    #[test]
    fn bce_rejects_bad_labels() {
        let tape = Tape::new();
        let x = tape.watch(t(&[1], &[0.0]));
        assert!(tape.bce_with_logits(&x, &t(&[1], &[0.5])).is_err());
    }

    #[test]
    fn add_broadcast_matches_loop_oracle() {
        let tape = Tape::new();
        let x = tape.watch(Tensor::from_fn(&[2, 3, 2], |ix| (ix[0] * 6 + ix[1] * 2 + ix[2]) as f64));
        let e = tape.watch(Tensor::from_fn(&[1, 3, 1], |ix| (ix[1] * 10) as f64));
        let y = tape.add_broadcast(&x, &e).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..2 {
                    let expect = x.value().at(&[i, j, k]) + e.value().at(&[0, j, 0]);
                    assert_eq!(y.value().at(&[i, j, k]), expect);
                }
            }
        }
        // gradient of broadcast operand sums over broadcast axes
        let loss = tape.sum_all(&y);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&e).unwrap().data(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn gather_cols_scatter_adds_gradient() {
        let tape = Tape::new();
        let x = tape.watch(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let g = tape.gather_cols(&x, &[2, 0, 2]).unwrap();
        assert_eq!(g.value().data(), &[3., 1., 3., 6., 4., 6.]);
        let loss = tape.sum_all(&g);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[1., 0., 2., 1., 0., 2.]);
    }

    #[test]
    fn primitive_backwards_match_finite_differences() {
        // every differentiable primitive, 20 seeded random inputs each
        let mut state = 0xfeed_beef_u64;
        let mut uniform = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        for seed in 0..20 {
            let x = Tensor::from_vec(vec![2, 3], (0..6).map(|_| uniform() + 0.1 * seed as f64).collect()).unwrap();
            let y = Tensor::from_vec(vec![2, 3], (0..6).map(|_| uniform() * 0.5 + 2.0).collect()).unwrap();
            let checks: Vec<(&str, f64)> = vec![
                ("add", grad_check(|t, v| { let o = t.watch(y.clone()); let s = t.add(v, &o)?; Ok(t.sum_all(&tape_square(t, &s))) }, &x, 1e-5).unwrap()),
                ("sub", grad_check(|t, v| { let o = t.watch(y.clone()); let s = t.sub(v, &o)?; Ok(t.sum_all(&tape_square(t, &s))) }, &x, 1e-5).unwrap()),
                ("mul", grad_check(|t, v| { let o = t.watch(y.clone()); let s = t.mul(v, &o)?; Ok(t.sum_all(&s)) }, &x, 1e-5).unwrap()),
                ("div", grad_check(|t, v| { let o = t.watch(y.clone()); let s = t.div(v, &o)?; Ok(t.sum_all(&s)) }, &x, 1e-5).unwrap()),
                ("exp", grad_check(|t, v| { let s = t.exp(v); Ok(t.sum_all(&s)) }, &x, 1e-5).unwrap()),
                ("gelu", grad_check(|t, v| { let s = t.gelu(v); Ok(t.sum_all(&s)) }, &x, 1e-5).unwrap()),
                ("softmax", grad_check(|t, v| { let s = t.softmax(v, 1)?; Ok(t.sum_all(&tape_square(t, &s))) }, &x, 1e-5).unwrap()),
                ("matmul", grad_check(|t, v| { let o = t.watch(y.reshaped(&[3, 2]).unwrap()); let s = t.matmul(v, &o)?; Ok(t.sum_all(&tape_square(t, &s))) }, &x, 1e-5).unwrap()),
                ("roll", grad_check(|t, v| { let s = t.cyclic_roll(v, &[1, -2])?; Ok(t.sum_all(&tape_square(t, &s))) }, &x, 1e-5).unwrap()),
                ("pad", grad_check(|t, v| { let s = t.pad_trailing(v, &[1, 1])?; Ok(t.sum_all(&tape_square(t, &s))) }, &x, 1e-5).unwrap()),
                ("mean_rows", grad_check(|t, v| { let s = t.mean_rows(v)?; Ok(t.sum_all(&tape_square(t, &s))) }, &x, 1e-5).unwrap()),
                ("layer_norm", grad_check(|t, v| {
                    let g = t.watch(Tensor::from_vec(vec![3], vec![1.1, 0.9, 1.3]).unwrap());
                    let b = t.watch(Tensor::from_vec(vec![3], vec![0.1, -0.2, 0.0]).unwrap());
                    let s = t.layer_norm(v, &g, &b, 1e-5)?;
                    Ok(t.sum_all(&tape_square(t, &s)))
                }, &x, 1e-5).unwrap()),
            ];
            for (name, err) in checks {
                assert!(err < 1e-4, "seed {seed}: {name} grad error {err}");
            }
        }
    }

    fn tape_square(t: &Tape<f64>, v: &Var<f64>) -> Var<f64> {
        t.mul(v, v).unwrap()
    }

    #[test]
    fn bijection_round_trips_bitwise_both_precisions() {
        fn check<T: Elem>() {
            let tape = Tape::<T>::new();
            let x = tape.watch(Tensor::<T>::from_fn(&[3, 4, 2], |ix| {
                T::of_f64(((ix[0] * 8 + ix[1] * 2 + ix[2]) as f64).sin())
            }));
            let r = tape.reshape(&x, &[4, 6]).unwrap();
            let rb = tape.reshape(&r, &[3, 4, 2]).unwrap();
            assert_eq!(rb.value(), x.value());
            let p = tape.permute(&x, &[2, 0, 1]).unwrap();
            let pb = tape.permute(&p, &[1, 2, 0]).unwrap();
            assert_eq!(pb.value(), x.value());
            let s = [1isize, -3, 1];
            let rolled = tape.cyclic_roll(&x, &s).unwrap();
            let back = tape.cyclic_roll(&rolled, &[-1, 3, -1]).unwrap();
            assert_eq!(back.value(), x.value());
        }
        check::<f32>();
        check::<f64>();
    }
}
