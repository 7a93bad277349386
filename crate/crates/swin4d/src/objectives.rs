//! Training objectives: supervised BCE/MSE plus the two contrastive
//! pre-training losses.
//!
//! Both contrastive losses score pairs with `h(u, v) = exp(cos(u, v))` and
//! exclude the positive pair from the denominator:
//!
//! * instance loss, anchor `f[i][0]`:
//!   `-log( h(f[i][0], f[i][1]) / sum_{j != i} (h(f[i][0], f[j][0]) + h(f[i][0], f[j][1])) )`
//! * local-local loss over sub-sequences `p` of one subject, with `ft[p]` a
//!   differently augmented view of `f[p]`:
//!   `-sum_p log( h(f[p], ft[p]) / sum_{q != p} (h(f[p], f[q]) + h(f[p], ft[q])) )`
//!
//! Batch reduction is the mean over subjects, keeping the loss scale
//! independent of batch size.

use crate::error::{Error, Result};
use crate::tensor::{Elem, Tape, Tensor, Var};

/// Mean stable binary cross entropy over logit/label pairs.
pub fn bce_loss<T: Elem>(tape: &Tape<T>, logits: &Var<T>, labels: &Tensor<T>) -> Result<Var<T>> {
    let per = tape.bce_with_logits(logits, labels)?;
    Ok(tape.mean_all(&per))
}

/// Mean squared error.
pub fn mse_loss<T: Elem>(tape: &Tape<T>, preds: &Var<T>, targets: &Tensor<T>) -> Result<Var<T>> {
    let t = tape.watch(targets.clone());
    let diff = tape.sub(preds, &t)?;
    let sq = tape.mul(&diff, &diff)?;
    Ok(tape.mean_all(&sq))
}

/// Exponential of the cosine similarity of two vectors, optionally sharpened
/// by a temperature (`exp(cos / tau)`, default `tau = 1`).
pub fn cos_exp<T: Elem>(tape: &Tape<T>, u: &Var<T>, v: &Var<T>, temperature: f64) -> Result<Var<T>> {
    let nu: f64 = u.value().data().iter().map(|x| (x.as_f64()).powi(2)).sum();
    let nv: f64 = v.value().data().iter().map(|x| (x.as_f64()).powi(2)).sum();
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot = tape.dot(u, v)?;
    let uu = tape.dot(u, u)?;
    let vv = tape.dot(v, v)?;
    let norms = tape.sqrt(&tape.mul(&uu, &vv)?);
    let cos = tape.div(&dot, &norms)?;
    let scaled = if temperature == 1.0 {
        cos
    } else {
        tape.mul_scalar(&cos, T::of_f64(1.0 / temperature))
    };
    Ok(tape.exp(&scaled))
}

#[derive(Debug, Clone, Copy)]
pub struct ContrastiveOpts {
    pub temperature: f64,
    /// Also anchor the second view and average both directions.
    pub symmetric: bool,
}

impl Default for ContrastiveOpts {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            symmetric: false,
        }
    }
}

/// Instance contrastive loss over a batch of subjects, two sub-sequence
/// representations each. Requires at least two subjects (the denominator
/// enumerates the other subjects' views).
pub fn instance_contrastive_loss<T: Elem>(
    tape: &Tape<T>,
    reps: &[[Var<T>; 2]],
    opts: ContrastiveOpts,
) -> Result<Var<T>> {
    let b = reps.len();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "instance contrastive loss needs at least 2 subjects, got {b}"
        )));
    }
    let one_direction = |anchor_view: usize, other_view: usize| -> Result<Var<T>> {
        let mut total: Option<Var<T>> = None;
        for i in 0..b {
            let anchor = &reps[i][anchor_view];
            let num = cos_exp(tape, anchor, &reps[i][other_view], opts.temperature)?;
            let mut den: Option<Var<T>> = None;
            for (j, pair) in reps.iter().enumerate() {
                if j == i {
                    continue;
                }
                for view in pair {
                    let h = cos_exp(tape, anchor, view, opts.temperature)?;
                    den = Some(match den {
                        Some(d) => tape.add(&d, &h)?,
                        None => h,
                    });
                }
            }
            let den = den.expect("b >= 2 guarantees negatives");
            let ratio = tape.div(&num, &den)?;
            let term = tape.neg(&tape.ln(&ratio));
            total = Some(match total {
                Some(t) => tape.add(&t, &term)?,
                None => term,
            });
        }
        Ok(tape.mul_scalar(&total.expect("nonempty batch"), T::of_f64(1.0 / b as f64)))
    };
    let forward = one_direction(0, 1)?;
    if opts.symmetric {
        let backward = one_direction(1, 0)?;
        let sum = tape.add(&forward, &backward)?;
        Ok(tape.mul_scalar(&sum, T::of_f64(0.5)))
    } else {
        Ok(forward)
    }
}

/// Local-local temporal contrastive loss for the sub-sequences of single
/// subjects. `views` holds per subject the pair `(f, f_tilde)`: `N`
/// sub-sequence representations and their re-augmented counterparts.
pub fn local_local_loss<T: Elem>(
    tape: &Tape<T>,
    views: &[(Vec<Var<T>>, Vec<Var<T>>)],
    opts: ContrastiveOpts,
) -> Result<Var<T>> {
    if views.is_empty() {
        return Err(Error::InvalidArgument("empty local-local batch".into()));
    }
    let mut total: Option<Var<T>> = None;
    for (f, ft) in views {
        let n = f.len();
        if n < 2 || ft.len() != n {
            return Err(Error::InvalidArgument(format!(
                "local-local loss needs N >= 2 matched views, got {n} and {}",
                ft.len()
            )));
        }
        let mut subject: Option<Var<T>> = None;
        for p in 0..n {
            let anchor = &f[p];
            let num = cos_exp(tape, anchor, &ft[p], opts.temperature)?;
            let mut den: Option<Var<T>> = None;
            for q in 0..n {
                if q == p {
                    continue;
                }
                for view in [&f[q], &ft[q]] {
                    let h = cos_exp(tape, anchor, view, opts.temperature)?;
                    den = Some(match den {
                        Some(d) => tape.add(&d, &h)?,
                        None => h,
                    });
                }
            }
            let den = den.expect("n >= 2 guarantees negatives");
            let ratio = tape.div(&num, &den)?;
            let term = tape.neg(&tape.ln(&ratio));
            subject = Some(match subject {
                Some(s) => tape.add(&s, &term)?,
                None => term,
            });
        }
        let subject = subject.expect("n >= 2");
        total = Some(match total {
            Some(t) => tape.add(&t, &subject)?,
            None => subject,
        });
    }
    Ok(tape.mul_scalar(
        &total.expect("nonempty"),
        T::of_f64(1.0 / views.len() as f64),
    ))
}

/// Pre-training objective: plain sum of the two losses.
pub fn combined_pretrain_loss<T: Elem>(tape: &Tape<T>, ic: &Var<T>, ll: &Var<T>) -> Result<Var<T>> {
    tape.add(ic, ll)
}

/// Contrastive batch as plain tensors, for evaluation outside a training
/// tape.
#[derive(Debug, Clone)]
pub enum ContrastiveBatch<T: Elem> {
    /// `reps[i] = [f_i_1, f_i_2]` over subjects `i`.
    Instance { reps: Vec<[Tensor<T>; 2]> },
    /// Per subject: `(f[p], f_tilde[p])` over sub-sequences `p`.
    LocalLocal {
        views: Vec<(Vec<Tensor<T>>, Vec<Tensor<T>>)>,
    },
}

impl<T: Elem> ContrastiveBatch<T> {
    pub fn evaluate(&self, opts: ContrastiveOpts) -> Result<f64> {
        let tape = Tape::inference();
        let loss = match self {
            ContrastiveBatch::Instance { reps } => {
                if reps.len() < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "instance batch needs B >= 2, got {}",
                        reps.len()
                    )));
                }
                let vars: Vec<[Var<T>; 2]> = reps
                    .iter()
                    .map(|[a, b]| [tape.watch(a.clone()), tape.watch(b.clone())])
                    .collect();
                instance_contrastive_loss(&tape, &vars, opts)?
            }
            ContrastiveBatch::LocalLocal { views } => {
                let vars: Vec<(Vec<Var<T>>, Vec<Var<T>>)> = views
                    .iter()
                    .map(|(f, ft)| {
                        (
                            f.iter().map(|t| tape.watch(t.clone())).collect(),
                            ft.iter().map(|t| tape.watch(t.clone())).collect(),
                        )
                    })
                    .collect();
                local_local_loss(&tape, &vars, opts)?
            }
        };
        Ok(loss.item().as_f64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, axis: usize) -> Tensor<f64> {
        Tensor::from_fn(&[dim], |ix| if ix[0] == axis { 1.0 } else { 0.0 })
    }

    fn watch_pairs(tape: &Tape<f64>, reps: &[[Tensor<f64>; 2]]) -> Vec<[Var<f64>; 2]> {
        reps.iter()
            .map(|[a, b]| [tape.watch(a.clone()), tape.watch(b.clone())])
            .collect()
    }

    #[test]
    fn bce_and_mse_reference_values() {
        let tape = Tape::new();
        let logits = tape.watch(Tensor::from_vec(vec![1], vec![0.0]).unwrap());
        let l = bce_loss(&tape, &logits, &Tensor::from_vec(vec![1], vec![1.0]).unwrap()).unwrap();
        assert!((l.item() - std::f64::consts::LN_2).abs() < 1e-12);

        let preds = tape.watch(Tensor::from_vec(vec![2], vec![1.0, 3.0]).unwrap());
        let targets = Tensor::from_vec(vec![2], vec![0.0, 1.0]).unwrap();
        let m = mse_loss(&tape, &preds, &targets).unwrap();
        assert!((m.item() - 2.5).abs() < 1e-12);
        let zero = mse_loss(&tape, &preds, &Tensor::from_vec(vec![2], vec![1.0, 3.0]).unwrap()).unwrap();
        assert_eq!(zero.item(), 0.0);
    }

    #[test]
    fn cos_exp_reference_values() {
        let tape = Tape::new();
        let u = tape.watch(Tensor::from_vec(vec![2], vec![3.0, 0.0]).unwrap());
        let v = tape.watch(Tensor::from_vec(vec![2], vec![7.0, 0.0]).unwrap());
        let same = cos_exp(&tape, &u, &v, 1.0).unwrap();
        assert!((same.item() - std::f64::consts::E).abs() < 1e-12);

        let w = tape.watch(Tensor::from_vec(vec![2], vec![0.0, 5.0]).unwrap());
        let orth = cos_exp(&tape, &u, &w, 1.0).unwrap();
        assert!((orth.item() - 1.0).abs() < 1e-12);

        let neg = tape.watch(Tensor::from_vec(vec![2], vec![-1.0, 0.0]).unwrap());
        let opp = cos_exp(&tape, &u, &neg, 1.0).unwrap();
        assert!((opp.item() - (-1.0f64).exp()).abs() < 1e-12);

        let zero = tape.watch(Tensor::zeros(&[2]));
        assert!(matches!(cos_exp(&tape, &u, &zero, 1.0), Err(Error::ZeroVector)));
    }

    #[test]
    fn instance_loss_orthogonal_cases() {
        // all four representations mutually orthogonal: every h is 1,
        // denominator 2, per-subject loss ln 2
        let reps = vec![[unit(4, 0), unit(4, 1)], [unit(4, 2), unit(4, 3)]];
        let batch = ContrastiveBatch::Instance { reps };
        let loss = batch.evaluate(ContrastiveOpts::default()).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12, "{loss}");

        // positive views identical, cross-subject orthogonal: -log(e/2)
        let reps = vec![[unit(4, 0), unit(4, 0)], [unit(4, 1), unit(4, 1)]];
        let batch = ContrastiveBatch::Instance { reps };
        let loss = batch.evaluate(ContrastiveOpts::default()).unwrap();
        assert!((loss - (std::f64::consts::LN_2 - 1.0)).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn instance_loss_excludes_positive_from_denominator() {
        // with the positive wrongly included the orthogonal case would give
        // ln 3; the correct value is ln 2
        let reps = vec![[unit(4, 0), unit(4, 1)], [unit(4, 2), unit(4, 3)]];
        let loss = ContrastiveBatch::Instance { reps }
            .evaluate(ContrastiveOpts::default())
            .unwrap();
        let ln3 = 3.0f64.ln();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-9);
        assert!((loss - ln3).abs() > 0.3, "loss {loss} too close to ln3 {ln3}");
    }

    #[test]
    fn instance_loss_matches_double_loop_oracle() {
        // B = 3 pseudo-random unit-ish vectors
        let mk = |vals: [f64; 3]| Tensor::from_vec(vec![3], vals.to_vec()).unwrap();
        let reps = vec![
            [mk([0.8, 0.1, -0.3]), mk([0.7, 0.2, -0.1])],
            [mk([-0.2, 0.9, 0.4]), mk([0.1, 0.8, 0.5])],
            [mk([0.3, -0.5, 0.7]), mk([0.2, -0.4, 0.9])],
        ];
        let got = ContrastiveBatch::Instance { reps: reps.clone() }
            .evaluate(ContrastiveOpts::default())
            .unwrap();

        let h = |u: &Tensor<f64>, v: &Tensor<f64>| -> f64 {
            let dot: f64 = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
            let nu: f64 = u.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv: f64 = v.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            (dot / (nu * nv)).exp()
        };
        let mut expect = 0.0;
        for i in 0..3 {
            let num = h(&reps[i][0], &reps[i][1]);
            let mut den = 0.0;
            for j in 0..3 {
                if j != i {
                    den += h(&reps[i][0], &reps[j][0]) + h(&reps[i][0], &reps[j][1]);
                }
            }
            expect += -(num / den).ln();
        }
        expect /= 3.0;
        assert!((got - expect).abs() < 1e-10, "got {got} expect {expect}");
    }

    #[test]
    fn local_local_orthogonal_cases() {
        // f_tilde == f, cross-p orthogonal: per p term -log(e/2), total 2(ln2 - 1)
        let f = vec![unit(4, 0), unit(4, 1)];
        let batch = ContrastiveBatch::LocalLocal {
            views: vec![(f.clone(), f)],
        };
        let loss = batch.evaluate(ContrastiveOpts::default()).unwrap();
        let expect = 2.0 * (std::f64::consts::LN_2 - 1.0);
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");

        // everything orthogonal including f_tilde: per p term ln 2, total 2 ln 2
        let batch = ContrastiveBatch::LocalLocal {
            views: vec![(vec![unit(8, 0), unit(8, 1)], vec![unit(8, 2), unit(8, 3)])],
        };
        let loss = batch.evaluate(ContrastiveOpts::default()).unwrap();
        assert!((loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn local_local_matches_double_loop_oracle() {
        let mk = |vals: [f64; 3]| Tensor::from_vec(vec![3], vals.to_vec()).unwrap();
        let f = vec![mk([0.6, 0.3, -0.2]), mk([-0.1, 0.8, 0.3]), mk([0.4, -0.4, 0.6])];
        let ft = vec![mk([0.5, 0.4, -0.1]), mk([0.0, 0.9, 0.2]), mk([0.5, -0.3, 0.7])];
        let got = ContrastiveBatch::LocalLocal {
            views: vec![(f.clone(), ft.clone())],
        }
        .evaluate(ContrastiveOpts::default())
        .unwrap();

        let h = |u: &Tensor<f64>, v: &Tensor<f64>| -> f64 {
            let dot: f64 = u.data().iter().zip(v.data()).map(|(a, b)| a * b).sum();
            let nu: f64 = u.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv: f64 = v.data().iter().map(|a| a * a).sum::<f64>().sqrt();
            (dot / (nu * nv)).exp()
        };
        let mut expect = 0.0;
        for p in 0..3 {
            let num = h(&f[p], &ft[p]);
            let mut den = 0.0;
            for q in 0..3 {
                if q != p {
                    den += h(&f[p], &f[q]) + h(&f[p], &ft[q]);
                }
            }
            expect += -(num / den).ln();
        }
        assert!((got - expect).abs() < 1e-10, "got {got} expect {expect}");
    }

    #[test]
    fn losses_are_scale_invariant() {
        let mk = |vals: [f64; 3]| Tensor::from_vec(vec![3], vals.to_vec()).unwrap();
        let reps = vec![
            [mk([0.8, 0.1, -0.3]), mk([0.7, 0.2, -0.1])],
            [mk([-0.2, 0.9, 0.4]), mk([0.1, 0.8, 0.5])],
        ];
        let base = ContrastiveBatch::Instance { reps: reps.clone() }
            .evaluate(ContrastiveOpts::default())
            .unwrap();
        let scaled: Vec<[Tensor<f64>; 2]> = reps
            .iter()
            .map(|[a, b]| [a.map(|v| v * 37.5), b.map(|v| v * 0.004)])
            .collect();
        let after = ContrastiveBatch::Instance { reps: scaled }
            .evaluate(ContrastiveOpts::default())
            .unwrap();
        assert!((base - after).abs() < 1e-10);
    }

    #[test]
    fn loss_decreases_as_positive_alignment_rises() {
        // rotate the positive toward the anchor while negatives stay fixed
        let mut last = f64::INFINITY;
        for step in 0..8 {
            let theta = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 8.0);
            let reps = vec![
                [
                    Tensor::from_vec(vec![3], vec![1.0, 0.0, 0.0]).unwrap(),
                    Tensor::from_vec(vec![3], vec![theta.cos(), theta.sin(), 0.0]).unwrap(),
                ],
                [unit(3, 2), unit(3, 2)],
            ];
            let loss = ContrastiveBatch::Instance { reps }
                .evaluate(ContrastiveOpts::default())
                .unwrap();
            assert!(loss < last, "step {step}: {loss} !< {last}");
            last = loss;
        }
    }

    #[test]
    fn gradients_flow_through_cos_exp() {
        let a = Tensor::from_vec(vec![3], vec![0.6, 0.3, -0.2]).unwrap();
        let err = crate::tensor::grad_check(
            |tape, v| {
                let reps = vec![
                    [v.clone(), tape.watch(Tensor::from_vec(vec![3], vec![0.5, 0.4, -0.1]).unwrap())],
                    [
                        tape.watch(Tensor::from_vec(vec![3], vec![-0.1, 0.8, 0.3]).unwrap()),
                        tape.watch(Tensor::from_vec(vec![3], vec![0.0, 0.9, 0.2]).unwrap()),
                    ],
                ];
                instance_contrastive_loss(tape, &reps, ContrastiveOpts::default())
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");

        let err = crate::tensor::grad_check(
            |tape, v| {
                let f = vec![v.clone(), tape.watch(Tensor::from_vec(vec![3], vec![-0.1, 0.8, 0.3]).unwrap())];
                let ft = vec![
                    tape.watch(Tensor::from_vec(vec![3], vec![0.5, 0.4, -0.1]).unwrap()),
                    tape.watch(Tensor::from_vec(vec![3], vec![0.0, 0.9, 0.2]).unwrap()),
                ];
                local_local_loss(tape, &[(f, ft)], ContrastiveOpts::default())
            },
            &a,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn combined_loss_is_plain_sum() {
        let tape = Tape::new();
        let ic = tape.watch(Tensor::scalar(0.7));
        let ll = tape.watch(Tensor::scalar(-0.6));
        let total = combined_pretrain_loss(&tape, &ic, &ll).unwrap();
        assert!((total.item() - 0.1f64).abs() < 1e-15);
    }

    #[test]
    fn symmetric_variant_averages_both_anchors() {
        let tape = Tape::new();
        let mk = |vals: [f64; 3]| tape.watch(Tensor::from_vec(vec![3], vals.to_vec()).unwrap());
        let reps = vec![
            [mk([0.8, 0.1, -0.3]), mk([0.7, 0.2, -0.1])],
            [mk([-0.2, 0.9, 0.4]), mk([0.1, 0.8, 0.5])],
        ];
        let fwd = instance_contrastive_loss(&tape, &reps, ContrastiveOpts::default()).unwrap();
        let swapped: Vec<[Var<f64>; 2]> = reps.iter().map(|[a, b]| [b.clone(), a.clone()]).collect();
        let bwd = instance_contrastive_loss(&tape, &swapped, ContrastiveOpts::default()).unwrap();
        let sym = instance_contrastive_loss(
            &tape,
            &reps,
            ContrastiveOpts {
                symmetric: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((sym.item() - 0.5 * (fwd.item() + bwd.item())).abs() < 1e-12);
    }
}
