//! Evidential losses and their analytic gradients.
//!
//! Classification is cast as per-class regression: every class channel `k`
//! carries its own evidential parameters and is regressed onto the one-hot
//! target `y_k ∈ {0, 1}`. The cross-entropy augmentation uses a softmax over
//! the channel locations (γ for a single modality, `u_F` for the fused
//! distribution).
//!
//! The Student's t negative log-likelihood uses `½ log Σ` because `Σ` is a
//! squared scale; with that convention `student_t_nll(p.to_student_t(), y)`
//! equals `nig_nll(p, y)` exactly.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::distributions::{NigParams, StudentT};
use crate::error::{Error, Result};
use crate::fusion::{fuse_classwise, fuse_many_backward, StudentTGrad};
use crate::special::{digamma, ln_gamma};

/// Gradient of some scalar with respect to (γ, δ, α, β).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NigGrad {
    pub gamma: f64,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl std::ops::AddAssign for NigGrad {
    fn add_assign(&mut self, rhs: Self) {
        self.gamma += rhs.gamma;
        self.delta += rhs.delta;
        self.alpha += rhs.alpha;
        self.beta += rhs.beta;
    }
}

/// Components of the total objective for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub per_modality_nig: Vec<f64>,
    pub fused_st: f64,
    pub total: f64,
    pub lambda: f64,
}

/// NIG negative log-likelihood of `y`.
pub fn nig_nll(p: &NigParams, y: f64) -> f64 {
    let (gamma, delta, alpha, beta) = (p.gamma(), p.delta(), p.alpha(), p.beta());
    let omega = 2.0 * beta * (1.0 + delta);
    let r = y - gamma;
    0.5 * (PI / delta).ln() + ln_gamma(alpha) - ln_gamma(alpha + 0.5) - alpha * omega.ln()
        + (alpha + 0.5) * (r * r * delta + omega).ln()
}

pub fn nig_nll_grad(p: &NigParams, y: f64) -> NigGrad {
    let (gamma, delta, alpha, beta) = (p.gamma(), p.delta(), p.alpha(), p.beta());
    let omega = 2.0 * beta * (1.0 + delta);
    let r = y - gamma;
    let d = r * r * delta + omega;
    NigGrad {
        gamma: -(alpha + 0.5) * 2.0 * r * delta / d,
        delta: -0.5 / delta - alpha * 2.0 * beta / omega + (alpha + 0.5) * (r * r + 2.0 * beta) / d,
        alpha: digamma(alpha) - digamma(alpha + 0.5) - omega.ln() + d.ln(),
        beta: -alpha / beta + (alpha + 0.5) * 2.0 * (1.0 + delta) / d,
    }
}

/// Student's t negative log-likelihood of `y`.
pub fn student_t_nll(st: &StudentT, y: f64) -> f64 {
    let (u, sigma, v) = (st.u(), st.sigma(), st.v());
    let r = y - u;
    0.5 * sigma.ln() + ln_gamma(0.5 * v) - ln_gamma(0.5 * (v + 1.0))
        + 0.5 * (v * PI).ln()
        + 0.5 * (v + 1.0) * (r * r / (v * sigma)).ln_1p()
}

pub fn student_t_nll_grad(st: &StudentT, y: f64) -> StudentTGrad {
    let (u, sigma, v) = (st.u(), st.sigma(), st.v());
    let r = y - u;
    let r2 = r * r;
    let denom = v * sigma + r2;
    StudentTGrad {
        u: -(v + 1.0) * r / denom,
        sigma: 0.5 / sigma - 0.5 * (v + 1.0) * r2 / (sigma * denom),
        v: 0.5 * digamma(0.5 * v) - 0.5 * digamma(0.5 * (v + 1.0)) + 0.5 / v
            + 0.5 * (r2 / (v * sigma)).ln_1p()
            - 0.5 * (v + 1.0) * r2 / (v * denom),
    }
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn check_label(logits: &[f64], label: usize) -> Result<()> {
    if logits.len() < 2 {
        return Err(Error::DimensionMismatch { context: "cross_entropy", expected: 2, actual: logits.len() });
    }
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange { label, classes: logits.len() });
    }
    Ok(())
}

/// `−log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_label(logits, label)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    Ok(lse - logits[label])
}

/// `softmax(logits) − onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_label(logits, label)?;
    let mut g = softmax(logits);
    g[label] -= 1.0;
    Ok(g)
}

/// Index of the single 1 in a one-hot vector.
pub fn one_hot_label(y_onehot: &[f64]) -> Result<usize> {
    let mut label = None;
    for (k, &y) in y_onehot.iter().enumerate() {
        if y == 1.0 {
            if label.is_some() {
                return Err(Error::InvalidOneHot(y_onehot.to_vec()));
            }
            label = Some(k);
        } else if y != 0.0 {
            return Err(Error::InvalidOneHot(y_onehot.to_vec()));
        }
    }
    label.ok_or_else(|| Error::InvalidOneHot(y_onehot.to_vec()))
}

pub fn one_hot(label: usize, classes: usize) -> Vec<f64> {
    let mut y = vec![0.0; classes];
    y[label] = 1.0;
    y
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { context, expected, actual });
    }
    Ok(())
}

/// Single-modality objective: summed per-class NIG NLL plus λ times the
/// cross-entropy of the γ vector.
pub fn modality_loss(nig_per_class: &[NigParams], y_onehot: &[f64], lambda: f64) -> Result<f64> {
    check_len("modality_loss", nig_per_class.len(), y_onehot.len())?;
    let label = one_hot_label(y_onehot)?;
    let nll: f64 = nig_per_class.iter().zip(y_onehot).map(|(p, &y)| nig_nll(p, y)).sum();
    let locations: Vec<f64> = nig_per_class.iter().map(NigParams::gamma).collect();
    Ok(nll + lambda * cross_entropy(&locations, label)?)
}

/// Fused objective: summed per-class Student's t NLL plus λ times the
/// cross-entropy of the fused locations.
pub fn fused_loss(fused_per_class: &[StudentT], y_onehot: &[f64], lambda: f64) -> Result<f64> {
    check_len("fused_loss", fused_per_class.len(), y_onehot.len())?;
    let label = one_hot_label(y_onehot)?;
    let nll: f64 = fused_per_class.iter().zip(y_onehot).map(|(st, &y)| student_t_nll(st, y)).sum();
    let locations: Vec<f64> = fused_per_class.iter().map(StudentT::u).collect();
    Ok(nll + lambda * cross_entropy(&locations, label)?)
}

/// Sum of every modality objective and the fused objective.
pub fn total_loss(
    per_modality: &[Vec<NigParams>],
    fused: &[StudentT],
    y_onehot: &[f64],
    lambda: f64,
) -> Result<LossBreakdown> {
    if per_modality.is_empty() {
        return Err(Error::EmptyInput("total_loss needs at least one modality"));
    }
    let per_modality_nig = per_modality
        .iter()
        .map(|m| modality_loss(m, y_onehot, lambda))
        .collect::<Result<Vec<_>>>()?;
    let fused_st = fused_loss(fused, y_onehot, lambda)?;
    let total = per_modality_nig.iter().sum::<f64>() + fused_st;
    Ok(LossBreakdown { per_modality_nig, fused_st, total, lambda })
}

/// Loss breakdown and gradients of the total objective with respect to every
/// modality's per-class evidential parameters.
#[derive(Debug, Clone)]
pub struct LossGradients {
    pub breakdown: LossBreakdown,
    /// `nig[m][k]` is ∂L_all/∂(γ, δ, α, β) for modality `m`, class `k`.
    pub nig: Vec<Vec<NigGrad>>,
}

/// Chain rule through `NigParams::to_student_t`.
pub fn student_t_grad_to_nig(p: &NigParams, g: StudentTGrad) -> NigGrad {
    let (delta, alpha, beta) = (p.delta(), p.alpha(), p.beta());
    // Σ = β(1 + δ)/(δα), v = 2α, u = γ
    NigGrad {
        gamma: g.u,
        delta: g.sigma * (-beta / (alpha * delta * delta)),
        alpha: g.sigma * (-beta * (1.0 + delta) / (delta * alpha * alpha)) + 2.0 * g.v,
        beta: g.sigma * (1.0 + delta) / (delta * alpha),
    }
}

/// Forward and backward pass of the full objective. The fused distribution is
/// recomputed from `per_modality` by class-wise fusion; the primary selection
/// carries no gradient.
pub fn loss_gradients(per_modality: &[Vec<NigParams>], y_onehot: &[f64], lambda: f64) -> Result<LossGradients> {
    let first = per_modality.first().ok_or(Error::EmptyInput("loss_gradients needs at least one modality"))?;
    let classes = first.len();
    for m in per_modality {
        check_len("loss_gradients", classes, m.len())?;
    }
    check_len("loss_gradients", classes, y_onehot.len())?;
    let label = one_hot_label(y_onehot)?;

    let student: Vec<Vec<StudentT>> =
        per_modality.iter().map(|m| m.iter().map(NigParams::to_student_t).collect()).collect();
    let fused = fuse_classwise(&student)?;
    let fused_st: Vec<StudentT> = fused.iter().map(|f| f.st).collect();
    let breakdown = total_loss(per_modality, &fused_st, y_onehot, lambda)?;

    let mut nig: Vec<Vec<NigGrad>> = Vec::with_capacity(per_modality.len());
    for m in per_modality {
        let gammas: Vec<f64> = m.iter().map(NigParams::gamma).collect();
        let ce = cross_entropy_grad(&gammas, label)?;
        nig.push(
            m.iter()
                .zip(y_onehot)
                .zip(&ce)
                .map(|((p, &y), &ce_k)| {
                    let mut g = nig_nll_grad(p, y);
                    g.gamma += lambda * ce_k;
                    g
                })
                .collect(),
        );
    }

    let fused_u: Vec<f64> = fused_st.iter().map(StudentT::u).collect();
    let fused_ce = cross_entropy_grad(&fused_u, label)?;
    let mut column = Vec::with_capacity(per_modality.len());
    for k in 0..classes {
        let mut upstream = student_t_nll_grad(&fused_st[k], y_onehot[k]);
        upstream.u += lambda * fused_ce[k];
        column.clear();
        column.extend(student.iter().map(|m| m[k]));
        let back = fuse_many_backward(&column, upstream)?;
        for (m, g) in back.into_iter().enumerate() {
            nig[m][k] += student_t_grad_to_nig(&per_modality[m][k], g);
        }
    }

    Ok(LossGradients { breakdown, nig })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::fuse_classwise;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn nig(g: f64, d: f64, a: f64, b: f64) -> NigParams {
        NigParams::new(g, d, a, b).unwrap()
    }

    fn random_nig(rng: &mut ChaCha8Rng) -> NigParams {
        nig(
            rng.random_range(-2.0..2.0),
            rng.random_range(0.1..5.0),
            rng.random_range(1.1..8.0),
            rng.random_range(0.1..5.0),
        )
    }

    #[test]
    fn nig_nll_anchor() {
        let v = nig_nll(&nig(0.0, 1.0, 2.0, 1.0), 0.0);
        assert!((v - (8.0f64 / 3.0).ln()).abs() < 1e-12);
        assert!((v - 0.980_829).abs() < 1e-6);
    }

    #[test]
    fn student_t_nll_anchor() {
        let st = StudentT::new(0.0, 1.0, 4.0).unwrap();
        assert!((student_t_nll(&st, 0.0) - (8.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn nig_nll_equals_negative_log_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let p = random_nig(&mut rng);
            let y = rng.random_range(-5.0..5.0);
            let a = nig_nll(&p, y);
            assert!((a + p.to_student_t().ln_pdf(y)).abs() < 1e-10);
            assert!((a - student_t_nll(&p.to_student_t(), y)).abs() < 1e-10);
        }
    }

    #[test]
    fn nig_nll_increases_away_from_gamma() {
        let p = nig(0.4, 1.3, 2.2, 0.8);
        let mut prev = nig_nll(&p, 0.4);
        for d in [0.1, 0.5, 1.0, 3.0, 10.0] {
            let up = nig_nll(&p, 0.4 + d);
            let down = nig_nll(&p, 0.4 - d);
            assert!(up > prev && (up - down).abs() < 1e-12);
            prev = up;
        }
    }

    #[test]
    fn student_t_nll_grows_logarithmically() {
        let st = StudentT::new(0.0, 1.0, 4.0).unwrap();
        let a = student_t_nll(&st, 1e4);
        let b = student_t_nll(&st, 1e8);
        // (v + 1) · log|y| growth between the two points.
        let slope = (b - a) / (1e8f64.ln() - 1e4f64.ln());
        assert!((slope - 5.0).abs() < 1e-6, "{slope}");
    }

    #[test]
    fn cross_entropy_examples() {
        let v = cross_entropy(&[0.3, 0.3, 0.3], 1).unwrap();
        assert!((v - 3f64.ln()).abs() < 1e-15);
        let v = cross_entropy(&[1e6, 0.0], 0).unwrap();
        assert!(v >= 0.0 && v < 1e-300);
        // Direct evaluation: log(e + e² + e³) − 3
        let direct = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let v = cross_entropy(&[1.0, 2.0, 3.0], 2).unwrap();
        assert!((v - direct).abs() < 1e-15);
        assert!((v - 0.407_605_964_444_380_1).abs() < 1e-15);
        assert!(matches!(cross_entropy(&[1.0, 2.0], 2), Err(Error::LabelOutOfRange { .. })));
        assert!(cross_entropy(&[1.0], 0).is_err());
    }

    #[test]
    fn one_hot_validation() {
        assert_eq!(one_hot_label(&[0.0, 1.0, 0.0]).unwrap(), 1);
        assert!(one_hot_label(&[0.0, 0.0]).is_err());
        assert!(one_hot_label(&[1.0, 1.0]).is_err());
        assert!(one_hot_label(&[0.5, 0.5]).is_err());
        let ps = [nig(0.0, 1.0, 2.0, 1.0), nig(0.0, 1.0, 2.0, 1.0)];
        assert!(matches!(modality_loss(&ps, &[1.0, 1.0], 0.5), Err(Error::InvalidOneHot(_))));
        assert!(modality_loss(&ps, &[1.0, 0.0, 0.0], 0.5).is_err());
    }

    #[test]
    fn modality_loss_components() {
        let ps = [nig(0.2, 1.0, 2.0, 1.0), nig(0.9, 2.0, 3.0, 0.5)];
        let y = [0.0, 1.0];
        let nll = nig_nll(&ps[0], 0.0) + nig_nll(&ps[1], 1.0);
        let ce = cross_entropy(&[0.2, 0.9], 1).unwrap();
        assert_eq!(modality_loss(&ps, &y, 0.0).unwrap(), nll);
        assert!((modality_loss(&ps, &y, 0.5).unwrap() - (nll + 0.5 * ce)).abs() < 1e-14);
    }

    #[test]
    fn fused_loss_matches_modality_loss_under_conversion() {
        let ps = [nig(0.2, 1.0, 2.0, 1.0), nig(0.9, 2.0, 3.0, 0.5), nig(-0.3, 0.4, 1.7, 2.0)];
        let sts: Vec<StudentT> = ps.iter().map(NigParams::to_student_t).collect();
        let y = [0.0, 0.0, 1.0];
        let a = modality_loss(&ps, &y, 0.5).unwrap();
        let b = fused_loss(&sts, &y, 0.5).unwrap();
        assert!((a - b).abs() < 1e-10);

        let hand: f64 = sts.iter().zip(&y).map(|(s, &t)| student_t_nll(s, t)).sum::<f64>()
            + 0.5 * cross_entropy(&[0.2, 0.9, -0.3], 2).unwrap();
        assert!((b - hand).abs() < 1e-14);
    }

    #[test]
    fn total_loss_single_modality_and_additivity() {
        let m = vec![nig(0.2, 1.0, 2.0, 1.0), nig(0.9, 2.0, 3.0, 0.5)];
        let y = [1.0, 0.0];
        let sts: Vec<StudentT> = m.iter().map(NigParams::to_student_t).collect();
        let b = total_loss(&[m.clone()], &sts, &y, 0.5).unwrap();
        let single = modality_loss(&m, &y, 0.5).unwrap();
        assert_eq!(b.per_modality_nig, vec![single]);
        assert!((b.total - single - fused_loss(&sts, &y, 0.5).unwrap()).abs() < 1e-12);

        let m2 = vec![nig(-0.1, 0.5, 4.0, 2.0), nig(0.3, 3.0, 1.5, 0.2)];
        let student = vec![sts.clone(), m2.iter().map(NigParams::to_student_t).collect()];
        let fused: Vec<StudentT> = fuse_classwise(&student).unwrap().iter().map(|f| f.st).collect();
        let b = total_loss(&[m.clone(), m2.clone()], &fused, &y, 0.5).unwrap();
        let parts = modality_loss(&m, &y, 0.5).unwrap()
            + modality_loss(&m2, &y, 0.5).unwrap()
            + fused_loss(&fused, &y, 0.5).unwrap();
        assert!((b.total - parts).abs() < 1e-12);
        assert!(matches!(total_loss(&[], &fused, &y, 0.5), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn lambda_only_scales_cross_entropy() {
        let m = vec![nig(0.2, 1.0, 2.0, 1.0), nig(0.9, 2.0, 3.0, 0.5)];
        let y = [1.0, 0.0];
        let at = |l: f64| modality_loss(&m, &y, l).unwrap();
        let ce = cross_entropy(&[0.2, 0.9], 0).unwrap();
        assert!((at(0.7) - at(0.2) - 0.5 * ce).abs() < 1e-13);
    }

    #[test]
    fn nig_grad_zero_gamma_at_target() {
        let g = nig_nll_grad(&nig(0.6, 1.4, 2.3, 0.9), 0.6);
        assert_eq!(g.gamma, 0.0);
    }

    #[test]
    fn lambda_zero_removes_cross_entropy_gradient() {
        // With λ = 0 and y = γ in every channel, the γ gradients are zero.
        let m1 = vec![nig(0.0, 1.0, 2.0, 1.0), nig(1.0, 2.0, 3.0, 0.5)];
        let m2 = vec![nig(0.0, 0.7, 2.5, 1.5), nig(1.0, 1.2, 1.8, 0.8)];
        let g = loss_gradients(&[m1.clone(), m2.clone()], &[0.0, 1.0], 0.0).unwrap();
        for m in &g.nig {
            for k in m {
                assert_eq!(k.gamma, 0.0);
            }
        }
        let g = loss_gradients(&[m1, m2], &[0.0, 1.0], 0.5).unwrap();
        assert!(g.nig.iter().flatten().any(|k| k.gamma != 0.0));
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn elementwise_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        for _ in 0..50 {
            let p = random_nig(&mut rng);
            let y = rng.random_range(-3.0..3.0);
            let g = nig_nll_grad(&p, y);
            let f = |q: [f64; 4]| nig_nll(&nig(q[0], q[1], q[2], q[3]), y);
            let base = [p.gamma(), p.delta(), p.alpha(), p.beta()];
            let an = [g.gamma, g.delta, g.alpha, g.beta];
            for i in 0..4 {
                let (mut up, mut dn) = (base, base);
                up[i] += h;
                dn[i] -= h;
                let fd = (f(up) - f(dn)) / (2.0 * h);
                assert!(rel_err(fd, an[i]) < 1e-5, "nig param {i}: {fd} vs {}", an[i]);
            }

            let st = p.to_student_t();
            let g = student_t_nll_grad(&st, y);
            let f = |q: [f64; 3]| student_t_nll(&StudentT::new(q[0], q[1], q[2]).unwrap(), y);
            let base = [st.u(), st.sigma(), st.v()];
            let an = [g.u, g.sigma, g.v];
            for i in 0..3 {
                let (mut up, mut dn) = (base, base);
                up[i] += h;
                dn[i] -= h;
                let fd = (f(up) - f(dn)) / (2.0 * h);
                assert!(rel_err(fd, an[i]) < 1e-5, "st param {i}: {fd} vs {}", an[i]);
            }
        }
    }

    proptest! {
        #[test]
        fn permuting_classes_leaves_loss_unchanged(seed in 0u64..1000, label in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m1: Vec<NigParams> = (0..3).map(|_| random_nig(&mut rng)).collect();
            let m2: Vec<NigParams> = (0..3).map(|_| random_nig(&mut rng)).collect();
            let y = one_hot(label, 3);
            let perm = [2usize, 0, 1];
            let permute = |v: &[NigParams]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let yp: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let a = loss_gradients(&[m1.clone(), m2.clone()], &y, 0.5).unwrap().breakdown.total;
            let b = loss_gradients(&[permute(&m1), permute(&m2)], &yp, 0.5).unwrap().breakdown.total;
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
        }
    }
}
