//! Mixture-of-Student's-t fusion.
//!
//! Two Student's t distributions are fused by keeping the location and
//! degrees of freedom of the heavier-tailed one (smaller `v`, called the
//! primary below) and averaging the scales after correcting the other scale
//! to the primary's degrees of freedom:
//!
//! ```text
//! v_F = v₁,  u_F = u₁,  Σ_F = ½ (Σ₁ + v₂(v₁ − 2) / (v₁(v₂ − 2)) · Σ₂)
//! ```
//!
//! With equal degrees of freedom the smaller scale wins, then the lower index.
//! More than two inputs are fused by a left fold of the pairwise rule; that
//! extension and the per-class-channel lifting in [`fuse_classwise`] assume
//! no cross-modality covariance.

use serde::{Deserialize, Serialize};

use crate::distributions::StudentT;
use crate::error::{Error, Result};

/// A fused distribution together with the input that supplied its location
/// and degrees of freedom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusedStudentT {
    pub st: StudentT,
    pub source_index: usize,
}

impl FusedStudentT {
    /// Point prediction `u_F` and uncertainty `Σ_F · v_F / (v_F − 2)`.
    pub fn prediction(&self) -> (f64, f64) {
        (self.st.u(), self.st.variance())
    }
}

/// Gradient of some scalar with respect to the parameters of a [`StudentT`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StudentTGrad {
    pub u: f64,
    pub sigma: f64,
    pub v: f64,
}

/// True when `b` should be the primary of the pair `(a, b)`.
fn second_is_primary(a: &StudentT, b: &StudentT) -> bool {
    b.v() < a.v() || (b.v() == a.v() && b.sigma() < a.sigma())
}

fn scale_coefficient(v1: f64, v2: f64) -> f64 {
    let (num, den) = (v2 * (v1 - 2.0), v1 * (v2 - 2.0));
    if num.is_finite() && den.is_finite() {
        num / den
    } else {
        (v2 / (v2 - 2.0)) * ((v1 - 2.0) / v1)
    }
}

/// Fails only when the fused scale overflows.
fn combine(primary: &StudentT, other: &StudentT) -> Result<StudentT> {
    let sigma = 0.5 * primary.sigma() + 0.5 * scale_coefficient(primary.v(), other.v()) * other.sigma();
    StudentT::new(primary.u(), sigma, primary.v())
}

/// Pairwise fusion. `source_index` is 0 for `a`, 1 for `b`.
pub fn fuse_pair(a: &StudentT, b: &StudentT) -> Result<FusedStudentT> {
    Ok(if second_is_primary(a, b) {
        FusedStudentT { st: combine(b, a)?, source_index: 1 }
    } else {
        FusedStudentT { st: combine(a, b)?, source_index: 0 }
    })
}

/// Left fold of [`fuse_pair`] over `inputs` in index order.
pub fn fuse_many(inputs: &[StudentT]) -> Result<FusedStudentT> {
    let (first, rest) = inputs.split_first().ok_or(Error::EmptyInput("fuse_many needs at least one input"))?;
    let mut acc = FusedStudentT { st: *first, source_index: 0 };
    for (offset, next) in rest.iter().enumerate() {
        let step = fuse_pair(&acc.st, next)?;
        acc = FusedStudentT {
            st: step.st,
            source_index: if step.source_index == 0 { acc.source_index } else { offset + 1 },
        };
    }
    Ok(acc)
}

/// Back-propagates `upstream` (the gradient with respect to the fused
/// parameters) to every input of [`fuse_many`]. The primary selection at each
/// fold step is treated as locally constant.
pub fn fuse_many_backward(inputs: &[StudentT], upstream: StudentTGrad) -> Result<Vec<StudentTGrad>> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput("fuse_many needs at least one input"));
    }
    // Replay the fold, keeping the accumulator before each step.
    let mut accs = Vec::with_capacity(inputs.len());
    let mut acc = inputs[0];
    for next in &inputs[1..] {
        accs.push(acc);
        acc = fuse_pair(&acc, next)?.st;
    }

    let mut grads = vec![StudentTGrad::default(); inputs.len()];
    let mut g = upstream;
    for idx in (1..inputs.len()).rev() {
        let left = accs[idx - 1];
        let right = inputs[idx];
        let (g_left, g_right) = pair_backward(&left, &right, g);
        grads[idx] = g_right;
        g = g_left;
    }
    grads[0] = g;
    Ok(grads)
}

/// Gradients of [`fuse_pair`] with respect to `(a, b)`.
pub fn pair_backward(a: &StudentT, b: &StudentT, g: StudentTGrad) -> (StudentTGrad, StudentTGrad) {
    let swap = second_is_primary(a, b);
    let (p, o) = if swap { (b, a) } else { (a, b) };
    let (v1, v2) = (p.v(), o.v());
    let coef = scale_coefficient(v1, v2);
    // ∂coef/∂v₁ = 2v₂ / (v₁²(v₂ − 2)),  ∂coef/∂v₂ = −2(v₁ − 2) / (v₁(v₂ − 2)²)
    let dcoef_dv1 = 2.0 * v2 / (v1 * v1 * (v2 - 2.0));
    let dcoef_dv2 = -2.0 * (v1 - 2.0) / (v1 * (v2 - 2.0) * (v2 - 2.0));

    let g_primary = StudentTGrad {
        u: g.u,
        sigma: 0.5 * g.sigma,
        v: g.v + 0.5 * o.sigma() * dcoef_dv1 * g.sigma,
    };
    let g_other = StudentTGrad {
        u: 0.0,
        sigma: 0.5 * coef * g.sigma,
        v: 0.5 * o.sigma() * dcoef_dv2 * g.sigma,
    };
    if swap {
        (g_other, g_primary)
    } else {
        (g_primary, g_other)
    }
}

/// `(ŷ, Û_F)` for a fused distribution.
pub fn fused_prediction(f: &FusedStudentT) -> (f64, f64) {
    f.prediction()
}

/// Fuses each class channel independently: element `k` of the result is
/// [`fuse_many`] over `per_modality[m][k]` for all modalities `m`.
pub fn fuse_classwise(per_modality: &[Vec<StudentT>]) -> Result<Vec<FusedStudentT>> {
    let first = per_modality.first().ok_or(Error::EmptyInput("fuse_classwise needs a modality"))?;
    let classes = first.len();
    for channel in per_modality {
        if channel.len() != classes {
            return Err(Error::DimensionMismatch {
                context: "fuse_classwise",
                expected: classes,
                actual: channel.len(),
            });
        }
    }
    let mut column = Vec::with_capacity(per_modality.len());
    (0..classes)
        .map(|k| {
            column.clear();
            column.extend(per_modality.iter().map(|m| m[k]));
            fuse_many(&column)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(u: f64, s: f64, v: f64) -> StudentT {
        StudentT::new(u, s, v).unwrap()
    }

    #[test]
    fn pair_anchor() {
        let a = st(0.0, 1.0, 4.0);
        let b = st(1.0, 2.0, 6.0);
        let f = fuse_pair(&a, &b).unwrap();
        assert_eq!(f.st, st(0.0, 1.25, 4.0));
        assert_eq!(f.source_index, 0);
        assert_eq!(fused_prediction(&f), (0.0, 2.5));

        let g = fuse_pair(&b, &a).unwrap();
        assert_eq!(g.st, f.st);
        assert_eq!(g.source_index, 1);
    }

    #[test]
    fn equal_dof_ties() {
        let a = st(0.0, 1.0, 4.0);
        let b = st(1.0, 1.0, 4.0);
        let f = fuse_pair(&a, &b).unwrap();
        assert_eq!(f.st, st(0.0, 1.0, 4.0));
        assert_eq!(f.source_index, 0);

        // Equal DOF, smaller scale wins regardless of position.
        let c = st(5.0, 0.5, 4.0);
        let f = fuse_pair(&a, &c).unwrap();
        assert_eq!(f.source_index, 1);
        assert_eq!(f.st.u(), 5.0);
        assert_eq!(f.st.sigma(), 0.75);
    }

    #[test]
    fn prediction_examples() {
        let f = FusedStudentT { st: st(2.0, 3.0, 6.0), source_index: 0 };
        assert_eq!(f.prediction(), (2.0, 4.5));
    }

    #[test]
    fn many_identity_and_pair() {
        let a = st(0.3, 1.1, 7.0);
        let f = fuse_many(&[a]).unwrap();
        assert_eq!(f, FusedStudentT { st: a, source_index: 0 });

        let b = st(-1.0, 0.4, 3.0);
        assert_eq!(fuse_many(&[a, b]).unwrap(), fuse_pair(&a, &b).unwrap());
        assert!(fuse_many(&[]).is_err());
    }

    #[test]
    fn many_three_inputs_hand_fold() {
        // (0,1,4) ⊕ (1,2,6) = (0, 1.25, 4); then with (2,3,8):
        // coefficient 8·2/(4·6) = 2/3, Σ = ½(1.25 + 2) = 1.625.
        let f = fuse_many(&[st(0.0, 1.0, 4.0), st(1.0, 2.0, 6.0), st(2.0, 3.0, 8.0)]).unwrap();
        assert_eq!(f.st.u(), 0.0);
        assert_eq!(f.st.v(), 4.0);
        assert!((f.st.sigma() - 1.625).abs() < 1e-15);
        assert_eq!(f.source_index, 0);

        // The heaviest tail last: source index follows it.
        let f = fuse_many(&[st(2.0, 3.0, 8.0), st(1.0, 2.0, 6.0), st(0.0, 1.0, 4.0)]).unwrap();
        assert_eq!(f.source_index, 2);
        assert_eq!(f.st.v(), 4.0);
        // (2,3,8)⊕(1,2,6): primary (1,2,6), coef 8·4/(6·6) = 8/9, Σ = ½(2 + 8/3) = 7/3.
        // (1,7/3,6)⊕(0,1,4): primary (0,1,4), coef 6·2/(4·4) = 3/4, Σ = ½(1 + 7/4) = 11/8.
        assert!((f.st.sigma() - 11.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn classwise_single_channel_identity() {
        let a = st(0.5, 2.0, 5.0);
        let f = fuse_classwise(&[vec![a]]).unwrap();
        assert_eq!(f, vec![FusedStudentT { st: a, source_index: 0 }]);
    }

    #[test]
    fn classwise_heavier_modality_supplies_locations() {
        let m1 = vec![st(0.9, 1.0, 3.0), st(0.1, 1.0, 3.5)];
        let m2 = vec![st(0.2, 1.0, 5.0), st(0.8, 1.0, 6.0)];
        let f = fuse_classwise(&[m1, m2]).unwrap();
        assert_eq!(f[0].st.u(), 0.9);
        assert_eq!(f[1].st.u(), 0.1);
        assert!(f.iter().all(|c| c.source_index == 0));
    }

    #[test]
    fn classwise_mixed_table() {
        // Hand-computed per channel:
        //  k=0: v 4 vs 6 → m1 primary, coef 6·2/(4·4)=0.75,  Σ = ½(1 + 0.75·2)   = 1.25
        //  k=1: v 10 vs 3 → m2 primary, coef 10·1/(3·8)=5/12, Σ = ½(0.5 + 5/12·4) = 13/12
        //  k=2: v 5 vs 5, Σ 2 vs 1 → m2 primary, coef 1,     Σ = ½(1 + 2)       = 1.5
        let m1 = vec![st(0.0, 1.0, 4.0), st(1.0, 4.0, 10.0), st(2.0, 2.0, 5.0)];
        let m2 = vec![st(3.0, 2.0, 6.0), st(4.0, 0.5, 3.0), st(5.0, 1.0, 5.0)];
        let f = fuse_classwise(&[m1, m2]).unwrap();
        let expect = [(0.0, 1.25, 4.0, 0), (4.0, 13.0 / 12.0, 3.0, 1), (5.0, 1.5, 5.0, 1)];
        for (got, &(u, s, v, src)) in f.iter().zip(&expect) {
            assert_eq!(got.st.u(), u);
            assert!((got.st.sigma() - s).abs() < 1e-15);
            assert_eq!(got.st.v(), v);
            assert_eq!(got.source_index, src);
        }
    }

    #[test]
    fn classwise_rejects_ragged_channels() {
        let err = fuse_classwise(&[vec![st(0.0, 1.0, 4.0)], vec![]]).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let inputs = [st(0.3, 1.2, 5.0), st(-0.4, 0.7, 3.5), st(1.1, 2.0, 9.0)];
        // Arbitrary linear functional of the fused parameters.
        let w = StudentTGrad { u: 0.7, sigma: -1.3, v: 0.4 };
        let objective = |xs: &[StudentT]| {
            let f = fuse_many(xs).unwrap().st;
            w.u * f.u() + w.sigma * f.sigma() + w.v * f.v()
        };
        let grads = fuse_many_backward(&inputs, w).unwrap();
        let h = 1e-6;
        for i in 0..inputs.len() {
            for field in 0..3 {
                let bump = |delta: f64| {
                    let mut xs = inputs;
                    let x = xs[i];
                    xs[i] = match field {
                        0 => st(x.u() + delta, x.sigma(), x.v()),
                        1 => st(x.u(), x.sigma() + delta, x.v()),
                        _ => st(x.u(), x.sigma(), x.v() + delta),
                    };
                    objective(&xs)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let an = match field {
                    0 => grads[i].u,
                    1 => grads[i].sigma,
                    _ => grads[i].v,
                };
                assert!((fd - an).abs() < 1e-7, "input {i} field {field}: {fd} vs {an}");
            }
        }
    }

    fn arb_st() -> impl Strategy<Value = StudentT> {
        (-10.0..10.0f64, 0.01..20.0f64, 2.01..60.0f64).prop_map(|(u, s, v)| st(u, s, v))
    }

    proptest! {
        #[test]
        fn heavy_tail_preserved(a in arb_st(), b in arb_st(), c in arb_st()) {
            let f = fuse_many(&[a, b, c]).unwrap();
            let vmin = a.v().min(b.v()).min(c.v());
            prop_assert_eq!(f.st.v(), vmin);
            prop_assert_eq!([a, b, c][f.source_index].v(), vmin);
        }

        #[test]
        fn order_invariant_when_dof_differ(a in arb_st(), b in arb_st()) {
            prop_assume!(a.v() != b.v());
            prop_assert_eq!(fuse_pair(&a, &b).unwrap().st, fuse_pair(&b, &a).unwrap().st);
        }

        #[test]
        fn equal_dof_scale_is_symmetric_mean(u1 in -5.0..5.0f64, u2 in -5.0..5.0f64, s1 in 0.01..10.0f64, s2 in 0.01..10.0f64, v in 2.01..40.0f64) {
            let f = fuse_pair(&st(u1, s1, v), &st(u2, s2, v)).unwrap();
            prop_assert!((f.st.sigma() - 0.5 * (s1 + s2)).abs() <= 1e-14 * (s1 + s2));
        }

        #[test]
        fn identical_scale_and_dof_is_fixed_point(u1 in -5.0..5.0f64, u2 in -5.0..5.0f64, s in 0.01..10.0f64, v in 2.01..40.0f64) {
            prop_assert_eq!(fuse_pair(&st(u1, s, v), &st(u2, s, v)).unwrap().st.sigma(), s);
        }

        #[test]
        fn scale_increases_with_each_input_scale(a in arb_st(), b in arb_st(), bump in 0.01..5.0f64) {
            let base = fuse_pair(&a, &b).unwrap().st.sigma();
            let a2 = st(a.u(), a.sigma() + bump, a.v());
            let b2 = st(b.u(), b.sigma() + bump, b.v());
            // Keep the primary fixed: bumping only matters when selection is unchanged.
            prop_assume!(a.v() != b.v());
            prop_assert!(fuse_pair(&a2, &b).unwrap().st.sigma() > base);
            prop_assert!(fuse_pair(&a, &b2).unwrap().st.sigma() > base);
        }

        #[test]
        fn uncertainty_exceeds_scale(a in arb_st()) {
            let f = FusedStudentT { st: a, source_index: 0 };
            prop_assert!(f.prediction().1 > a.sigma());
        }

        // Σ_F v_1/(v_1 − 2) = ½(Σ_1 v_1/(v_1 − 2) + Σ_2 v_2/(v_2 − 2)).
        #[test]
        fn pair_uncertainty_is_mean_of_input_variances(a in arb_st(), b in arb_st()) {
            let u = fuse_pair(&a, &b).unwrap().prediction().1;
            let mid = 0.5 * (a.variance() + b.variance());
            prop_assert!((u - mid).abs() <= 1e-12 * mid);
        }
    }
}
