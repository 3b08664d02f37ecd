//! Energy-based ranking losses: the pairwise phi-family and the listwise
//! (ListMLE-style) permutation loss.
//!
//! Both exist in two forms: plain functions over score slices (used by
//! evaluation and as test oracles) and tape builders used during training.
//! The two are cross-checked in the tests.

use crate::autodiff::{stable_softplus, Scalar, Tape, TensorRef};
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Penalty applied to the score difference z = p_i - p_j of a
/// relevance-ordered pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PhiKind {
    /// ln(1 + e^-z)
    Logistic,
    /// max(0, 1 - z)
    Hinge,
    /// e^-z
    Exponential,
}

impl PhiKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lf" | "logistic" => Ok(PhiKind::Logistic),
            "hf" | "hinge" => Ok(PhiKind::Hinge),
            "ef" | "exponential" => Ok(PhiKind::Exponential),
            other => Err(Error::validation(format!("unknown phi variant: {other}"))),
        }
    }

    pub fn short_name(self) -> &'static str {
        match self {
            PhiKind::Logistic => "lf",
            PhiKind::Hinge => "hf",
            PhiKind::Exponential => "ef",
        }
    }
}

/// Scores with their relevance labels, one entry per intent of a request.
#[derive(Debug, Clone)]
pub struct LabeledScoredList {
    pub scores: Vec<f64>,
    pub relevance: Vec<u32>,
}

impl LabeledScoredList {
    pub fn new(scores: Vec<f64>, relevance: Vec<u32>) -> Result<Self> {
        if scores.len() != relevance.len() {
            return Err(Error::validation(format!(
                "scores ({}) and relevance ({}) lengths differ",
                scores.len(),
                relevance.len()
            )));
        }
        if scores.is_empty() {
            return Err(Error::validation("scored list must be non-empty"));
        }
        Ok(LabeledScoredList { scores, relevance })
    }
}

pub fn phi(kind: PhiKind, z: f64) -> f64 {
    match kind {
        PhiKind::Logistic => stable_softplus(-z),
        PhiKind::Hinge => (1.0 - z).max(0.0),
        PhiKind::Exponential => (-z).exp(),
    }
}

/// Relevance-ordered pairs (i, j) with relevance_i > relevance_j, as
/// (higher, lower) index pairs. Equal-relevance pairs are skipped.
pub fn ordered_pairs(relevance: &[u32]) -> Vec<(usize, usize)> {
    let n = relevance.len();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && relevance[i] > relevance[j] {
                pairs.push((i, j));
            }
        }
    }
    pairs
}

/// Mean of phi(p_i - p_j) over all relevance-ordered pairs; 0 when no such
/// pair exists (single intent or all relevance tied).
pub fn pairwise_loss(list: &LabeledScoredList, kind: PhiKind) -> f64 {
    let pairs = ordered_pairs(&list.relevance);
    if pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = pairs
        .iter()
        .map(|&(i, j)| phi(kind, list.scores[i] - list.scores[j]))
        .sum();
    total / pairs.len() as f64
}

/// Sample a permutation sorted by descending relevance, shuffling ties
/// uniformly with the supplied rng.
pub fn relevance_permutation<R: Rng>(relevance: &[u32], rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..relevance.len()).collect();
    idx.shuffle(rng);
    // stable sort keeps the shuffled order within each relevance tier
    idx.sort_by(|&a, &b| relevance[b].cmp(&relevance[a]));
    idx
}

/// ListMLE negative log-likelihood of `perm` under the scores, computed with
/// log-sum-exp stabilization: sum_i [ -s_{y(i)} + ln sum_{j>=i} e^{s_{y(j)}} ].
pub fn listwise_loss_with_perm(scores: &[f64], perm: &[usize]) -> f64 {
    let n = perm.len();
    let mut loss = 0.0;
    let mut suffix_lse = f64::NEG_INFINITY;
    let mut terms = Vec::with_capacity(n);
    for i in (0..n).rev() {
        let s = scores[perm[i]];
        suffix_lse = if suffix_lse == f64::NEG_INFINITY {
            s
        } else {
            let (hi, lo) = if s > suffix_lse { (s, suffix_lse) } else { (suffix_lse, s) };
            hi + (lo - hi).exp().ln_1p()
        };
        terms.push(-s + suffix_lse);
    }
    for t in terms {
        loss += t;
    }
    loss
}

/// Listwise loss with a freshly sampled relevance-consistent permutation.
pub fn listwise_loss<R: Rng>(list: &LabeledScoredList, rng: &mut R) -> f64 {
    let perm = relevance_permutation(&list.relevance, rng);
    listwise_loss_with_perm(&list.scores, &perm)
}

// ---- tape builders (used by the training loop) ----

/// Pairwise loss over a score column on the tape. Pairs index rows of
/// `scores`; returns the scalar mean of phi over the pairs, or a zero
/// constant when no pair exists.
pub fn pairwise_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    scores: TensorRef,
    pairs: Vec<(usize, usize)>,
    kind: PhiKind,
) -> Result<TensorRef> {
    if pairs.is_empty() {
        return Ok(tape.scalar_const(T::zero()));
    }
    let count = pairs.len();
    let z = tape.pair_diff(scores, pairs)?;
    let per_pair = match kind {
        PhiKind::Logistic => {
            let nz = tape.neg(z);
            tape.softplus(nz)
        }
        PhiKind::Hinge => {
            let one_minus = tape.affine(z, -T::one(), T::one());
            tape.relu(one_minus)
        }
        PhiKind::Exponential => {
            let nz = tape.neg(z);
            tape.exp(nz)
        }
    };
    let total = tape.sum(per_pair);
    Ok(tape.affine(total, T::one() / T::from_f64(count as f64), T::zero()))
}

/// Listwise loss over a score column on the tape, for a fixed permutation.
pub fn listwise_loss_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    scores: TensorRef,
    perm: Vec<usize>,
) -> Result<TensorRef> {
    tape.list_mle(scores, perm)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn phi_at_zero() {
        assert_relative_eq!(phi(PhiKind::Logistic, 0.0), 2.0f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(phi(PhiKind::Hinge, 0.0), 1.0);
        assert_relative_eq!(phi(PhiKind::Exponential, 0.0), 1.0);
    }

    #[test]
    fn phi_known_values() {
        assert_relative_eq!(phi(PhiKind::Hinge, 2.0), 0.0);
        assert_relative_eq!(phi(PhiKind::Logistic, 1.0), 0.3132616875182228, epsilon = 1e-12);
    }

    #[test]
    fn pairwise_single_intent_is_zero() {
        let l = LabeledScoredList::new(vec![0.4], vec![1]).unwrap();
        assert_eq!(pairwise_loss(&l, PhiKind::Logistic), 0.0);
    }

    #[test]
    fn pairwise_hinge_satisfied_margin_is_zero() {
        let l = LabeledScoredList::new(vec![2.0, 0.5], vec![1, 0]).unwrap();
        assert_eq!(pairwise_loss(&l, PhiKind::Hinge), 0.0);
    }

    #[test]
    fn pairwise_logistic_hand_value() {
        let l = LabeledScoredList::new(vec![0.6, 0.4], vec![1, 0]).unwrap();
        let expected = (1.0 + (-0.2f64).exp()).ln();
        assert_relative_eq!(pairwise_loss(&l, PhiKind::Logistic), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.598_138_869, epsilon = 1e-6);
    }

    #[test]
    fn length_mismatch_rejected() {
        assert!(LabeledScoredList::new(vec![0.1, 0.2], vec![1]).is_err());
    }

    #[test]
    fn listwise_single_is_exactly_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let l = LabeledScoredList::new(vec![0.7], vec![1]).unwrap();
        assert_eq!(listwise_loss(&l, &mut rng), 0.0);
    }

    #[test]
    fn listwise_uniform_scores_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l = LabeledScoredList::new(vec![0.5, 0.5, 0.5], vec![2, 1, 0]).unwrap();
        let expected = 3.0f64.ln() + 2.0f64.ln();
        assert_relative_eq!(listwise_loss(&l, &mut rng), expected, epsilon = 1e-9);
    }

    #[test]
    fn listwise_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let rel: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let l = LabeledScoredList::new(scores, rel).unwrap();
            assert!(listwise_loss(&l, &mut rng) >= 0.0);
        }
    }

    #[test]
    fn relevance_permutation_respects_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rel = vec![0, 2, 1, 2, 0];
        for _ in 0..20 {
            let p = relevance_permutation(&rel, &mut rng);
            for w in p.windows(2) {
                assert!(rel[w[0]] >= rel[w[1]]);
            }
        }
    }

    #[test]
    fn tape_losses_match_plain_functions() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for kind in [PhiKind::Logistic, PhiKind::Hinge, PhiKind::Exponential] {
            for _ in 0..20 {
                let n = rng.gen_range(2..7);
                let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let rel: Vec<u32> = (0..n).map(|_| rng.gen_range(0..3)).collect();
                let list = LabeledScoredList::new(scores.clone(), rel.clone()).unwrap();
                let plain = pairwise_loss(&list, kind);

                let mut tape = Tape::<f64>::new();
                let s = tape.constant(Tensor::new([n, 1], scores.clone()).unwrap());
                let l = pairwise_loss_on_tape(&mut tape, s, ordered_pairs(&rel), kind).unwrap();
                assert_relative_eq!(tape.value(l).data[0], plain, epsilon = 1e-12);

                let perm = relevance_permutation(&rel, &mut rng);
                let plain_lw = listwise_loss_with_perm(&scores, &perm);
                let lw = listwise_loss_on_tape(&mut tape, s, perm).unwrap();
                assert_relative_eq!(tape.value(lw).data[0], plain_lw, epsilon = 1e-10);
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        use crate::gradcheck::check_gradients;
        let scores = vec![0.31, -0.22, 0.47, 0.05];
        let rel = vec![2u32, 0, 1, 0];
        let pairs = ordered_pairs(&rel);
        for kind in [PhiKind::Logistic, PhiKind::Hinge, PhiKind::Exponential] {
            let pairs = pairs.clone();
            let params = vec![(
                "scores".to_string(),
                Tensor::new([4, 1], scores.clone()).unwrap(),
            )];
            let report = check_gradients(
                &params,
                &move |tape, refs| pairwise_loss_on_tape(tape, refs[0], pairs.clone(), kind),
                16,
                9,
            )
            .unwrap();
            assert!(report.max_rel_err() < 1e-6, "{kind:?}: {}", report.max_rel_err());
        }
        let perm = vec![0usize, 2, 1, 3];
        let params = vec![(
            "scores".to_string(),
            Tensor::new([4, 1], scores).unwrap(),
        )];
        let report = check_gradients(
            &params,
            &move |tape, refs| listwise_loss_on_tape(tape, refs[0], perm.clone()),
            16,
            10,
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "listwise: {}", report.max_rel_err());
    }

    proptest! {
        #[test]
        fn pairwise_invariant_under_constant_shift(
            scores in proptest::collection::vec(-2.0f64..2.0, 2..8),
            shift in -5.0f64..5.0,
            seed in 0u64..100,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rel: Vec<u32> = scores.iter().map(|_| rng.gen_range(0..3)).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            for kind in [PhiKind::Logistic, PhiKind::Hinge, PhiKind::Exponential] {
                let a = pairwise_loss(&LabeledScoredList::new(scores.clone(), rel.clone()).unwrap(), kind);
                let b = pairwise_loss(&LabeledScoredList::new(shifted.clone(), rel.clone()).unwrap(), kind);
                prop_assert!((a - b).abs() < 1e-9, "{:?}: {} vs {}", kind, a, b);
            }
        }

        #[test]
        fn listwise_invariant_under_constant_shift(
            scores in proptest::collection::vec(-2.0f64..2.0, 2..8),
            shift in -5.0f64..5.0,
        ) {
            let perm: Vec<usize> = (0..scores.len()).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let a = listwise_loss_with_perm(&scores, &perm);
            let b = listwise_loss_with_perm(&shifted, &perm);
            prop_assert!((a - b).abs() < 1e-8, "{} vs {}", a, b);
        }

        #[test]
        fn lowering_a_bad_item_never_increases_pairwise(
            scores in proptest::collection::vec(-1.0f64..1.0, 3..6),
            drop in 0.0f64..1.0,
        ) {
            // item 0 is high relevance, the rest low; decrease a low one
            let mut rel = vec![0u32; scores.len()];
            rel[0] = 1;
            let mut lowered = scores.clone();
            lowered[1] -= drop;
            for kind in [PhiKind::Logistic, PhiKind::Hinge, PhiKind::Exponential] {
                let a = pairwise_loss(&LabeledScoredList::new(scores.clone(), rel.clone()).unwrap(), kind);
                let b = pairwise_loss(&LabeledScoredList::new(lowered.clone(), rel.clone()).unwrap(), kind);
                prop_assert!(b <= a + 1e-12);
            }
        }
    }
}
