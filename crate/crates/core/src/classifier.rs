//! Softmax relation classifier, negative log-likelihood, and inference-time
//! scoring of every candidate relation.

use rayon::prelude::*;

use crate::autodiff::{log_softmax, ParamId, Result, Tape, Var};
use crate::model::{Model, PreparedBag};

/// Smallest probability fed to `log`.
pub const MIN_PROB: f64 = 1e-300;

#[derive(Clone, Copy, Debug)]
pub struct ClassifierParams {
    /// `h × feature_dim`.
    pub weight: ParamId,
    /// `h`.
    pub bias: ParamId,
}

/// `W_o g + b_o`.
pub fn logits(tape: &mut Tape<'_>, g: Var, params: &ClassifierParams) -> Result<Var> {
    let w = tape.param(params.weight);
    let b = tape.param(params.bias);
    let wg = tape.matvec(w, g)?;
    tape.add(wg, b)
}

/// `softmax(W_o g + b_o)`.
pub fn predict_probs(tape: &mut Tape<'_>, g: Var, params: &ClassifierParams) -> Result<Var> {
    let z = logits(tape, g, params)?;
    tape.softmax(z)
}

/// Per-bag negative log-likelihood from logits, evaluated in log space.
///
/// Returns the loss and whether the gold log-probability was clamped at
/// `ln(MIN_PROB)`; a clamped loss carries no gradient.
pub fn nll_from_logits(tape: &mut Tape<'_>, logits: Var, gold: usize) -> Result<(Var, bool)> {
    let lp = tape.log_softmax(logits)?;
    let picked = tape.index(lp, gold)?;
    let floor = MIN_PROB.ln();
    if tape.value(picked).item() < floor {
        return Ok((tape.constant(crate::tensor::Tensor::scalar(-floor)), true));
    }
    Ok((tape.scale(picked, -1.0), false))
}

#[derive(Clone, Debug, PartialEq)]
pub struct NllLoss {
    pub loss: f64,
    /// Bags whose gold probability was clamped.
    pub clamped: usize,
}

/// `-Σ_i log p_i[gold_i]` over probability vectors, clamping at [`MIN_PROB`].
pub fn nll_loss(probs: &[Vec<f64>], gold: &[usize]) -> NllLoss {
    assert_eq!(probs.len(), gold.len());
    let mut clamped = 0;
    let loss = probs
        .iter()
        .zip(gold)
        .map(|(p, &g)| {
            let v = p[g];
            if v < MIN_PROB {
                clamped += 1;
            }
            -v.max(MIN_PROB).ln()
        })
        .sum();
    NllLoss { loss, clamped }
}

/// Plain softmax of `W_o g + b_o`, for callers holding raw tensors.
pub fn probs_from_logits(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Confidence of every relation for one evaluation bag.
#[derive(Clone, Debug, PartialEq)]
pub struct BagScore {
    /// `scores[r] = P(r | g_r)` where `g_r` is built with `r`'s queries.
    pub scores: Vec<f64>,
    /// Best non-NA relation, or NA when NA outscores every other relation.
    pub predicted: usize,
}

impl BagScore {
    pub fn from_scores(scores: Vec<f64>, na: usize) -> Self {
        let best_non_na = scores.iter().enumerate().filter(|(r, _)| *r != na).fold(
            None::<(usize, f64)>,
            |best, (r, s)| match best {
                Some((_, b)) if *s <= b => best,
                _ => Some((r, *s)),
            },
        );
        let predicted = match best_non_na {
            Some((r, s)) if s >= scores[na] => r,
            _ => na,
        };
        BagScore { scores, predicted }
    }
}

/// Scores every relation by rebuilding the bag representation under that
/// relation's queries. Dropout is off and the result is deterministic.
pub fn score_bag_all_relations(model: &Model, bag: &PreparedBag) -> Result<BagScore> {
    let h = model.relations.len();
    let scores = (0..h)
        .into_par_iter()
        .map(|r| {
            let mut tape = Tape::inference(&model.params);
            let fwd = model.forward_bag(&mut tape, bag, r, None)?;
            let z = tape.value(fwd.logits).data().to_vec();
            Ok(probs_from_logits(&z)[r])
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(BagScore::from_scores(scores, model.relations.na_index()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ParamStore;
    use crate::tensor::Tensor;

    fn classifier(w: Tensor, b: Tensor) -> (ParamStore, ClassifierParams) {
        let mut ps = ParamStore::new();
        let weight = ps.insert("out_w", w).unwrap();
        let bias = ps.insert("out_b", b).unwrap();
        (ps, ClassifierParams { weight, bias })
    }

    #[test]
    fn zero_weights_give_uniform() {
        let (ps, cp) = classifier(Tensor::zeros(&[4, 3]), Tensor::zeros(&[4]));
        let mut tape = Tape::new(&ps);
        let g = tape.constant(Tensor::vector(vec![0.2, -0.4, 0.9]));
        let p = predict_probs(&mut tape, g, &cp).unwrap();
        assert!(tape
            .value(p)
            .data()
            .iter()
            .all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn large_bias_saturates() {
        let (ps, cp) = classifier(
            Tensor::zeros(&[3, 2]),
            Tensor::vector(vec![0.0, 100.0, 0.0]),
        );
        let mut tape = Tape::new(&ps);
        let g = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let p = predict_probs(&mut tape, g, &cp).unwrap();
        let p = tape.value(p).data();
        assert_eq!(p[1], 1.0);
        assert!(p[0] < 1e-40 && p[2] < 1e-40);
    }

    #[test]
    fn nll_examples() {
        assert_eq!(nll_loss(&[vec![0.0, 1.0], vec![1.0]], &[1, 0]).loss, 0.0);
        let l = nll_loss(&[vec![0.25; 4]], &[2]).loss;
        assert!((l - 4f64.ln()).abs() < 1e-15);
        assert!((l - 1.3863).abs() < 1e-4);
        let l = nll_loss(&[vec![0.5, 0.5], vec![0.25, 0.75]], &[0, 0]).loss;
        assert!((l - (2f64.ln() + 4f64.ln())).abs() < 1e-15);
        assert!((l - 2.0794).abs() < 1e-4);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let r = nll_loss(&[vec![0.0, 1.0]], &[0]);
        assert_eq!(r.clamped, 1);
        assert!(r.loss.is_finite());
        assert!((r.loss - 690.775_527_898_213_7).abs() < 1e-9);
    }

    #[test]
    fn tape_nll_matches_plain_nll() {
        let ps = ParamStore::new();
        let mut tape = Tape::new(&ps);
        let z = tape.constant(Tensor::vector(vec![0.3, -1.0, 2.0]));
        let (l, clamped) = nll_from_logits(&mut tape, z, 1).unwrap();
        assert!(!clamped);
        let p = probs_from_logits(&[0.3, -1.0, 2.0]);
        assert!((tape.value(l).item() - nll_loss(&[p], &[1]).loss).abs() < 1e-14);

        let z = tape.constant(Tensor::vector(vec![0.0, 2000.0]));
        let (l, clamped) = nll_from_logits(&mut tape, z, 0).unwrap();
        assert!(clamped);
        assert!(tape.value(l).item().is_finite());
    }

    #[test]
    fn predicted_relation_rule() {
        assert_eq!(BagScore::from_scores(vec![0.9, 0.2, 0.3], 0).predicted, 0);
        assert_eq!(BagScore::from_scores(vec![0.1, 0.2, 0.3], 0).predicted, 2);
        assert_eq!(BagScore::from_scores(vec![0.1, 0.3, 0.3], 0).predicted, 1);
    }
}
