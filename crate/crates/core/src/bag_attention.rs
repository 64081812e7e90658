//! Threshold-gated attention over the sentences of a bag.
//!
//! Each sentence feature is scored by cosine against the relation's
//! feature-space query. Sentences scoring below `beta` are dropped; the
//! survivors are weighted by a softmax over their scores and summed. When
//! every sentence falls below the threshold the single best one is kept.

use crate::autodiff::{Result, Tape, Var};

/// Relevance of one sentence feature to a relation query.
pub fn sentence_relevance(tape: &mut Tape<'_>, p: Var, query: Var) -> Result<Var> {
    tape.cosine(p, query)
}

/// Indices with `e_i >= beta`, or the first argmax when none pass. The flag
/// reports whether the fallback fired.
pub fn select_survivors(relevances: &[f64], beta: f64) -> (Vec<usize>, bool) {
    let survivors: Vec<usize> = relevances
        .iter()
        .enumerate()
        .filter(|(_, e)| **e >= beta)
        .map(|(i, _)| i)
        .collect();
    if !survivors.is_empty() {
        return (survivors, false);
    }
    let best = relevances
        .iter()
        .enumerate()
        .fold(None::<(usize, f64)>, |best, (i, e)| match best {
            Some((_, b)) if *e <= b => best,
            _ => Some((i, *e)),
        })
        .map_or(0, |(i, _)| i);
    (vec![best], true)
}

#[derive(Clone, Debug)]
pub struct GatedWeights {
    /// Indices into the bag, ascending.
    pub survivors: Vec<usize>,
    /// Softmax weights aligned with `survivors`.
    pub gamma: Var,
    /// Raw relevance of every sentence.
    pub relevances: Vec<f64>,
    pub fallback: bool,
}

impl GatedWeights {
    pub fn filtered(&self) -> usize {
        self.relevances.len() - self.survivors.len()
    }
}

/// Gates `relevances` at `beta` and softmax-normalizes the survivors.
///
/// The selection itself is not differentiated; gradients reach only the
/// surviving scores.
pub fn gate_and_normalize(
    tape: &mut Tape<'_>,
    relevances: &[Var],
    beta: f64,
) -> Result<GatedWeights> {
    let values: Vec<f64> = relevances.iter().map(|v| tape.value(*v).item()).collect();
    let (survivors, fallback) = select_survivors(&values, beta);
    let kept: Vec<Var> = survivors.iter().map(|&i| relevances[i]).collect();
    let scores = tape.concat(&kept)?;
    let gamma = tape.softmax(scores)?;
    Ok(GatedWeights {
        survivors,
        gamma,
        relevances: values,
        fallback,
    })
}

/// `g = Σ γ_j p_j` over the survivors.
pub fn bag_repr(tape: &mut Tape<'_>, features: &[Var], weights: &GatedWeights) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for (k, &i) in weights.survivors.iter().enumerate() {
        let gamma = tape.index(weights.gamma, k)?;
        let term = tape.scale_by(features[i], gamma)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(acc.expect("at least one survivor"))
}
