//! Held-out evaluation: ranked fact predictions, precision-recall curves,
//! precision at N and the area under the curve.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Write};

use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::AutodiffError;
use crate::classifier::{score_bag_all_relations, BagScore};
use crate::corpus::NA_RELATION;
use crate::model::{Model, PreparedBag};

/// One scored candidate fact.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PredictionRecord {
    pub head: String,
    pub tail: String,
    pub relation: String,
    pub score: f64,
    pub correct: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PRPoint {
    pub precision: f64,
    pub recall: f64,
    /// Score of the last record in the prefix.
    pub threshold: f64,
}

/// Records ordered by descending score, ties by `(head, tail, relation)`.
pub fn rank(records: &[PredictionRecord]) -> Vec<&PredictionRecord> {
    let mut ranked: Vec<&PredictionRecord> = records.iter().collect();
    ranked.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| (&a.head, &a.tail, &a.relation).cmp(&(&b.head, &b.tail, &b.relation)))
    });
    ranked
}

/// One point per ranked prefix. `gold_facts` is the recall denominator.
pub fn pr_curve(records: &[PredictionRecord], gold_facts: usize) -> Vec<PRPoint> {
    assert!(gold_facts >= 1, "recall needs at least one gold fact");
    let mut correct = 0usize;
    rank(records)
        .into_iter()
        .enumerate()
        .map(|(j, r)| {
            correct += usize::from(r.correct);
            PRPoint {
                precision: correct as f64 / (j + 1) as f64,
                recall: correct as f64 / gold_facts as f64,
                threshold: r.score,
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PrecisionAtN {
    pub n: usize,
    pub precision: f64,
    /// Fewer than `n` records existed; precision is over all of them.
    pub truncated: bool,
}

pub fn p_at_n(records: &[PredictionRecord], n: usize) -> PrecisionAtN {
    assert!(n >= 1, "N must be positive");
    let ranked = rank(records);
    let top = &ranked[..n.min(ranked.len())];
    let correct = top.iter().filter(|r| r.correct).count();
    PrecisionAtN {
        n,
        precision: if top.is_empty() {
            0.0
        } else {
            correct as f64 / top.len() as f64
        },
        truncated: ranked.len() < n,
    }
}

/// Right-endpoint sum of precision over recall increments.
pub fn pr_auc(curve: &[PRPoint]) -> f64 {
    let mut prev = 0.0;
    curve
        .iter()
        .map(|p| {
            let area = p.precision * (p.recall - prev);
            prev = p.recall;
            area
        })
        .sum()
}

/// Distinct `(head, tail, relation)` non-NA gold facts across `bags`.
pub fn gold_fact_count(bags: &[PreparedBag]) -> usize {
    bags.iter()
        .flat_map(|b| {
            b.gold
                .iter()
                .filter(|r| r.as_str() != NA_RELATION)
                .map(move |r| (&b.head, &b.tail, r))
        })
        .collect::<BTreeSet<_>>()
        .len()
}

/// Non-NA records for one bag, in relation-index order.
pub fn records_for_bag(
    model: &Model,
    bag: &PreparedBag,
    score: &BagScore,
) -> Vec<PredictionRecord> {
    score
        .scores
        .iter()
        .enumerate()
        .filter(|(r, _)| !model.relations.is_na(*r))
        .map(|(r, &s)| {
            let relation = model.relations.name(r).to_string();
            PredictionRecord {
                head: bag.head.clone(),
                tail: bag.tail.clone(),
                correct: bag.gold.contains(&relation),
                relation,
                score: s,
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub records: Vec<PredictionRecord>,
    pub scores: Vec<BagScore>,
    pub gold_facts: usize,
    pub curve: Vec<PRPoint>,
    pub auc: f64,
}

impl Evaluation {
    pub fn p_at(&self, n: usize) -> PrecisionAtN {
        p_at_n(&self.records, n)
    }
}

/// Scores every bag under every relation and summarizes the ranking.
pub fn evaluate(model: &Model, bags: &[PreparedBag]) -> Result<Evaluation, AutodiffError> {
    let scores = bags
        .par_iter()
        .map(|b| score_bag_all_relations(model, b))
        .collect::<Result<Vec<_>, _>>()?;
    let records: Vec<PredictionRecord> = bags
        .iter()
        .zip(&scores)
        .flat_map(|(b, s)| records_for_bag(model, b, s))
        .collect();
    let gold_facts = gold_fact_count(bags);
    let curve = if gold_facts == 0 {
        Vec::new()
    } else {
        pr_curve(&records, gold_facts)
    };
    let auc = pr_auc(&curve);
    Ok(Evaluation {
        records,
        scores,
        gold_facts,
        curve,
        auc,
    })
}

pub const PR_CSV_HEADER: &str = "score,correct,precision,recall";

/// Writes the curve as CSV, one row per ranked prefix.
pub fn write_pr_csv<W: Write>(
    w: &mut W,
    records: &[PredictionRecord],
    curve: &[PRPoint],
) -> io::Result<()> {
    writeln!(w, "{PR_CSV_HEADER}")?;
    for (r, p) in rank(records).into_iter().zip(curve) {
        writeln!(
            w,
            "{},{},{},{}",
            r.score,
            u8::from(r.correct),
            p.precision,
            p.recall
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct PnReport {
    pub p_at: BTreeMap<String, f64>,
    pub auc: f64,
    pub config: serde_json::Value,
    pub seed: u64,
    pub gold_facts: usize,
    pub records: usize,
    /// N values for which fewer than N records existed.
    pub truncated: Vec<usize>,
}

pub const DEFAULT_P_AT: [usize; 4] = [50, 100, 200, 300];

pub fn pn_report(
    eval: &Evaluation,
    ns: &[usize],
    config: serde_json::Value,
    seed: u64,
) -> PnReport {
    let mut p_at = BTreeMap::new();
    let mut truncated = Vec::new();
    for &n in ns {
        let p = eval.p_at(n);
        p_at.insert(n.to_string(), p.precision);
        if p.truncated {
            truncated.push(n);
        }
    }
    PnReport {
        p_at,
        auc: eval.auc,
        config,
        seed,
        gold_facts: eval.gold_facts,
        records: eval.records.len(),
        truncated,
    }
}
