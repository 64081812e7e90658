//! Seeded synthetic corpus with controllable label noise.
//!
//! Each relation owns one trigger token. A clean sentence for relation `r`
//! holds `r`'s trigger in one of the three entity-delimited segments, chosen
//! from the placement distribution, surrounded by filler. `NA` sentences have
//! no trigger. A noisy bag keeps its label but some of its sentences carry the
//! trigger of a different relation. Test data is always clean.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntitySpan, SentenceInstance, NA_RELATION};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    /// Relations besides `NA`.
    pub num_relations: usize,
    /// Distinct tokens used: triggers, entity mentions and filler.
    pub vocab_size: usize,
    /// Inclusive range of sentences per bag.
    pub sentences_per_bag: (usize, usize),
    /// Inclusive range of filler tokens per sentence.
    pub filler_len: (usize, usize),
    /// Probability that a training bag is noisy.
    pub noise_rate: f64,
    /// Probability of placing the trigger in segment 1, 2 or 3.
    pub placement: [f64; 3],
    /// Fraction of bags labelled `NA`.
    pub na_fraction: f64,
    pub train_bags: usize,
    pub test_bags: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_relations: 8,
            vocab_size: 500,
            sentences_per_bag: (1, 4),
            filler_len: (6, 14),
            noise_rate: 0.0,
            placement: [0.2, 0.6, 0.2],
            na_fraction: 0.25,
            train_bags: 600,
            test_bags: 200,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("vocab_size {vocab_size} is too small for {relations} disjoint triggers plus entity and filler tokens (need at least {needed})")]
    VocabTooSmall {
        vocab_size: usize,
        relations: usize,
        needed: usize,
    },
    #[error("invalid synthetic config: {0}")]
    Invalid(String),
}

/// What the generator did, for inspecting the noise afterwards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub config: SynthConfig,
    /// `(relation name, trigger token)` for every non-NA relation.
    pub triggers: Vec<(String, String)>,
    /// Per training bag, whether it received noisy sentences.
    pub noisy_train_bags: Vec<bool>,
    /// Per training bag, how many sentences it holds (in file order).
    pub train_bag_sizes: Vec<usize>,
}

impl SynthTruth {
    pub fn noisy_fraction(&self) -> f64 {
        let n = self.noisy_train_bags.len().max(1);
        self.noisy_train_bags.iter().filter(|b| **b).count() as f64 / n as f64
    }
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Vec<SentenceInstance>,
    pub test: Vec<SentenceInstance>,
    pub truth: SynthTruth,
}

pub fn relation_name(i: usize) -> String {
    format!("/synth/rel{i}")
}

pub fn trigger_token(i: usize) -> String {
    format!("rel{i}")
}

const MIN_FILLER: usize = 4;
const MIN_ENTITY: usize = 2;

struct Lexicon {
    triggers: Vec<String>,
    entities: Vec<String>,
    filler: Vec<String>,
}

impl SynthConfig {
    fn validate(&self) -> Result<(), SynthError> {
        let invalid = |m: &str| Err(SynthError::Invalid(m.to_string()));
        if self.num_relations < 2 {
            return invalid("need at least 2 relations besides NA");
        }
        if !(0.0..1.0).contains(&self.noise_rate) {
            return invalid("noise_rate must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.na_fraction) {
            return invalid("na_fraction must lie in [0, 1)");
        }
        let (lo, hi) = self.sentences_per_bag;
        if lo == 0 || lo > hi {
            return invalid("sentences_per_bag must be a non-empty range starting at 1 or more");
        }
        if self.filler_len.0 > self.filler_len.1 || self.filler_len.0 < 1 {
            return invalid("filler_len must be a non-empty range starting at 1 or more");
        }
        if self.placement.iter().any(|p| *p < 0.0) || self.placement.iter().sum::<f64>() <= 0.0 {
            return invalid("placement must be non-negative with positive mass");
        }
        let needed = self.num_relations + MIN_ENTITY + MIN_FILLER;
        if self.vocab_size < needed {
            return Err(SynthError::VocabTooSmall {
                vocab_size: self.vocab_size,
                relations: self.num_relations,
                needed,
            });
        }
        Ok(())
    }

    fn lexicon(&self) -> Lexicon {
        let rest = self.vocab_size - self.num_relations;
        let n_entities = (rest / 5).max(MIN_ENTITY);
        let n_filler = rest - n_entities;
        Lexicon {
            triggers: (0..self.num_relations).map(trigger_token).collect(),
            entities: (0..n_entities).map(|i| format!("ent{i}")).collect(),
            filler: (0..n_filler).map(|i| format!("w{i}")).collect(),
        }
    }
}

fn pick(rng: &mut ChaCha8Rng, pool: &[String]) -> String {
    pool.choose(rng).expect("non-empty pool").clone()
}

struct Generator<'a> {
    cfg: &'a SynthConfig,
    lex: Lexicon,
    rng: ChaCha8Rng,
}

impl Generator<'_> {
    fn placement(&mut self) -> usize {
        let total: f64 = self.cfg.placement.iter().sum();
        let mut u = self.rng.gen::<f64>() * total;
        for (i, p) in self.cfg.placement.iter().enumerate() {
            if u < *p {
                return i;
            }
            u -= p;
        }
        2
    }

    /// One sentence; `trigger` is the index of the relation whose trigger it
    /// carries, if any.
    fn sentence(
        &mut self,
        head: &str,
        tail: &str,
        label: &str,
        trigger: Option<usize>,
    ) -> SentenceInstance {
        let (lo, hi) = self.cfg.filler_len;
        let filler_total = self.rng.gen_range(lo..=hi);
        // Split filler into the three segments around the entities.
        let mut cuts = [
            self.rng.gen_range(0..=filler_total),
            self.rng.gen_range(0..=filler_total),
        ];
        cuts.sort_unstable();
        let mut seg = [cuts[0], cuts[1] - cuts[0], filler_total - cuts[1]];
        let target = trigger.map(|_| self.placement());
        if let Some(t) = target {
            seg[t] += 1;
        }
        let mut segments: Vec<Vec<String>> = seg
            .iter()
            .map(|&n| {
                (0..n)
                    .map(|_| pick(&mut self.rng, &self.lex.filler))
                    .collect()
            })
            .collect();
        if let (Some(t), Some(r)) = (target, trigger) {
            let slot = self.rng.gen_range(0..segments[t].len());
            segments[t][slot] = self.lex.triggers[r].clone();
        }
        let head_tok = pick(&mut self.rng, &self.lex.entities);
        let tail_tok = pick(&mut self.rng, &self.lex.entities);
        let mut tokens = segments[0].clone();
        let hpos = tokens.len();
        tokens.push(head_tok);
        tokens.extend(segments[1].iter().cloned());
        let tpos = tokens.len();
        tokens.push(tail_tok);
        tokens.extend(segments[2].iter().cloned());
        SentenceInstance {
            tokens,
            head: EntitySpan {
                id: head.to_string(),
                start: hpos,
                end: hpos,
            },
            tail: EntitySpan {
                id: tail.to_string(),
                start: tpos,
                end: tpos,
            },
            relation: label.to_string(),
        }
    }

    fn other_relation(&mut self, not: Option<usize>) -> usize {
        loop {
            let r = self.rng.gen_range(0..self.cfg.num_relations);
            if Some(r) != not {
                return r;
            }
        }
    }

    /// Returns the bag's instances and whether it is noisy.
    fn bag(&mut self, split: &str, index: usize, noise_rate: f64) -> (Vec<SentenceInstance>, bool) {
        let head = format!("{split}_h{index}");
        let tail = format!("{split}_t{index}");
        let relation = if self.rng.gen::<f64>() < self.cfg.na_fraction {
            None
        } else {
            Some(self.rng.gen_range(0..self.cfg.num_relations))
        };
        let label = relation.map_or(NA_RELATION.to_string(), relation_name);
        let (lo, hi) = self.cfg.sentences_per_bag;
        let size = self.rng.gen_range(lo..=hi);
        let noisy = self.rng.gen::<f64>() < noise_rate;
        // A noisy bag keeps at least one clean sentence when it has two or more.
        let n_noisy = match (noisy, size) {
            (false, _) => 0,
            (true, 1) => 1,
            (true, s) => self.rng.gen_range(1..s),
        };
        let mut roles: Vec<bool> = (0..size).map(|i| i < n_noisy).collect();
        roles.shuffle(&mut self.rng);
        let instances = roles
            .into_iter()
            .map(|is_noise| {
                let trigger = if is_noise {
                    Some(self.other_relation(relation))
                } else {
                    relation
                };
                self.sentence(&head, &tail, &label, trigger)
            })
            .collect();
        (instances, noisy)
    }
}

/// Generates `(train, test, truth)`; a pure function of `config`.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthCorpus, SynthError> {
    config.validate()?;
    let mut g = Generator {
        cfg: config,
        lex: config.lexicon(),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let mut train = Vec::new();
    let mut noisy_train_bags = Vec::with_capacity(config.train_bags);
    let mut train_bag_sizes = Vec::with_capacity(config.train_bags);
    for i in 0..config.train_bags {
        let (instances, noisy) = g.bag("train", i, config.noise_rate);
        noisy_train_bags.push(noisy);
        train_bag_sizes.push(instances.len());
        train.extend(instances);
    }
    let mut test = Vec::new();
    for i in 0..config.test_bags {
        test.extend(g.bag("test", i, 0.0).0);
    }
    let triggers = (0..config.num_relations)
        .map(|i| (relation_name(i), trigger_token(i)))
        .collect();
    Ok(SynthCorpus {
        train,
        test,
        truth: SynthTruth {
            config: config.clone(),
            triggers,
            noisy_train_bags,
            train_bag_sizes,
        },
    })
}
