//! A tiny, fully deterministic model and bag used to check every analytic
//! gradient of the network against finite differences.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{
    grad_check, grad_check_elements, AutodiffError, GradCheckReport, ParamId, Tape,
};
use crate::config::ModelConfig;
use crate::corpus::{
    build_bags, random_embeddings, BagMode, EntitySpan, RelationInventory, SentenceInstance,
    Vocabulary,
};
use crate::model::{Model, PreparedBag};
use crate::seeding::{self, stream};

pub const VOCAB_SIZE: usize = 50;
pub const SENTENCES: usize = 3;
pub const MAX_LEN: usize = 12;
/// Tokens reserved for each sentence, so no word row is shared between them.
const BLOCK: usize = (VOCAB_SIZE - 2) / SENTENCES;
/// Relevances closer than this to the gate are rejected when building a
/// gated fixture, so finite differences never flip the selection.
const GATE_MARGIN: f64 = 1e-3;

pub fn tiny_config(beta: f64) -> ModelConfig {
    ModelConfig {
        word_dim: 8,
        pos_dim: 2,
        window_widths: vec![3],
        filters_per_width: 4,
        beta,
        dropout_keep: 1.0,
        pos_clip: 12,
        max_sentence_len: MAX_LEN,
        batch_size: 1,
        epochs: 1,
        ..ModelConfig::default()
    }
}

#[derive(Clone, Debug)]
pub struct TinyFixture {
    pub model: Model,
    pub bag: PreparedBag,
    pub instances: Vec<SentenceInstance>,
    /// Sentences removed by the gate.
    pub filtered: Vec<usize>,
}

fn sentence<R: Rng>(block: usize, relation: &str, rng: &mut R) -> SentenceInstance {
    let len = rng.gen_range(6..=MAX_LEN);
    let tokens: Vec<String> = (0..len)
        .map(|_| format!("w{}", block * BLOCK + rng.gen_range(0..BLOCK)))
        .collect();
    let mut slots: Vec<usize> = (0..len).collect();
    slots.shuffle(rng);
    let (h, t) = (slots[0], slots[1]);
    SentenceInstance {
        tokens,
        head: EntitySpan {
            id: "head".into(),
            start: h,
            end: h,
        },
        tail: EntitySpan {
            id: "tail".into(),
            start: t,
            end: t,
        },
        relation: relation.into(),
    }
}

fn build(seed: u64, attempt: u64, beta: f64) -> TinyFixture {
    let mut rng = seeding::rng(seed, &[stream::FIXTURE, attempt]);
    let mut vocab = Vocabulary::default();
    for i in 0..VOCAB_SIZE - 2 {
        vocab.insert(&format!("w{i}"));
    }
    let names = ["/tiny/born_in", "/tiny/works_for", "/tiny/located_in"];
    let relations = RelationInventory::from_names(names);
    let gold = names[rng.gen_range(0..names.len())];
    let instances: Vec<SentenceInstance> = (0..SENTENCES)
        .map(|b| sentence(b, gold, &mut rng))
        .collect();
    let embeddings = random_embeddings(&vocab, 8, &mut rng);
    let model_seed = rng.gen();
    let model = Model::new(tiny_config(beta), vocab, embeddings, relations, model_seed)
        .expect("valid tiny model");
    let bags = build_bags(&instances, BagMode::Train);
    let bag = model.prepare_bag(&bags[0], 0).expect("known relation");
    TinyFixture {
        model,
        bag,
        instances,
        filtered: Vec::new(),
    }
}

/// Relevance of each sentence to the gold relation, without dropout.
pub fn relevances(model: &Model, bag: &PreparedBag) -> Result<Vec<f64>, AutodiffError> {
    let mut tape = Tape::inference(&model.params);
    let fwd = model.forward_bag(&mut tape, bag, bag.label.unwrap_or(0), None)?;
    Ok(fwd.gate.relevances)
}

/// The fixture for `seed`. With `beta > -1`, draws are repeated until
/// exactly one sentence sits clearly below the gate and the rest clearly
/// above it.
pub fn tiny_fixture(seed: u64, beta: f64) -> TinyFixture {
    if beta <= -1.0 {
        return build(seed, 0, beta);
    }
    for attempt in 0.. {
        let mut fx = build(seed, attempt, beta);
        let e = relevances(&fx.model, &fx.bag).expect("tiny forward");
        let below: Vec<usize> = (0..e.len())
            .filter(|&i| e[i] < beta - GATE_MARGIN)
            .collect();
        let clear = e.iter().all(|v| (v - beta).abs() > GATE_MARGIN);
        if clear && below.len() == 1 {
            fx.filtered = below;
            return fx;
        }
    }
    unreachable!()
}

fn loss(
    model: &Model,
    bag: &PreparedBag,
    tape: &mut Tape<'_>,
) -> crate::autodiff::Result<crate::autodiff::Var> {
    model.bag_loss(tape, bag, None).map(|(l, _, _)| l)
}

/// Checks every element of every parameter of `model` on `bag`.
pub fn check_all(
    model: &mut Model,
    bag: &PreparedBag,
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, AutodiffError> {
    let mut params = std::mem::take(&mut model.params);
    let report = grad_check(&mut params, h, tol, |tape| loss(model, bag, tape));
    model.params = params;
    report
}

/// Checks only the listed elements.
pub fn check_elements(
    model: &mut Model,
    bag: &PreparedBag,
    elements: &[(ParamId, usize)],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport, AutodiffError> {
    let mut params = std::mem::take(&mut model.params);
    let report = grad_check_elements(&mut params, elements, h, tol, |tape| loss(model, bag, tape));
    model.params = params;
    report
}

/// Word-embedding elements read only by sentence `j` of the bag.
pub fn sentence_word_elements(model: &Model, bag: &PreparedBag, j: usize) -> Vec<(ParamId, usize)> {
    let id = model.ids.embedding.word;
    let dim = model.params.value(id).cols();
    let others: Vec<usize> = bag
        .sentences
        .iter()
        .enumerate()
        .filter(|(k, _)| *k != j)
        .flat_map(|(_, s)| s.token_ids.iter().copied())
        .collect();
    let mut rows: Vec<usize> = bag.sentences[j]
        .token_ids
        .iter()
        .copied()
        .filter(|r| !others.contains(r))
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.into_iter()
        .flat_map(|r| (0..dim).map(move |c| (id, r * dim + c)))
        .collect()
}

/// Largest loss change when each listed element is moved by `±h` in turn.
pub fn max_loss_change(
    model: &mut Model,
    bag: &PreparedBag,
    elements: &[(ParamId, usize)],
    h: f64,
) -> f64 {
    let eval = |model: &Model| {
        let mut tape = Tape::inference(&model.params);
        let l = loss(model, bag, &mut tape).expect("tiny forward");
        tape.value(l).item()
    };
    let base = eval(model);
    let mut worst = 0.0f64;
    for &(id, i) in elements {
        let original = model.params.value(id).data()[i];
        for delta in [h, -h] {
            model.params.value_mut(id).data_mut()[i] = original + delta;
            worst = worst.max((eval(model) - base).abs());
        }
        model.params.value_mut(id).data_mut()[i] = original;
    }
    worst
}
