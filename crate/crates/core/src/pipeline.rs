//! End-to-end helpers shared by the command line and the experiments: build a
//! model from a corpus, train it, evaluate it.

use thiserror::Error;

use crate::config::ModelConfig;
use crate::corpus::{
    build_bags, random_embeddings, BagMode, RelationInventory, SentenceInstance, Vocabulary,
};
use crate::eval::{evaluate, Evaluation};
use crate::model::{Model, ModelError, PreparedBag};
use crate::seeding::{self, stream};
use crate::tensor::Tensor;
use crate::trainer::{EpochReport, TrainError, Trainer};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("evaluation: {0}")]
    Eval(#[from] crate::autodiff::AutodiffError),
    #[error("training corpus is empty")]
    EmptyCorpus,
}

/// The control configuration: plain word embeddings and no sentence gate.
pub fn ablation_config(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        fine_grained: false,
        beta: -1.0,
        ..config.clone()
    }
}

/// A fresh model over `train`. Without pretrained vectors the vocabulary is
/// the training tokens and rows are drawn uniformly.
pub fn build_model(
    config: &ModelConfig,
    train: &[SentenceInstance],
    pretrained: Option<(Vocabulary, Tensor)>,
    seed: u64,
) -> Result<Model, PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::EmptyCorpus);
    }
    let (vocab, embeddings) = match pretrained {
        Some(p) => p,
        None => {
            let vocab = Vocabulary::from_instances(train);
            let mut rng = seeding::rng(seed, &[stream::INIT, 0]);
            let emb = random_embeddings(&vocab, config.word_dim, &mut rng);
            (vocab, emb)
        }
    };
    let relations = RelationInventory::from_instances(train);
    Ok(Model::new(
        config.clone(),
        vocab,
        embeddings,
        relations,
        seed,
    )?)
}

pub fn training_bags(
    model: &Model,
    train: &[SentenceInstance],
) -> Result<Vec<PreparedBag>, PipelineError> {
    Ok(model.prepare_bags(&build_bags(train, BagMode::Train))?)
}

pub fn eval_bags(
    model: &Model,
    test: &[SentenceInstance],
) -> Result<Vec<PreparedBag>, PipelineError> {
    Ok(model.prepare_bags(&build_bags(test, BagMode::Eval))?)
}

/// Trains for `config.epochs` epochs and evaluates on `test`.
pub fn train_and_evaluate<F: FnMut(&EpochReport)>(
    config: &ModelConfig,
    train: &[SentenceInstance],
    test: &[SentenceInstance],
    pretrained: Option<(Vocabulary, Tensor)>,
    seed: u64,
    on_epoch: F,
) -> Result<(Trainer, Evaluation), PipelineError> {
    let model = build_model(config, train, pretrained, seed)?;
    let bags = training_bags(&model, train)?;
    let mut trainer = Trainer::new(model, seed, bags.len());
    trainer.fit(&bags, on_epoch)?;
    let test_bags = eval_bags(&trainer.model, test)?;
    let evaluation = evaluate(&trainer.model, &test_bags)?;
    Ok((trainer, evaluation))
}
