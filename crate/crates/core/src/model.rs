//! The full relation extractor: parameters plus the bag-level forward pass.

use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamId, ParamStore, Tape, Var};
use crate::bag_attention::{bag_repr, gate_and_normalize, sentence_relevance, GatedWeights};
use crate::classifier::{logits, nll_from_logits, ClassifierParams};
use crate::config::{ConfigError, ModelConfig};
use crate::corpus::{Bag, RelationInventory, Vocabulary};
use crate::embedding::{
    assemble_input, init_relation_word_queries, EmbeddingParams, PreparedSentence,
};
use crate::encoder::{dropout_mask, encode_sentence, ConvBank, FilterBank};
use crate::seeding::{self, stream};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("relation {0:?} is not in the inventory")]
    UnknownRelation(String),
    #[error("embedding table has {rows} rows but the vocabulary has {vocab} entries")]
    VocabMismatch { rows: usize, vocab: usize },
}

pub const WORD_EMBEDDING: &str = "word_embedding";
pub const POS_HEAD: &str = "pos_head";
pub const POS_TAIL: &str = "pos_tail";
pub const RELATION_WORD_QUERY: &str = "relation_word_query";
pub const RELATION_FEATURE_QUERY: &str = "relation_feature_query";
pub const OUT_WEIGHT: &str = "out.weight";
pub const OUT_BIAS: &str = "out.bias";

pub fn conv_weight_name(width: usize) -> String {
    format!("conv{width}.weight")
}

pub fn conv_bias_name(width: usize) -> String {
    format!("conv{width}.bias")
}

#[derive(Clone, Debug)]
pub struct ModelParamIds {
    pub embedding: EmbeddingParams,
    pub filters: FilterBank,
    /// `h × feature_dim`: one feature-space query per relation.
    pub relation_feature_query: ParamId,
    pub classifier: ClassifierParams,
}

/// A bag reduced to indices, ready for the forward pass.
#[derive(Clone, Debug)]
pub struct PreparedBag {
    /// Position in the source dataset; keys the dropout streams.
    pub index: usize,
    pub head: String,
    pub tail: String,
    /// Training label, when known.
    pub label: Option<usize>,
    /// Gold relation names (may include names unknown to the model).
    pub gold: Vec<String>,
    pub sentences: Vec<PreparedSentence>,
}

/// Dropout configuration for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct DropoutContext {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Clone, Debug)]
pub struct BagForward {
    pub features: Vec<Var>,
    pub alphas: Vec<Option<Var>>,
    pub gate: GatedWeights,
    pub g: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub relations: RelationInventory,
    pub params: ParamStore,
    pub ids: ModelParamIds,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Model {
    /// Initializes a model around `embeddings` (one row per vocabulary entry).
    /// `config.word_dim` is taken from the embedding width.
    pub fn new(
        mut config: ModelConfig,
        vocab: Vocabulary,
        embeddings: Tensor,
        relations: RelationInventory,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if embeddings.rank() != 2 || embeddings.rows() != vocab.len() {
            return Err(ModelError::VocabMismatch {
                rows: embeddings.shape().first().copied().unwrap_or(0),
                vocab: vocab.len(),
            });
        }
        config.word_dim = embeddings.cols();
        config.window_widths.sort_unstable();
        config.window_widths.dedup();
        config.validate()?;

        let mut rng = seeding::rng(seed, &[stream::INIT]);
        let mut qrng = seeding::rng(seed, &[stream::QUERIES]);
        let h = relations.len();
        let k = config.input_dim();
        let feat = config.feature_dim();
        let pos_rows = 2 * config.pos_clip + 1;

        let word_query = init_relation_word_queries(&relations, &vocab, &embeddings, &mut qrng);
        let feature_query = Tensor::uniform(&[h, feat], 0.1, &mut qrng);

        let mut params = ParamStore::new();
        params.insert(WORD_EMBEDDING, embeddings)?;
        params.insert(
            POS_HEAD,
            Tensor::uniform(&[pos_rows, config.pos_dim], 0.25, &mut rng),
        )?;
        params.insert(
            POS_TAIL,
            Tensor::uniform(&[pos_rows, config.pos_dim], 0.25, &mut rng),
        )?;
        params.insert(RELATION_WORD_QUERY, word_query)?;
        params.insert(RELATION_FEATURE_QUERY, feature_query)?;
        for &w in &config.window_widths {
            let n = config.filters_per_width;
            let bound = glorot(w * k, n);
            params.insert(
                &conv_weight_name(w),
                Tensor::uniform(&[n, w, k], bound, &mut rng),
            )?;
            params.insert(&conv_bias_name(w), Tensor::zeros(&[n]))?;
        }
        params.insert(
            OUT_WEIGHT,
            Tensor::uniform(&[h, feat], glorot(feat, h), &mut rng),
        )?;
        params.insert(OUT_BIAS, Tensor::zeros(&[h]))?;

        Self::from_parts(config, vocab, relations, params)
    }

    /// Reassembles a model from named parameters, checking every shape.
    pub fn from_parts(
        config: ModelConfig,
        vocab: Vocabulary,
        relations: RelationInventory,
        params: ParamStore,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let h = relations.len();
        let k = config.input_dim();
        let feat = config.feature_dim();
        let pos_rows = 2 * config.pos_clip + 1;
        let expect = |name: &str, shape: Vec<usize>| -> Result<ParamId, ModelError> {
            let id = params
                .id(name)
                .map_err(|_| ModelError::MissingParam(name.to_string()))?;
            let found = params.value(id).shape().to_vec();
            if found != shape {
                return Err(ModelError::ShapeMismatch {
                    name: name.to_string(),
                    expected: shape,
                    found,
                });
            }
            Ok(id)
        };
        let embedding = EmbeddingParams {
            word: expect(WORD_EMBEDDING, vec![vocab.len(), config.word_dim])?,
            pos_head: expect(POS_HEAD, vec![pos_rows, config.pos_dim])?,
            pos_tail: expect(POS_TAIL, vec![pos_rows, config.pos_dim])?,
            relation_word_query: expect(RELATION_WORD_QUERY, vec![h, config.word_dim])?,
        };
        let relation_feature_query = expect(RELATION_FEATURE_QUERY, vec![h, feat])?;
        let banks = config
            .window_widths
            .iter()
            .map(|&w| {
                Ok(ConvBank {
                    width: w,
                    weight: expect(&conv_weight_name(w), vec![config.filters_per_width, w, k])?,
                    bias: expect(&conv_bias_name(w), vec![config.filters_per_width])?,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        let classifier = ClassifierParams {
            weight: expect(OUT_WEIGHT, vec![h, feat])?,
            bias: expect(OUT_BIAS, vec![h])?,
        };
        if params.len() != 7 + 2 * banks.len() {
            return Err(ModelError::MissingParam(format!(
                "expected {} parameters, found {}",
                7 + 2 * banks.len(),
                params.len()
            )));
        }
        Ok(Model {
            ids: ModelParamIds {
                embedding,
                filters: FilterBank { banks },
                relation_feature_query,
                classifier,
            },
            config,
            vocab,
            relations,
            params,
        })
    }

    pub fn prepare_bag(&self, bag: &Bag, index: usize) -> Result<PreparedBag, ModelError> {
        let label = match &bag.relation {
            Some(r) => Some(
                self.relations
                    .get(r)
                    .ok_or_else(|| ModelError::UnknownRelation(r.clone()))?,
            ),
            None => None,
        };
        Ok(PreparedBag {
            index,
            head: bag.head.clone(),
            tail: bag.tail.clone(),
            label,
            gold: bag.gold.iter().cloned().collect(),
            sentences: bag
                .instances
                .iter()
                .map(|i| PreparedSentence::new(i, &self.vocab, self.config.pos_clip))
                .collect(),
        })
    }

    pub fn prepare_bags(&self, bags: &[Bag]) -> Result<Vec<PreparedBag>, ModelError> {
        bags.iter()
            .enumerate()
            .map(|(i, b)| self.prepare_bag(b, i))
            .collect()
    }

    /// Forward pass for one bag under `relation`'s word and feature queries.
    pub fn forward_bag(
        &self,
        tape: &mut Tape<'_>,
        bag: &PreparedBag,
        relation: usize,
        dropout: Option<DropoutContext>,
    ) -> Result<BagForward, AutodiffError> {
        let ids = &self.ids;
        let query = tape.param_row(ids.relation_feature_query, relation)?;
        let mut features = Vec::with_capacity(bag.sentences.len());
        let mut alphas = Vec::with_capacity(bag.sentences.len());
        let mut relevances = Vec::with_capacity(bag.sentences.len());
        for (j, sentence) in bag.sentences.iter().enumerate() {
            let emb = assemble_input(
                tape,
                sentence,
                relation,
                &ids.embedding,
                self.config.fine_grained,
            )?;
            let mask = dropout.and_then(|d| {
                (self.config.dropout_keep < 1.0).then(|| {
                    let mut rng = seeding::rng(
                        d.seed,
                        &[stream::DROPOUT, d.epoch, bag.index as u64, j as u64],
                    );
                    dropout_mask(
                        self.config.feature_dim(),
                        self.config.dropout_keep,
                        &mut rng,
                    )
                })
            });
            let p = encode_sentence(tape, emb.x, &sentence.spans, &ids.filters, mask)?;
            relevances.push(sentence_relevance(tape, p, query)?);
            features.push(p);
            alphas.push(emb.alpha);
        }
        let gate = gate_and_normalize(tape, &relevances, self.config.beta)?;
        let g = bag_repr(tape, &features, &gate)?;
        let logits = logits(tape, g, &ids.classifier)?;
        Ok(BagForward {
            features,
            alphas,
            gate,
            g,
            logits,
        })
    }

    /// Training loss for a labelled bag, using the gold relation's queries.
    /// Returns `(loss, forward, clamped)`.
    pub fn bag_loss(
        &self,
        tape: &mut Tape<'_>,
        bag: &PreparedBag,
        dropout: Option<DropoutContext>,
    ) -> Result<(Var, BagForward, bool), AutodiffError> {
        let label = bag.label.ok_or_else(|| AutodiffError::InvalidArgument {
            op: "bag_loss",
            detail: format!("bag ({}, {}) has no training label", bag.head, bag.tail),
        })?;
        let fwd = self.forward_bag(tape, bag, label, dropout)?;
        let (loss, clamped) = nll_from_logits(tape, fwd.logits, label)?;
        Ok((loss, fwd, clamped))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_bags, random_embeddings, BagMode, EntitySpan, SentenceInstance};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (Model, Vec<PreparedBag>) {
        let inst = |toks: &[&str], rel: &str| SentenceInstance {
            tokens: toks.iter().map(|s| s.to_string()).collect(),
            head: EntitySpan {
                id: "a".into(),
                start: 1,
                end: 1,
            },
            tail: EntitySpan {
                id: "b".into(),
                start: 3,
                end: 3,
            },
            relation: rel.into(),
        };
        let data = vec![
            inst(&["x", "A", "founded", "B", "y"], "founder"),
            inst(&["A", "A", "z", "B"], "founder"),
        ];
        let vocab = Vocabulary::from_instances(&data);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let e = random_embeddings(&vocab, 6, &mut rng);
        let rels = RelationInventory::from_instances(&data);
        let cfg = ModelConfig {
            pos_dim: 2,
            window_widths: vec![3, 2],
            filters_per_width: 3,
            pos_clip: 8,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, vocab, e, rels, 1).unwrap();
        let bags = model
            .prepare_bags(&build_bags(&data, BagMode::Train))
            .unwrap();
        (model, bags)
    }

    #[test]
    fn feature_dimension_matches_config() {
        let (model, bags) = tiny();
        assert_eq!(model.config.window_widths, vec![2, 3]);
        let mut tape = Tape::inference(&model.params);
        let fwd = model.forward_bag(&mut tape, &bags[0], 1, None).unwrap();
        for p in &fwd.features {
            assert_eq!(tape.value(*p).numel(), 18);
            assert!(tape.value(*p).data().iter().all(|v| v.abs() < 1.0));
        }
        assert_eq!(tape.value(fwd.logits).numel(), 2);
    }

    #[test]
    fn eval_forward_ignores_dropout_seed() {
        let (model, bags) = tiny();
        let run = |d: Option<DropoutContext>| {
            let mut tape = Tape::inference(&model.params);
            let f = model.forward_bag(&mut tape, &bags[0], 1, d).unwrap();
            tape.value(f.logits).clone()
        };
        assert_eq!(run(None), run(None));
        let a = run(Some(DropoutContext { seed: 1, epoch: 0 }));
        let b = run(Some(DropoutContext { seed: 2, epoch: 0 }));
        assert_ne!(a, b);
    }

    #[test]
    fn keep_one_dropout_equals_eval() {
        let (mut model, bags) = tiny();
        model.config.dropout_keep = 1.0;
        let mut t1 = Tape::inference(&model.params);
        let a = model.forward_bag(&mut t1, &bags[0], 1, None).unwrap();
        let mut t2 = Tape::inference(&model.params);
        let b = model
            .forward_bag(
                &mut t2,
                &bags[0],
                1,
                Some(DropoutContext { seed: 4, epoch: 3 }),
            )
            .unwrap();
        assert_eq!(t1.value(a.logits), t2.value(b.logits));
    }

    #[test]
    fn alphas_sum_to_one() {
        let (model, bags) = tiny();
        let mut tape = Tape::inference(&model.params);
        let fwd = model.forward_bag(&mut tape, &bags[0], 0, None).unwrap();
        for a in fwd.alphas.iter().flatten() {
            let s: f64 = tape.value(*a).data().iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn from_parts_detects_shape_errors() {
        let (model, _) = tiny();
        let mut cfg = model.config.clone();
        cfg.filters_per_width = 4;
        let err = Model::from_parts(
            cfg,
            model.vocab.clone(),
            model.relations.clone(),
            model.params.clone(),
        )
        .unwrap_err();
        assert!(matches!(err, ModelError::ShapeMismatch { .. }), "{err}");
    }

    #[test]
    fn word_query_initialized_from_relation_name() {
        let (model, _) = tiny();
        let ids = &model.ids.embedding;
        let r = model.relations.get("founder").unwrap();
        let tok = model.vocab.get("founded");
        assert!(tok.is_some());
        // "founder" itself is not in the vocabulary, so its query is random.
        assert!(model.vocab.get("founder").is_none());
        let q = model.params.value(ids.relation_word_query);
        assert!(q.row(r).iter().all(|v| v.abs() <= 0.25));
    }
}
