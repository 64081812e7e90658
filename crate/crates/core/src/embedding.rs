//! Fine-grained text embedding layer.
//!
//! The word-embedded sentence is cut into three segments at the entity
//! boundaries. Each segment is reduced to its mean word vector, scored by
//! cosine against the relation's word-space query, and the softmax of those
//! scores rescales every word row of its segment. Position embeddings are
//! concatenated afterwards, so attention only touches the word portion.

use std::ops::Range;

use rand::Rng;

use crate::autodiff::{ParamId, Result, Tape, Var};
use crate::corpus::{index_tokens, RelationInventory, SentenceInstance, Vocabulary};
use crate::tensor::Tensor;

/// Three consecutive half-open token ranges covering `[0, m)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentSpans {
    pub pieces: [Range<usize>; 3],
}

impl SegmentSpans {
    /// Pieces `[0, first_end]`, `[first_end+1, second_end]`, `[second_end+1, m-1]`
    /// in inclusive terms.
    pub fn from_boundaries(first_end: usize, second_end: usize, m: usize) -> Self {
        debug_assert!(first_end < second_end && second_end < m);
        SegmentSpans {
            pieces: [
                0..first_end + 1,
                first_end + 1..second_end + 1,
                second_end + 1..m,
            ],
        }
    }
}

/// Segments an instance by the last token of each entity (in token order).
pub fn segment_sentence(instance: &SentenceInstance) -> SegmentSpans {
    let (first, second) = instance.ordered_spans();
    SegmentSpans::from_boundaries(first.end, second.end, instance.len())
}

/// Distance `i - anchor` clipped to `[-clip, clip]`.
pub fn clipped_distance(i: usize, anchor: usize, clip: usize) -> i64 {
    let d = i as i64 - anchor as i64;
    d.clamp(-(clip as i64), clip as i64)
}

/// Row of a position table for a clipped distance; row 0 is distance `-clip`.
pub fn position_row(i: usize, anchor: usize, clip: usize) -> usize {
    (clipped_distance(i, anchor, clip) + clip as i64) as usize
}

/// An instance reduced to the indices the model consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSentence {
    pub token_ids: Vec<usize>,
    pub spans: SegmentSpans,
    pub pos_head: Vec<usize>,
    pub pos_tail: Vec<usize>,
}

impl PreparedSentence {
    pub fn new(instance: &SentenceInstance, vocab: &Vocabulary, clip: usize) -> Self {
        let (first, second) = instance.ordered_spans();
        let m = instance.len();
        PreparedSentence {
            token_ids: index_tokens(instance, vocab),
            spans: segment_sentence(instance),
            pos_head: (0..m).map(|i| position_row(i, first.start, clip)).collect(),
            pos_tail: (0..m)
                .map(|i| position_row(i, second.start, clip))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Parameters read by the embedding layer.
#[derive(Clone, Copy, Debug)]
pub struct EmbeddingParams {
    pub word: ParamId,
    pub pos_head: ParamId,
    pub pos_tail: ParamId,
    /// `h × k_w`: one word-space query per relation.
    pub relation_word_query: ParamId,
}

/// Mean word vector of each piece; the zero vector for an empty piece.
pub fn segment_vectors(tape: &mut Tape<'_>, words: Var, spans: &SegmentSpans) -> Result<[Var; 3]> {
    Ok([
        tape.mean_rows(words, spans.pieces[0].clone())?,
        tape.mean_rows(words, spans.pieces[1].clone())?,
        tape.mean_rows(words, spans.pieces[2].clone())?,
    ])
}

/// Segment weights: softmax over the cosine of each segment with `query`.
pub fn intra_attention(tape: &mut Tape<'_>, segments: &[Var; 3], query: Var) -> Result<Var> {
    let scores = [
        tape.cosine(segments[0], query)?,
        tape.cosine(segments[1], query)?,
        tape.cosine(segments[2], query)?,
    ];
    let scores = tape.concat(&scores)?;
    tape.softmax(scores)
}

/// Scales every row of piece `i` by `alpha[i]`, keeping token order.
pub fn apply_segment_weights(
    tape: &mut Tape<'_>,
    words: Var,
    spans: &SegmentSpans,
    alpha: Var,
) -> Result<Var> {
    let mut parts = Vec::with_capacity(3);
    for (i, piece) in spans.pieces.iter().enumerate() {
        if piece.is_empty() {
            continue;
        }
        let rows = tape.slice_rows(words, piece.clone())?;
        let weight = tape.index(alpha, i)?;
        parts.push(tape.scale_by(rows, weight)?);
    }
    tape.concat_rows(&parts)
}

#[derive(Clone, Copy, Debug)]
pub struct EmbeddedSentence {
    /// `m × (k_w + 2 k_p)`.
    pub x: Var,
    /// Segment weights, absent for the plain embedding layer.
    pub alpha: Option<Var>,
}

/// Builds the model input for one sentence under `relation`'s query.
pub fn assemble_input(
    tape: &mut Tape<'_>,
    sentence: &PreparedSentence,
    relation: usize,
    params: &EmbeddingParams,
    fine_grained: bool,
) -> Result<EmbeddedSentence> {
    let words = tape.gather_rows(params.word, &sentence.token_ids)?;
    let (words, alpha) = if fine_grained {
        let query = tape.param_row(params.relation_word_query, relation)?;
        let segments = segment_vectors(tape, words, &sentence.spans)?;
        let alpha = intra_attention(tape, &segments, query)?;
        (
            apply_segment_weights(tape, words, &sentence.spans, alpha)?,
            Some(alpha),
        )
    } else {
        (words, None)
    };
    let dh = tape.gather_rows(params.pos_head, &sentence.pos_head)?;
    let dt = tape.gather_rows(params.pos_tail, &sentence.pos_tail)?;
    let x = tape.concat_cols(&[words, dh, dt])?;
    Ok(EmbeddedSentence { x, alpha })
}

/// Alphanumeric pieces of a relation name, split on `/`, `_` and `.`.
pub fn relation_name_tokens(name: &str) -> Vec<&str> {
    name.split(['/', '_', '.'])
        .filter(|t| !t.is_empty() && t.chars().all(char::is_alphanumeric))
        .collect()
}

/// Word-space relation queries: the mean embedding of the in-vocabulary
/// pieces of each relation name, or a uniform `[-0.25, 0.25]` draw when no
/// piece is known.
pub fn init_relation_word_queries<R: Rng + ?Sized>(
    inventory: &RelationInventory,
    vocab: &Vocabulary,
    embeddings: &Tensor,
    rng: &mut R,
) -> Tensor {
    let dim = embeddings.cols();
    let mut out = Vec::with_capacity(inventory.len() * dim);
    for name in inventory.names() {
        let rows: Vec<usize> = relation_name_tokens(name)
            .into_iter()
            .filter_map(|t| vocab.get(t))
            .collect();
        if rows.is_empty() {
            out.extend((0..dim).map(|_| rng.gen_range(-0.25..=0.25)));
        } else {
            let mut mean = vec![0.0; dim];
            for &r in &rows {
                for (m, v) in mean.iter_mut().zip(embeddings.row(r)) {
                    *m += v;
                }
            }
            out.extend(mean.into_iter().map(|v| v / rows.len() as f64));
        }
    }
    Tensor::matrix(inventory.len(), dim, out)
}
