//! Corpus data model and loaders: JSONL instances, GloVe-format embeddings,
//! vocabulary, relation inventory and bag grouping.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

pub const NA_RELATION: &str = "NA";
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("line {line}: expected {expected} values, found {found}")]
    InconsistentDim {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("embedding file contains no vectors")]
    EmptyEmbeddings,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CorpusError + '_ {
    move |source| CorpusError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An entity mention: inclusive token range plus the entity identifier.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntitySpan {
    pub id: String,
    pub start: usize,
    pub end: usize,
}

impl EntitySpan {
    pub fn len(&self) -> usize {
        self.end + 1 - self.start
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

/// One tokenized sentence with its entity pair and distant label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceInstance {
    pub tokens: Vec<String>,
    pub head: EntitySpan,
    pub tail: EntitySpan,
    pub relation: String,
}

impl SentenceInstance {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The two spans in token order. Position features and segmentation are
    /// computed against these, so a tail mentioned before the head is handled
    /// as if the roles were swapped.
    pub fn ordered_spans(&self) -> (&EntitySpan, &EntitySpan) {
        if self.tail.start < self.head.start {
            (&self.tail, &self.head)
        } else {
            (&self.head, &self.tail)
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let m = self.tokens.len();
        if m == 0 {
            return Err("sentence has no tokens".into());
        }
        for (role, span) in [("head", &self.head), ("tail", &self.tail)] {
            if span.start > span.end {
                return Err(format!(
                    "{role} span [{}, {}] is reversed",
                    span.start, span.end
                ));
            }
            if span.end >= m {
                return Err(format!(
                    "{role} span [{}, {}] outside sentence of {m} tokens",
                    span.start, span.end
                ));
            }
        }
        if self.head.overlaps(&self.tail) {
            return Err("head and tail spans overlap".into());
        }
        Ok(())
    }
}

/// Result of reading a JSONL corpus.
#[derive(Debug, Default)]
pub struct JsonlLoad {
    pub instances: Vec<SentenceInstance>,
    /// Lines skipped because truncation to the length limit would cut an
    /// entity span: `(line number, token count)`.
    pub rejected: Vec<(usize, usize)>,
}

pub fn load_jsonl(path: &Path, max_sentence_len: usize) -> Result<JsonlLoad, CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_jsonl(BufReader::new(file), max_sentence_len).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn read_jsonl<R: BufRead>(
    reader: R,
    max_sentence_len: usize,
) -> Result<JsonlLoad, CorpusError> {
    let mut out = JsonlLoad::default();
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let mut inst: SentenceInstance =
            serde_json::from_str(&line).map_err(|e| CorpusError::Line {
                line: lineno,
                message: e.to_string(),
            })?;
        inst.validate().map_err(|message| CorpusError::Line {
            line: lineno,
            message,
        })?;
        if inst.tokens.len() > max_sentence_len {
            if inst.head.end >= max_sentence_len || inst.tail.end >= max_sentence_len {
                out.rejected.push((lineno, inst.tokens.len()));
                continue;
            }
            inst.tokens.truncate(max_sentence_len);
        }
        out.instances.push(inst);
    }
    Ok(out)
}

pub fn save_jsonl(path: &Path, instances: &[SentenceInstance]) -> Result<(), CorpusError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_jsonl(&mut w, instances).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn write_jsonl<W: Write>(w: &mut W, instances: &[SentenceInstance]) -> std::io::Result<()> {
    for inst in instances {
        serde_json::to_writer(&mut *w, inst)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Token ↔ index map with `<pad>` at 0 and `<unk>` at 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut v = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        v.push(PAD_TOKEN);
        v.push(UNK_TOKEN);
        v
    }
}

impl Vocabulary {
    fn push(&mut self, token: &str) -> usize {
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    /// Adds `token` if unseen; returns its index either way.
    pub fn insert(&mut self, token: &str) -> usize {
        match self.index.get(token) {
            Some(&i) => i,
            None => self.push(token),
        }
    }

    /// Vocabulary over every token of `instances`, in first-seen order.
    pub fn from_instances<'a>(instances: impl IntoIterator<Item = &'a SentenceInstance>) -> Self {
        let mut v = Vocabulary::default();
        for inst in instances {
            for t in &inst.tokens {
                v.insert(t);
            }
        }
        v
    }

    /// Rebuilds a vocabulary from its full token list (reserved entries first).
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self, String> {
        if tokens.len() < 2 || tokens[PAD_INDEX] != PAD_TOKEN || tokens[UNK_INDEX] != UNK_TOKEN {
            return Err("token list must start with <pad>, <unk>".into());
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(format!("duplicate token {t:?}"));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Maps tokens to vocabulary indices, unknown tokens to `<unk>`.
pub fn index_tokens(instance: &SentenceInstance, vocab: &Vocabulary) -> Vec<usize> {
    instance
        .tokens
        .iter()
        .map(|t| vocab.get(t).unwrap_or(UNK_INDEX))
        .collect()
}

/// Loads a GloVe text file. The `<pad>` row is zero and the `<unk>` row is
/// drawn uniformly from `[-0.25, 0.25]` using `rng`.
pub fn load_embeddings<R: Rng + ?Sized>(
    path: &Path,
    rng: &mut R,
) -> Result<(Vocabulary, Tensor), CorpusError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_embeddings(BufReader::new(file), rng).map_err(|e| match e {
        CorpusError::Io { source, .. } => CorpusError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

pub fn read_embeddings<B: BufRead, R: Rng + ?Sized>(
    reader: B,
    rng: &mut R,
) -> Result<(Vocabulary, Tensor), CorpusError> {
    let mut vocab = Vocabulary::default();
    let mut rows: Vec<f64> = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in reader.lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: PathBuf::new(),
            source,
        })?;
        let mut parts = line.split_whitespace();
        let Some(token) = parts.next() else { continue };
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| CorpusError::Line {
                    line: lineno,
                    message: format!("invalid number {p:?}"),
                })
            })
            .collect::<Result<_, _>>()?;
        let expected = *dim.get_or_insert(values.len());
        if values.len() != expected || expected == 0 {
            return Err(CorpusError::InconsistentDim {
                line: lineno,
                expected,
                found: values.len(),
            });
        }
        if vocab.get(token).is_some() {
            return Err(CorpusError::DuplicateToken {
                line: lineno,
                token: token.to_string(),
            });
        }
        vocab.insert(token);
        rows.extend(values);
    }
    let dim = dim.ok_or(CorpusError::EmptyEmbeddings)?;
    let mut data = vec![0.0; dim];
    data.extend((0..dim).map(|_| rng.gen_range(-0.25..=0.25)));
    data.extend(rows);
    Ok((vocab.clone(), Tensor::matrix(vocab.len(), dim, data)))
}

/// Random embedding table for a vocabulary without pretrained vectors:
/// zero `<pad>` row, every other row uniform in `[-0.25, 0.25]`.
pub fn random_embeddings<R: Rng + ?Sized>(vocab: &Vocabulary, dim: usize, rng: &mut R) -> Tensor {
    let mut t = Tensor::uniform(&[vocab.len(), dim], 0.25, rng);
    t.row_mut(PAD_INDEX).iter_mut().for_each(|v| *v = 0.0);
    t
}

/// Relation names with `NA` fixed at index 0.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationInventory {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl RelationInventory {
    /// `NA` first, then the remaining names sorted.
    pub fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Self {
        let rest: BTreeSet<&str> = names.into_iter().filter(|n| *n != NA_RELATION).collect();
        let names: Vec<String> = std::iter::once(NA_RELATION)
            .chain(rest)
            .map(str::to_string)
            .collect();
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        RelationInventory { names, index }
    }

    pub fn from_instances(instances: &[SentenceInstance]) -> Self {
        Self::from_names(instances.iter().map(|i| i.relation.as_str()))
    }

    pub fn na_index(&self) -> usize {
        0
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_na(&self, i: usize) -> bool {
        i == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BagMode {
    /// Group by `(head, tail, relation)`.
    Train,
    /// Group by `(head, tail)`, keeping every gold relation.
    Eval,
}

/// All instances sharing an entity pair (and, for training, a label).
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub head: String,
    pub tail: String,
    /// The distant label; `None` for evaluation bags.
    pub relation: Option<String>,
    /// Every label attached to the pair's instances.
    pub gold: BTreeSet<String>,
    pub instances: Vec<SentenceInstance>,
}

pub fn build_bags(instances: &[SentenceInstance], mode: BagMode) -> Vec<Bag> {
    let mut slots: HashMap<(String, String, Option<String>), usize> = HashMap::new();
    let mut bags: Vec<Bag> = Vec::new();
    for inst in instances {
        let relation = match mode {
            BagMode::Train => Some(inst.relation.clone()),
            BagMode::Eval => None,
        };
        let key = (inst.head.id.clone(), inst.tail.id.clone(), relation.clone());
        let slot = *slots.entry(key).or_insert_with(|| {
            bags.push(Bag {
                head: inst.head.id.clone(),
                tail: inst.tail.id.clone(),
                relation,
                gold: BTreeSet::new(),
                instances: Vec::new(),
            });
            bags.len() - 1
        });
        bags[slot].gold.insert(inst.relation.clone());
        bags[slot].instances.push(inst.clone());
    }
    bags
}
