//! JSON-lines datasets and the token/answer vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use regat_core::config::ModelConfig;
use regat_core::geometry::BBox;
use regat_core::graph::{RegionSet, SemanticTriple, SEMANTIC_LABELS};
use regat_core::model::Sample;
use regat_core::question::{PAD_ID, UNK_ID};
use regat_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub question_id: String,
    pub tokens: Vec<String>,
    /// `[x, y, w, h]` with `(x, y)` the top-left corner.
    pub boxes: Vec<[f64; 4]>,
    pub features: Vec<Vec<f64>>,
    /// `[subject, predicate, object]`
    #[serde(default)]
    pub triples: Vec<[usize; 3]>,
    /// Answer string to the number of annotators who gave it.
    pub answers: BTreeMap<String, u32>,
}

impl Record {
    pub fn regions(&self) -> Result<RegionSet> {
        let ctx = |e: regat_core::Error| Error::Validation(format!("question {}: {e}", self.question_id));
        if self.boxes.len() != self.features.len() {
            return Err(Error::Validation(format!(
                "question {}: {} boxes but {} feature rows",
                self.question_id,
                self.boxes.len(),
                self.features.len()
            )));
        }
        let boxes = self
            .boxes
            .iter()
            .map(|b| BBox::new(b[0], b[1], b[2], b[3]))
            .collect::<regat_core::Result<Vec<_>>>()
            .map_err(ctx)?;
        let features = Tensor::from_rows(&self.features).map_err(ctx)?;
        RegionSet::new(features, boxes).map_err(ctx)
    }

    pub fn semantic_triples(&self) -> Result<Vec<SemanticTriple>> {
        self.triples
            .iter()
            .map(|&[s, p, o]| {
                if p == 0 || p > SEMANTIC_LABELS {
                    return Err(Error::Validation(format!(
                        "question {}: predicate {p} outside 1..={SEMANTIC_LABELS}",
                        self.question_id
                    )));
                }
                Ok(SemanticTriple {
                    subject: s,
                    predicate: p as u8,
                    object: o,
                })
            })
            .collect()
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(Error::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(Error::json(path, i + 1))?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(Error::io(path))?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(Error::json(path, 0))?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path, 0))?;
    std::fs::write(path, text + "\n").map_err(Error::io(path))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(path, 1))
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Token and answer vocabularies, both sorted so that a dataset always yields the same ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    /// `<pad>` and `<unk>` first, then the sorted word list.
    pub tokens: Vec<String>,
    pub answers: Vec<String>,
}

impl Vocab {
    pub fn build(records: &[Record]) -> Self {
        let words: BTreeSet<&str> = records.iter().flat_map(|r| r.tokens.iter().map(String::as_str)).collect();
        let answers: BTreeSet<&str> = records.iter().flat_map(|r| r.answers.keys().map(String::as_str)).collect();
        let mut tokens = vec![PAD.to_string(), UNK.to_string()];
        tokens.extend(words.into_iter().filter(|w| *w != PAD && *w != UNK).map(String::from));
        Vocab {
            tokens,
            answers: answers.into_iter().map(String::from).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tokens.get(PAD_ID).map(String::as_str) != Some(PAD) || self.tokens.get(UNK_ID).map(String::as_str) != Some(UNK) {
            return Err(Error::Validation(format!("vocabulary must start with {PAD} and {UNK}")));
        }
        if self.answers.is_empty() {
            return Err(Error::Validation("answer vocabulary is empty".into()));
        }
        Ok(())
    }

    pub fn token_id(&self, word: &str) -> usize {
        self.tokens[2..]
            .binary_search_by(|t| t.as_str().cmp(word))
            .map_or(UNK_ID, |i| i + 2)
    }

    pub fn answer_id(&self, answer: &str) -> Option<usize> {
        self.answers.binary_search_by(|a| a.as_str().cmp(answer)).ok()
    }
}

/// Converts records into model samples. Answers missing from the vocabulary still count
/// against accuracy but contribute no training target.
pub fn to_samples(records: &[Record], vocab: &Vocab, cfg: &ModelConfig, max_regions: usize) -> Result<Vec<Sample>> {
    records
        .iter()
        .map(|r| {
            if r.boxes.len() > max_regions {
                return Err(Error::Validation(format!(
                    "question {}: {} regions exceed model.max_regions = {max_regions}",
                    r.question_id,
                    r.boxes.len()
                )));
            }
            let ids: Vec<usize> = r.tokens.iter().map(|t| vocab.token_id(t)).collect();
            let mut answers = BTreeMap::new();
            for (a, &n) in &r.answers {
                match vocab.answer_id(a) {
                    Some(i) => {
                        answers.insert(i, n);
                    }
                    None => log::debug!("question {}: answer `{a}` not in vocabulary", r.question_id),
                }
            }
            Sample::new(cfg, r.question_id.clone(), &ids, r.regions()?, &r.semantic_triples()?, answers)
                .map_err(|e| Error::Validation(format!("question {}: {e}", r.question_id)))
        })
        .collect()
}
