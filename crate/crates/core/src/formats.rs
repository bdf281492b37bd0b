//! Line-delimited JSON record schemas exchanged between pipeline stages.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::error::{HigrError, Result};

/// Item corpus record: `{item_id, embedding: [d_in reals]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub item_id: String,
    pub embedding: Vec<f32>,
}

/// Tokenizer output: `{item_id, codes: [D ints]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SidRecord {
    pub item_id: String,
    pub codes: Vec<usize>,
}

/// Tokenized training sample for the slate decoder.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleRecord {
    pub user_features: Vec<f32>,
    pub history: Vec<Vec<usize>>,
    pub slate: Vec<Vec<usize>>,
    pub feedback: Vec<f32>,
    pub effective_view: Vec<bool>,
    /// Item ids behind `slate`, used for grounding-based evaluation.
    #[serde(default)]
    pub slate_item_ids: Vec<String>,
    /// Disliked impressions (negative-feedback pool) for pair construction.
    #[serde(default)]
    pub disliked: Vec<Vec<usize>>,
}

/// Preference pair: `{context_ref, y_plus, y_minus, strategy}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PairRecord {
    pub context_ref: usize,
    pub y_plus: Vec<Vec<usize>>,
    pub y_minus: Vec<Vec<usize>>,
    pub strategy: String,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| HigrError::Data(format!("serialize {}: {e}", path.display())))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path)
        .map_err(|e| HigrError::Data(format!("open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            HigrError::Data(format!("{}:{}: {e}", path.display(), i + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}
