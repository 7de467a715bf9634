//! Bit-exact JSONL serialization of logged feedback.
//!
//! The first line of a file is the metadata record (size, reward type and
//! noise, dims, seed, and the action embeddings); every following line is one
//! logged interaction. Numbers are emitted in shortest round-trip decimal
//! form and key order is fixed, so two writes of the same dataset are
//! byte-identical and `write . read` / `read . write` are identities.
//!
//! A sentence serializes as a bare array when it has no noisy copy and as
//! `{"embedding": [..], "noisy_embedding": [..]}` when it does.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{
    validate_dataset, ActionSet, Context, DatasetMeta, Dims, LoggedDataset, LoggedRecord, RewardType, Sentence,
    Violation,
};

#[derive(Debug, Error)]
pub enum DataIoError {
    #[error("dataset fails validation before write: {0}")]
    InvalidDataset(Violation),
    #[error("I/O failure after writing {lines_written} lines: {source}")]
    Io {
        lines_written: usize,
        #[source]
        source: std::io::Error,
    },
    #[error("input is empty: missing metadata line")]
    MissingMetadata,
    #[error("malformed JSON on line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("unknown keys {keys:?} on line {line} (strict mode)")]
    UnknownKeys { line: usize, keys: Vec<String> },
    #[error("metadata malformed: {0}")]
    BadMetadata(String),
    #[error("record {record} fails validation: {violation}")]
    Validation { record: usize, violation: Violation },
    #[error("dataset-level validation failed: {0}")]
    MetaValidation(Violation),
}

// ── Wire format ─────────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct DimsDto {
    d_u: usize,
    d_q: usize,
    d_e: usize,
    d_s: usize,
}

#[derive(Serialize, Deserialize)]
struct MetaDto {
    size: usize,
    reward_type: String,
    reward_std: f64,
    dims: DimsDto,
    seed: u64,
    action_embeddings: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    action_list: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum SentenceDto {
    Plain(Vec<f64>),
    WithNoisy { embedding: Vec<f64>, noisy_embedding: Vec<f64> },
}

impl From<&Sentence> for SentenceDto {
    fn from(s: &Sentence) -> Self {
        match &s.noisy_embedding {
            None => SentenceDto::Plain(s.embedding.clone()),
            Some(noisy) => SentenceDto::WithNoisy { embedding: s.embedding.clone(), noisy_embedding: noisy.clone() },
        }
    }
}

impl From<SentenceDto> for Sentence {
    fn from(dto: SentenceDto) -> Self {
        match dto {
            SentenceDto::Plain(embedding) => Sentence::new(embedding),
            SentenceDto::WithNoisy { embedding, noisy_embedding } => Sentence::with_noisy(embedding, noisy_embedding),
        }
    }
}

/// Key order mirrors the logged-feedback schema; unknown keys collect into
/// `extra` so lenient reads preserve them.
#[derive(Serialize, Deserialize)]
struct RecordDto {
    #[serde(skip_serializing_if = "Option::is_none")]
    user_id: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    item_id: Option<u64>,
    context: Vec<f64>,
    query: Vec<f64>,
    action: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    action_choice_probability: Option<f64>,
    sentence: SentenceDto,
    #[serde(skip_serializing_if = "Option::is_none")]
    expected_reward: Option<f64>,
    reward: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    density_support_sentences: Option<Vec<SentenceDto>>,
    #[serde(flatten)]
    extra: BTreeMap<String, serde_json::Value>,
}

impl From<&LoggedRecord> for RecordDto {
    fn from(r: &LoggedRecord) -> Self {
        RecordDto {
            user_id: r.user_id,
            item_id: r.item_id,
            context: r.context.user.clone(),
            query: r.context.query.clone(),
            action: r.action,
            action_choice_probability: r.propensity,
            sentence: (&r.sentence).into(),
            expected_reward: r.expected_reward,
            reward: r.reward,
            density_support_sentences: r.density_support_sentences.as_ref().map(|v| v.iter().map(Into::into).collect()),
            extra: r.extra.clone(),
        }
    }
}

impl From<RecordDto> for LoggedRecord {
    fn from(dto: RecordDto) -> Self {
        LoggedRecord {
            context: Context::new(dto.context, dto.query),
            action: dto.action,
            propensity: dto.action_choice_probability,
            sentence: dto.sentence.into(),
            reward: dto.reward,
            expected_reward: dto.expected_reward,
            density_support_sentences: dto.density_support_sentences.map(|v| v.into_iter().map(Into::into).collect()),
            user_id: dto.user_id,
            item_id: dto.item_id,
            extra: dto.extra,
        }
    }
}

fn meta_to_dto(meta: &DatasetMeta) -> MetaDto {
    MetaDto {
        size: meta.size,
        reward_type: meta.reward_type.to_string(),
        reward_std: meta.reward_std,
        dims: DimsDto { d_u: meta.dims.d_u, d_q: meta.dims.d_q, d_e: meta.dims.d_e, d_s: meta.dims.d_s },
        seed: meta.seed,
        action_embeddings: meta.action_set.embeddings.rows().into_iter().map(|r| r.to_vec()).collect(),
        action_list: meta.action_list.clone(),
    }
}

fn meta_from_dto(dto: MetaDto) -> Result<DatasetMeta, DataIoError> {
    let reward_type = match dto.reward_type.as_str() {
        "continuous" => RewardType::Continuous,
        "binary" => RewardType::Binary,
        other => return Err(DataIoError::BadMetadata(format!("unknown reward_type {other:?}"))),
    };
    let rows = dto.action_embeddings.len();
    let cols = dto.action_embeddings.first().map_or(0, |r| r.len());
    if dto.action_embeddings.iter().any(|r| r.len() != cols) {
        return Err(DataIoError::BadMetadata("ragged action_embeddings".to_string()));
    }
    let flat: Vec<f64> = dto.action_embeddings.into_iter().flatten().collect();
    let embeddings = Array2::from_shape_vec((rows, cols), flat)
        .map_err(|e| DataIoError::BadMetadata(e.to_string()))?;
    Ok(DatasetMeta {
        size: dto.size,
        reward_type,
        reward_std: dto.reward_std,
        action_set: ActionSet::new(embeddings),
        action_list: dto.action_list,
        dims: Dims { d_u: dto.dims.d_u, d_q: dto.dims.d_q, d_e: dto.dims.d_e, d_s: dto.dims.d_s },
        seed: dto.seed,
    })
}

// ── Operations ──────────────────────────────────────────────────────────

/// Writes the metadata line followed by one JSON object per record and
/// returns the number of data lines written. The dataset must validate.
pub fn write_jsonl(dataset: &LoggedDataset, sink: &mut impl Write) -> Result<usize, DataIoError> {
    if let Some(v) = validate_dataset(dataset).into_iter().next() {
        return Err(DataIoError::InvalidDataset(v));
    }
    let mut lines_written = 0usize;
    let mut emit = |line: String, lines_written: &mut usize| -> Result<(), DataIoError> {
        sink.write_all(line.as_bytes())
            .and_then(|_| sink.write_all(b"\n"))
            .map_err(|source| DataIoError::Io { lines_written: *lines_written, source })?;
        *lines_written += 1;
        Ok(())
    };

    let meta_line = serde_json::to_string(&meta_to_dto(&dataset.meta)).expect("metadata is always serializable");
    emit(meta_line, &mut lines_written)?;
    for record in &dataset.records {
        let dto: RecordDto = record.into();
        let line = serde_json::to_string(&dto).expect("validated records are always serializable");
        emit(line, &mut lines_written)?;
    }
    Ok(lines_written - 1)
}

/// Parses a JSONL stream into a validated dataset. Strict mode rejects
/// unknown record keys; lenient mode preserves them on the record.
pub fn read_jsonl(source: impl BufRead, strict: bool) -> Result<LoggedDataset, DataIoError> {
    let mut lines = source.lines().enumerate();

    let (_, meta_line) = lines.next().ok_or(DataIoError::MissingMetadata)?;
    let meta_line = meta_line.map_err(|source| DataIoError::Io { lines_written: 0, source })?;
    let meta_dto: MetaDto =
        serde_json::from_str(&meta_line).map_err(|source| DataIoError::Parse { line: 1, source })?;
    let meta = meta_from_dto(meta_dto)?;

    let mut records = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|source| DataIoError::Io { lines_written: 0, source })?;
        if line.trim().is_empty() {
            continue;
        }
        let dto: RecordDto =
            serde_json::from_str(&line).map_err(|source| DataIoError::Parse { line: line_no, source })?;
        if strict && !dto.extra.is_empty() {
            return Err(DataIoError::UnknownKeys { line: line_no, keys: dto.extra.keys().cloned().collect() });
        }
        records.push(dto.into());
    }

    let dataset = LoggedDataset { records, meta };
    if let Some(v) = validate_dataset(&dataset).into_iter().next() {
        return Err(match v.record {
            Some(record) => DataIoError::Validation { record, violation: v },
            None => DataIoError::MetaValidation(v),
        });
    }
    Ok(dataset)
}

/// [`write_jsonl`] into a file path.
pub fn write_jsonl_file(dataset: &LoggedDataset, path: &std::path::Path) -> Result<usize, DataIoError> {
    let file = std::fs::File::create(path).map_err(|source| DataIoError::Io { lines_written: 0, source })?;
    let mut writer = std::io::BufWriter::new(file);
    let n = write_jsonl(dataset, &mut writer)?;
    writer.flush().map_err(|source| DataIoError::Io { lines_written: n + 1, source })?;
    Ok(n)
}

/// [`read_jsonl`] from a file path.
pub fn read_jsonl_file(path: &std::path::Path, strict: bool) -> Result<LoggedDataset, DataIoError> {
    let file = std::fs::File::open(path).map_err(|source| DataIoError::Io { lines_written: 0, source })?;
    read_jsonl(std::io::BufReader::new(file), strict)
}
