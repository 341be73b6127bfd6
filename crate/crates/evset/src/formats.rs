//! JSON-lines datasets and predictions, and the vocabulary file.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use evset_core::eval::PredictedEvent;
use evset_core::synth::{Event, Regime, SyntheticVideo, Vocabulary};
use evset_core::{TemporalInterval, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub center: f64,
    pub duration: f64,
    #[serde(default)]
    pub tokens: Vec<u32>,
}

/// One dataset line. `events` may be missing for feature-only files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regime: Option<String>,
    pub features: Vec<Vec<f64>>,
    #[serde(default)]
    pub events: Vec<EventRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionEvent {
    pub center: f64,
    pub duration: f64,
    pub confidence: f64,
    pub tokens: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub id: String,
    pub events: Vec<PredictionEvent>,
}

impl From<&SyntheticVideo> for VideoRecord {
    fn from(v: &SyntheticVideo) -> Self {
        VideoRecord {
            id: v.id.clone(),
            regime: v.regime.map(|r| r.as_str().to_string()),
            features: (0..v.features.rows())
                .map(|r| v.features.row(r).to_vec())
                .collect(),
            events: v
                .events
                .iter()
                .map(|e| EventRecord {
                    center: e.interval.center,
                    duration: e.interval.duration,
                    tokens: e.tokens.clone(),
                })
                .collect(),
        }
    }
}

impl VideoRecord {
    pub fn into_video(self) -> std::result::Result<SyntheticVideo, String> {
        let rows = self.features.len();
        let cols = self.features.first().map_or(0, Vec::len);
        if rows == 0 || cols == 0 {
            return Err(format!("video `{}` has no features", self.id));
        }
        if self.features.iter().any(|r| r.len() != cols) {
            return Err(format!("video `{}` has ragged feature rows", self.id));
        }
        let regime = match self.regime.as_deref() {
            None | Some("mixed") => None,
            Some(s) => Some(Regime::parse(s).map_err(|e| e.to_string())?),
        };
        let features = Tensor::matrix(rows, cols, self.features.into_iter().flatten().collect())
            .map_err(|e| e.to_string())?;
        let events = self
            .events
            .into_iter()
            .map(|e| {
                let interval = TemporalInterval::new(e.center, e.duration).map_err(|err| {
                    format!(
                        "video `{}`: event ({}, {}): {err}",
                        self.id, e.center, e.duration
                    )
                })?;
                Ok(Event {
                    interval,
                    tokens: e.tokens,
                    archetype: None,
                    partner: None,
                })
            })
            .collect::<std::result::Result<Vec<_>, String>>()?;
        Ok(SyntheticVideo {
            id: self.id,
            regime,
            features,
            events,
        })
    }
}

impl PredictionRecord {
    pub fn new(id: &str, events: &[PredictedEvent]) -> Self {
        PredictionRecord {
            id: id.to_string(),
            events: events
                .iter()
                .map(|e| PredictionEvent {
                    center: e.interval.center,
                    duration: e.interval.duration,
                    confidence: e.confidence,
                    tokens: e.tokens.clone(),
                })
                .collect(),
        }
    }

    pub fn to_events(&self) -> std::result::Result<Vec<PredictedEvent>, String> {
        self.events
            .iter()
            .map(|e| {
                Ok(PredictedEvent {
                    interval: TemporalInterval::new(e.center, e.duration)
                        .map_err(|err| format!("video `{}`: {err}", self.id))?,
                    confidence: e.confidence,
                    tokens: e.tokens.clone(),
                })
            })
            .collect()
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| CliError::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CliError::Format {
            what,
            path: path.into(),
            msg: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, videos: &[SyntheticVideo]) -> Result<()> {
    write_jsonl(path, videos.iter().map(VideoRecord::from))
}

pub fn read_dataset(path: &Path) -> Result<Vec<SyntheticVideo>> {
    read_jsonl::<VideoRecord>(path, "dataset")?
        .into_iter()
        .map(|r| {
            r.into_video().map_err(|msg| CliError::Format {
                what: "dataset",
                path: path.into(),
                msg,
            })
        })
        .collect()
}

pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    write_jsonl(path, preds)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    read_jsonl(path, "predictions")
}

/// Token to id map.
pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let map: BTreeMap<&str, u32> = vocab
        .words()
        .iter()
        .enumerate()
        .map(|(i, w)| (w.as_str(), i as u32))
        .collect();
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, &map).map_err(|e| CliError::io(path, e.into()))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let bad = |msg: String| CliError::Format {
        what: "vocabulary",
        path: path.into(),
        msg,
    };
    let map: BTreeMap<String, u32> = serde_json::from_str(&text).map_err(|e| bad(e.to_string()))?;
    let mut words = vec![None; map.len()];
    for (w, id) in map {
        let slot = words
            .get_mut(id as usize)
            .ok_or_else(|| bad(format!("id {id} out of range")))?;
        if slot.replace(w).is_some() {
            return Err(bad(format!("id {id} used twice")));
        }
    }
    let words = words
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad("ids are not contiguous".into()))?;
    Ok(Vocabulary::from_words(words)?)
}
