//! Catalog, behavior-log and profile records plus their JSONL encodings.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::ModalityFeatures;
use crate::interest::StaticProfile;

/// One catalog video.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub video_id: u64,
    pub features: ModalityFeatures,
    /// Ground-truth topic mixture; only the simulator fills this in and the
    /// model never reads it.
    pub topics: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CatalogLine {
    video_id: u64,
    visual: Option<Vec<f64>>,
    text: Option<Vec<f64>>,
    audio: Option<Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventKind {
    Impression,
    Click,
    Like,
    Comment,
}

/// Context recorded with every event. Ingested and kept, never modeled.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventContext {
    pub hour_bucket: u8,
    pub device: String,
    pub network: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEvent {
    pub user_id: u64,
    pub video_id: u64,
    pub ts: i64,
    pub event: EventKind,
    pub watch_time_s: f64,
    pub context: EventContext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProfileLine {
    user_id: u64,
    #[serde(flatten)]
    profile: StaticProfile,
}

/// Everything the model is allowed to see.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub catalog: Vec<VideoRecord>,
    /// Sorted by (user_id, ts).
    pub logs: Vec<LogEvent>,
    pub profiles: BTreeMap<u64, StaticProfile>,
}

impl Dataset {
    pub fn new(
        catalog: Vec<VideoRecord>,
        mut logs: Vec<LogEvent>,
        profiles: BTreeMap<u64, StaticProfile>,
    ) -> Self {
        logs.sort_by_key(|e| (e.user_id, e.ts));
        Self {
            catalog,
            logs,
            profiles,
        }
    }

    /// Raw feature widths, taken from the first video.
    pub fn dims(&self) -> Option<[usize; 3]> {
        self.catalog.first().map(|v| v.features.dims())
    }

    pub fn video_index(&self) -> HashMap<u64, usize> {
        self.catalog
            .iter()
            .enumerate()
            .map(|(i, v)| (v.video_id, i))
            .collect()
    }

    /// Users with a profile or any event, ascending.
    pub fn user_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.profiles.keys().copied().collect();
        ids.extend(self.logs.iter().map(|e| e.user_id));
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Events of each user, in time order.
    pub fn events_by_user(&self) -> BTreeMap<u64, &[LogEvent]> {
        let mut out = BTreeMap::new();
        let mut start = 0;
        while start < self.logs.len() {
            let uid = self.logs[start].user_id;
            let mut end = start;
            while end < self.logs.len() && self.logs[end].user_id == uid {
                end += 1;
            }
            out.insert(uid, &self.logs[start..end]);
            start = end;
        }
        out
    }

    pub fn load(catalog: &Path, logs: &Path, profiles: &Path) -> Result<Self> {
        Ok(Self::new(
            read_catalog(catalog)?,
            read_logs(logs)?,
            read_profiles(profiles)?,
        ))
    }
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_catalog(path: &Path) -> Result<Vec<VideoRecord>> {
    let lines: Vec<CatalogLine> = read_jsonl(path)?;
    // widths come from the first line carrying each modality
    let mut dims = [0usize; 3];
    for l in &lines {
        for (d, v) in dims.iter_mut().zip([&l.visual, &l.text, &l.audio]) {
            if *d == 0 {
                *d = v.as_ref().map_or(0, Vec::len);
            }
        }
    }
    let dims = dims.map(|d| d.max(1));
    lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            let features = ModalityFeatures::new(l.visual, l.text, l.audio, dims).map_err(|e| {
                Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                }
            })?;
            Ok(VideoRecord {
                video_id: l.video_id,
                features,
                topics: None,
            })
        })
        .collect()
}

pub fn write_catalog(path: &Path, catalog: &[VideoRecord]) -> Result<()> {
    use crate::fusion::Modality;
    write_jsonl(
        path,
        catalog.iter().map(|v| CatalogLine {
            video_id: v.video_id,
            visual: v.features.get(Modality::Visual).map(|x| x.to_vec()),
            text: v.features.get(Modality::Text).map(|x| x.to_vec()),
            audio: v.features.get(Modality::Audio).map(|x| x.to_vec()),
        }),
    )
}

pub fn read_logs(path: &Path) -> Result<Vec<LogEvent>> {
    read_jsonl(path)
}

pub fn write_logs(path: &Path, logs: &[LogEvent]) -> Result<()> {
    write_jsonl(path, logs)
}

pub fn read_profiles(path: &Path) -> Result<BTreeMap<u64, StaticProfile>> {
    let lines: Vec<ProfileLine> = read_jsonl(path)?;
    Ok(lines.into_iter().map(|l| (l.user_id, l.profile)).collect())
}

pub fn write_profiles(path: &Path, profiles: &BTreeMap<u64, StaticProfile>) -> Result<()> {
    write_jsonl(
        path,
        profiles.iter().map(|(&user_id, p)| ProfileLine {
            user_id,
            profile: p.clone(),
        }),
    )
}
