//! Manifest + payload storage.
//!
//! The manifest is JSON Lines: a header object followed by one object per
//! record. The payload holds raw little-endian `f32` values, each record's
//! matrices stored row-major in L, V, A order at the recorded byte offsets.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DatasetInfo, Label, Modality, MultimodalSample, Sequence, TaskMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestHeader {
    pub mode: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    pub dims: [usize; 3],
    pub max_lengths: [usize; 3],
    pub split: String,
    /// Payload file name, relative to the manifest's directory.
    pub payload: String,
}

impl ManifestHeader {
    pub fn info(&self) -> Result<DatasetInfo> {
        let mode = match (self.mode.as_str(), self.classes) {
            ("regression", None) => TaskMode::Regression,
            ("classification", Some(classes)) if classes >= 2 => TaskMode::Classification { classes },
            (m, c) => return Err(Error::Dataset(format!("invalid mode {m:?} with classes {c:?}"))),
        };
        if self.dims.contains(&0) || self.max_lengths.contains(&0) {
            return Err(Error::Dataset("dims and maximum lengths must be positive".into()));
        }
        Ok(DatasetInfo {
            mode,
            dims: self.dims,
            max_lengths: self.max_lengths,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub label: f64,
    pub lengths: [usize; 3],
    /// Byte offsets of the L, V, A matrices in the payload.
    pub offsets: [u64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub split: String,
    pub samples: Vec<MultimodalSample>,
}

fn payload_path(manifest: &Path, payload: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(payload)
}

/// Writes `manifest` and a sibling payload file named `<stem>.bin`.
pub fn save_dataset(manifest: &Path, dataset: &Dataset) -> Result<()> {
    let info = &dataset.info;
    let stem = manifest
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Dataset(format!("manifest path {} has no file name", manifest.display())))?;
    let payload_name = format!("{stem}.bin");
    if let Some(dir) = manifest.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let (mode, classes) = match info.mode {
        TaskMode::Regression => ("regression", None),
        TaskMode::Classification { classes } => ("classification", Some(classes)),
    };
    let header = ManifestHeader {
        mode: mode.into(),
        classes,
        dims: info.dims,
        max_lengths: info.max_lengths,
        split: dataset.split.clone(),
        payload: payload_name.clone(),
    };

    let mut lines = vec![serde_json::to_string(&header)?];
    let mut payload = Vec::new();
    for s in &dataset.samples {
        info.validate(s)?;
        let mut offsets = [0u64; 3];
        for m in Modality::ALL {
            offsets[m.index()] = payload.len() as u64;
            for v in s.seq(m).data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let record = ManifestRecord {
            id: s.id.clone(),
            label: s.label.as_f64(),
            lengths: s.lengths(),
            offsets,
        };
        lines.push(serde_json::to_string(&record)?);
    }

    let payload_file = payload_path(manifest, &payload_name);
    fs::write(&payload_file, &payload).map_err(|e| Error::io(&payload_file, e))?;
    let mut f = fs::File::create(manifest).map_err(|e| Error::io(manifest, e))?;
    for line in lines {
        writeln!(f, "{line}").map_err(|e| Error::io(manifest, e))?;
    }
    Ok(())
}

fn record_error(id: &str, reason: impl Into<String>) -> Error {
    Error::Record {
        record: id.to_string(),
        reason: reason.into(),
    }
}

fn parse_label(mode: TaskMode, r: &ManifestRecord) -> Result<Label> {
    let label = match mode {
        TaskMode::Regression => Label::Score(r.label),
        TaskMode::Classification { .. } => {
            if r.label.fract() != 0.0 || r.label < 0.0 {
                return Err(record_error(&r.id, format!("class label {} is not a class index", r.label)));
            }
            Label::Class(r.label as usize)
        }
    };
    mode.check_label(label).map_err(|reason| record_error(&r.id, reason))?;
    Ok(label)
}

/// Reads a manifest and its payload.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let f = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut lines = BufReader::new(f).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Dataset(format!("{} is empty", manifest.display())))?
        .map_err(|e| Error::io(manifest, e))?;
    let header: ManifestHeader = serde_json::from_str(&header_line)?;
    let info = header.info()?;

    let payload_file = payload_path(manifest, &header.payload);
    let payload = fs::read(&payload_file).map_err(|e| Error::io(&payload_file, e))?;

    let mut spans: Vec<(u64, u64, String)> = Vec::new();
    let mut samples = Vec::new();
    for line in lines {
        let line = line.map_err(|e| Error::io(manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: ManifestRecord = serde_json::from_str(&line)?;
        let label = parse_label(info.mode, &r)?;
        let mut seqs = Vec::with_capacity(3);
        for m in Modality::ALL {
            let i = m.index();
            let (len, dim) = (r.lengths[i], info.dims[i]);
            if len == 0 || len > info.max_lengths[i] {
                return Err(record_error(
                    &r.id,
                    format!("{} length {len} outside 1..={}", m.name(), info.max_lengths[i]),
                ));
            }
            let start = r.offsets[i];
            if !start.is_multiple_of(4) {
                return Err(record_error(&r.id, format!("{} offset {start} is not 4-byte aligned", m.name())));
            }
            let end = start + (len * dim * 4) as u64;
            if end > payload.len() as u64 {
                return Err(record_error(
                    &r.id,
                    format!(
                        "payload truncated: {} matrix {len}x{dim} needs bytes {start}..{end}, file has {}",
                        m.name(),
                        payload.len()
                    ),
                ));
            }
            spans.push((start, end, r.id.clone()));
            let data = payload[start as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            seqs.push(Sequence::new(len, dim, data)?);
        }
        let seqs: [Sequence; 3] = seqs.try_into().expect("three modalities");
        samples.push(MultimodalSample { id: r.id, seqs, label });
    }

    spans.sort();
    for w in spans.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(record_error(
                &w[1].2,
                format!("payload bytes {}..{} overlap record {}", w[1].0, w[1].1, w[0].2),
            ));
        }
    }

    Ok(Dataset {
        info,
        split: header.split,
        samples,
    })
}
