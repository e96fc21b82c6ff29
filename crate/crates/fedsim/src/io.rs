//! Metric persistence, model checkpoints, trigger artifacts, and run
//! manifests.
//!
//! Binary formats share one layout: a single JSON header line terminated by
//! `\n`, followed by raw little-endian f64 payloads whose lengths the header
//! pins down.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::ExperimentConfig;
use crate::error::{Result, SimError};
use crate::model::{MlpModel, ParamVector};
use crate::orchestrator::{RoundRecord, Summary};

/// Write per-round metrics as CSV: header then one row per round,
/// 6-decimal fixed-point reals, LF line endings.
pub fn write_metrics_csv<P: AsRef<Path>>(records: &[RoundRecord], path: P) -> Result<()> {
    let mut out = String::from("round,acc,bsr,c,mean_bap_loss\n");
    for r in records {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.round, r.acc, r.bsr, r.c, r.mean_bap_loss
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Parse a metrics CSV back into records (selected ids are not persisted).
pub fn read_metrics_csv<P: AsRef<Path>>(path: P) -> Result<Vec<RoundRecord>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("round,acc,bsr,c,mean_bap_loss") => {}
        other => {
            return Err(SimError::Artifact(format!(
                "unexpected metrics header: {:?}",
                other
            )))
        }
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(SimError::Artifact(format!(
                "metrics line {} has {} fields",
                lineno + 2,
                fields.len()
            )));
        }
        let parse_f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|e| SimError::Artifact(format!("metrics line {}: {}", lineno + 2, e)))
        };
        records.push(RoundRecord {
            round: fields[0]
                .parse()
                .map_err(|e| SimError::Artifact(format!("metrics line {}: {}", lineno + 2, e)))?,
            acc: parse_f(fields[1])?,
            bsr: parse_f(fields[2])?,
            c: parse_f(fields[3])?,
            mean_bap_loss: parse_f(fields[4])?,
            selected: Vec::new(),
        });
    }
    Ok(records)
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    layer_dims: Vec<usize>,
    param_count: usize,
    encoding: String,
}

fn f64s_to_le_bytes(values: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn le_bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(SimError::Artifact(format!(
            "payload length {} is not a multiple of 8",
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Save a model as a JSON header line plus the canonical flat parameter
/// payload in little-endian f64.
pub fn save_checkpoint<P: AsRef<Path>>(model: &MlpModel, path: P) -> Result<()> {
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        layer_dims: model.layer_dims().to_vec(),
        param_count: model.param_count(),
        encoding: "f64-le".into(),
    };
    let mut file = fs::File::create(path)?;
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    file.write_all(&f64s_to_le_bytes(model.flatten().as_slice()))?;
    Ok(())
}

/// Load and validate a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<MlpModel> {
    let bytes = fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| SimError::Artifact("checkpoint has no header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])?;
    if header.version != CHECKPOINT_VERSION {
        return Err(SimError::Artifact(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    if header.encoding != "f64-le" {
        return Err(SimError::Artifact(format!(
            "unsupported encoding `{}`",
            header.encoding
        )));
    }
    let payload = le_bytes_to_f64s(&bytes[newline + 1..])?;
    if payload.len() != header.param_count {
        return Err(SimError::Artifact(format!(
            "truncated payload: header promises {} parameters, file holds {}",
            header.param_count,
            payload.len()
        )));
    }
    MlpModel::from_params(&header.layer_dims, &ParamVector::from_vec(payload))
}

const TRIGGER_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TriggerHeader {
    version: u32,
    mask_shape: Vec<usize>,
    pattern_shape: Vec<usize>,
    round: u32,
    client_id: u32,
    encoding: String,
}

/// Save a perturbation trigger (mask then pattern payloads).
pub fn save_trigger<P: AsRef<Path>>(
    mask: &Tensor,
    pattern: &Tensor,
    round: u32,
    client_id: u32,
    path: P,
) -> Result<()> {
    let header = TriggerHeader {
        version: TRIGGER_VERSION,
        mask_shape: mask.shape().to_vec(),
        pattern_shape: pattern.shape().to_vec(),
        round,
        client_id,
        encoding: "f64-le".into(),
    };
    let mut file = fs::File::create(path)?;
    serde_json::to_writer(&mut file, &header)?;
    file.write_all(b"\n")?;
    file.write_all(&f64s_to_le_bytes(mask.data()))?;
    file.write_all(&f64s_to_le_bytes(pattern.data()))?;
    Ok(())
}

/// Load a trigger artifact, returning `(mask, pattern, round, client_id)`.
pub fn load_trigger<P: AsRef<Path>>(path: P) -> Result<(Tensor, Tensor, u32, u32)> {
    let bytes = fs::read(path)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| SimError::Artifact("trigger artifact has no header line".into()))?;
    let header: TriggerHeader = serde_json::from_slice(&bytes[..newline])?;
    if header.version != TRIGGER_VERSION {
        return Err(SimError::Artifact(format!(
            "unsupported trigger version {}",
            header.version
        )));
    }
    let values = le_bytes_to_f64s(&bytes[newline + 1..])?;
    let mask_len: usize = header.mask_shape.iter().product();
    let pattern_len: usize = header.pattern_shape.iter().product();
    if values.len() != mask_len + pattern_len {
        return Err(SimError::Artifact(format!(
            "truncated payload: header promises {} values, file holds {}",
            mask_len + pattern_len,
            values.len()
        )));
    }
    let mask = Tensor::new(header.mask_shape, values[..mask_len].to_vec())?;
    let pattern = Tensor::new(header.pattern_shape, values[mask_len..].to_vec())?;
    Ok((mask, pattern, header.round, header.client_id))
}

/// Record of a completed (or attempted) run, enough to reproduce it.
#[derive(Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub started_at: String,
    pub finished_at: String,
    pub config: ExperimentConfig,
    pub summary: Option<Summary>,
}

pub fn write_manifest<P: AsRef<Path>>(manifest: &RunManifest, path: P) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_from;

    #[test]
    fn metrics_csv_header_only_when_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&[], &path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "round,acc,bsr,c,mean_bap_loss\n");
    }

    #[test]
    fn metrics_csv_line_count_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let records: Vec<RoundRecord> = (1..=3)
            .map(|t| RoundRecord {
                round: t,
                acc: 0.91234567,
                bsr: 0.00149,
                c: 1.5 + t as f64,
                mean_bap_loss: 0.25,
                selected: vec![0, 1],
            })
            .collect();
        write_metrics_csv(&records, &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 4);

        let back = read_metrics_csv(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.round, b.round);
            assert!((a.acc - b.acc).abs() < 1e-6);
            assert!((a.bsr - b.bsr).abs() < 1e-6);
            assert!((a.c - b.c).abs() < 1e-6);
            assert!((a.mean_bap_loss - b.mean_bap_loss).abs() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = MlpModel::new(&[6, 5, 3], &mut rng_from(3)).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.flatten(), model.flatten());
        assert_eq!(back.layer_dims(), model.layer_dims());
    }

    #[test]
    fn checkpoint_truncation_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = MlpModel::new(&[4, 3, 2], &mut rng_from(5)).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, &bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{}", err);
    }

    #[test]
    fn checkpoint_version_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = MlpModel::new(&[4, 3, 2], &mut rng_from(7)).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let text = fs::read(&path).unwrap();
        let mut replaced = br#"{"version":9,"#.to_vec();
        let comma = text.iter().position(|&b| b == b',').unwrap();
        replaced.extend_from_slice(&text[comma + 1..]);
        fs::write(&path, &replaced).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{}", err);
    }

    #[test]
    fn trigger_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trigger.bin");
        let mut rng = rng_from(11);
        let mask = Tensor::rand_uniform(vec![4, 4], &mut rng);
        let pattern = Tensor::rand_uniform(vec![4, 4, 2], &mut rng);
        save_trigger(&mask, &pattern, 30, 7, &path).unwrap();
        let (m2, p2, round, client) = load_trigger(&path).unwrap();
        assert_eq!(m2, mask);
        assert_eq!(p2, pattern);
        assert_eq!((round, client), (30, 7));
    }
}
