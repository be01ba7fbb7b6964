//! Training state and its on-disk layout.
//!
//! A state directory holds:
//!
//! - `generator.bff`: generator checkpoint
//! - `optimizer.bin`: magic `b"BFADAM\0\0"`, `u64` count `N`, then `N` first
//!   and `N` second Adam moments as little-endian `f64`
//! - `state.json`: step counter and tracked center
//! - `history.csv`: one row per completed step
//! - `summary.json`: box, blend mode, caption and tracked center

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::blending::{BlendMode, CenterTracker};
use crate::fields::{checkpoint, MlpField};
use crate::geometry::RoiBox;
use crate::guidance::LossBreakdown;
use crate::math::Vec3;

const OPTIMIZER_MAGIC: &[u8; 8] = b"BFADAM\0\0";
pub const GENERATOR_FILE: &str = "generator.bff";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "state.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: LossBreakdown,
    pub learning_rate: f64,
    pub grad_norm: f64,
}

/// Everything needed to continue an optimization bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Number of completed steps.
    pub step: u64,
    pub generator: MlpField,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub tracker: CenterTracker,
    pub history: Vec<StepRecord>,
}

/// Description of a finished or in-progress edit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditSummary {
    pub roi: RoiBox,
    pub blend: BlendMode,
    pub caption: String,
    pub ema_center: Vec3,
    pub steps: u64,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    step: u64,
    tracker: CenterTracker,
}

const HISTORY_HEADER: &str = "step,total,similarity,transmittance,depth,lambda_t,lambda_d,mean_transmittance,disparity_variance,learning_rate,grad_norm";

pub fn write_history_csv(history: &[StepRecord]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in history {
        let l = &r.loss;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.step,
            l.total,
            l.similarity,
            l.transmittance,
            l.depth,
            l.lambda_t,
            l.lambda_d,
            l.mean_transmittance,
            l.disparity_variance,
            r.learning_rate,
            r.grad_norm
        );
    }
    s
}

pub fn read_history_csv(text: &str) -> Result<Vec<StepRecord>, TrainError> {
    let bad = |m: String| TrainError::State(format!("{HISTORY_FILE}: {m}"));
    let mut lines = text.lines();
    if lines.next() != Some(HISTORY_HEADER) {
        return Err(bad("unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 11 {
                return Err(bad(format!("expected 11 columns in {line:?}")));
            }
            let step = fields[0].parse().map_err(|e| bad(format!("{e}")))?;
            let mut v = [0.0; 10];
            for (slot, f) in v.iter_mut().zip(&fields[1..]) {
                *slot = f.parse().map_err(|e| bad(format!("{e} in {f:?}")))?;
            }
            Ok(StepRecord {
                step,
                loss: LossBreakdown {
                    total: v[0],
                    similarity: v[1],
                    transmittance: v[2],
                    depth: v[3],
                    lambda_t: v[4],
                    lambda_d: v[5],
                    mean_transmittance: v[6],
                    disparity_variance: v[7],
                },
                learning_rate: v[8],
                grad_norm: v[9],
            })
        })
        .collect()
}

fn encode_moments(m: &[f64], v: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 16 * m.len());
    out.extend_from_slice(OPTIMIZER_MAGIC);
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    for x in m.iter().chain(v) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

fn decode_moments(bytes: &[u8]) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let bad = |m: &str| TrainError::State(format!("{OPTIMIZER_FILE}: {m}"));
    if bytes.len() < 16 || &bytes[..8] != OPTIMIZER_MAGIC {
        return Err(bad("bad magic"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = &bytes[16..];
    if n.checked_mul(16) != Some(body.len()) {
        return Err(bad("length does not match the moment count"));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let (m, v) = vals.split_at(n);
    Ok((m.to_vec(), v.to_vec()))
}

fn json_err(e: serde_json::Error) -> TrainError {
    TrainError::State(e.to_string())
}

impl TrainState {
    pub fn new(generator: MlpField, tracker: CenterTracker) -> Self {
        let n = generator.param_count();
        Self {
            step: 0,
            generator,
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            tracker,
            history: Vec::new(),
        }
    }

    /// Writes the full state into `dir`, creating it if needed.
    pub fn save(&self, dir: &Path, summary: &EditSummary) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir)?;
        let mut meta = serde_json::Map::new();
        meta.insert("step".into(), self.step.into());
        checkpoint::save(dir.join(GENERATOR_FILE), &self.generator, meta)?;
        std::fs::write(dir.join(OPTIMIZER_FILE), encode_moments(&self.adam_m, &self.adam_v))?;
        let state = StateFile {
            step: self.step,
            tracker: self.tracker,
        };
        std::fs::write(dir.join(STATE_FILE), serde_json::to_vec_pretty(&state).map_err(json_err)?)?;
        std::fs::write(dir.join(HISTORY_FILE), write_history_csv(&self.history))?;
        std::fs::write(dir.join(SUMMARY_FILE), serde_json::to_vec_pretty(summary).map_err(json_err)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<(Self, EditSummary), TrainError> {
        let (generator, _) = checkpoint::load(dir.join(GENERATOR_FILE))?;
        let (adam_m, adam_v) = decode_moments(&std::fs::read(dir.join(OPTIMIZER_FILE))?)?;
        if adam_m.len() != generator.param_count() {
            return Err(TrainError::State(format!(
                "{} moments for {} parameters",
                adam_m.len(),
                generator.param_count()
            )));
        }
        let state: StateFile = serde_json::from_slice(&std::fs::read(dir.join(STATE_FILE))?).map_err(json_err)?;
        let history = read_history_csv(&std::fs::read_to_string(dir.join(HISTORY_FILE))?)?;
        if history.len() as u64 != state.step {
            return Err(TrainError::State(format!(
                "history has {} rows for step {}",
                history.len(),
                state.step
            )));
        }
        let summary: EditSummary = serde_json::from_slice(&std::fs::read(dir.join(SUMMARY_FILE))?).map_err(json_err)?;
        Ok((
            Self {
                step: state.step,
                generator,
                adam_m,
                adam_v,
                tracker: state.tracker,
                history,
            },
            summary,
        ))
    }

    /// Loads only the edit description and generator, for rendering.
    pub fn load_edit(dir: &Path) -> Result<(MlpField, EditSummary), TrainError> {
        let (generator, _) = checkpoint::load(dir.join(GENERATOR_FILE))?;
        let summary = serde_json::from_slice(&std::fs::read(dir.join(SUMMARY_FILE))?).map_err(json_err)?;
        Ok((generator, summary))
    }
}
