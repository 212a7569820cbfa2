//! Message accounting. Every simulated client/server exchange is recorded as
//! a scalar count, and the closed-form communication/computation forecasts
//! are checked against the measured totals — exactly, not asymptotically,
//! for the dense-upload protocol.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::gatmodel::{FlopCounts, MapperMlp};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    SourceTrain,
    Transfer,
    TargetTrain,
    Finetune,
}

impl Stage {
    pub fn label(&self) -> &'static str {
        match self {
            Stage::SourceTrain => "1",
            Stage::Transfer => "2",
            Stage::TargetTrain => "3-train",
            Stage::Finetune => "3-finetune",
        }
    }

    fn index(&self) -> usize {
        match self {
            Stage::SourceTrain => 0,
            Stage::Transfer => 1,
            Stage::TargetTrain => 2,
            Stage::Finetune => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Down,
    Up,
}

impl Direction {
    pub fn label(&self) -> &'static str {
        match self {
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }
}

/// One metered exchange. Carries counts only; payloads never reach the
/// ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    pub stage: Stage,
    pub direction: Direction,
    pub sender: String,
    pub receiver: String,
    pub round: u64,
    pub scalar_count: u64,
}

/// Append-only ledger with running per-stage totals plus the propagation
/// multiply-add counters.
#[derive(Debug, Clone, Default)]
pub struct MessageLedger {
    records: Vec<MessageRecord>,
    stage_totals: [u64; 4],
    pub flops: FlopCounts,
}

impl MessageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, record: MessageRecord) {
        self.stage_totals[record.stage.index()] += record.scalar_count;
        self.records.push(record);
    }

    pub fn records(&self) -> &[MessageRecord] {
        &self.records
    }

    pub fn stage_total(&self, stage: Stage) -> u64 {
        self.stage_totals[stage.index()]
    }

    pub fn total(&self) -> u64 {
        self.stage_totals.iter().sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        writeln!(out, "stage,direction,sender,receiver,round,scalar_count")
            .map_err(|e| Error::io(path, e))?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.stage.label(),
                r.direction.label(),
                r.sender,
                r.receiver,
                r.round,
                r.scalar_count
            )
            .map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

/// The quantities the closed-form cost expressions run on. Uniform across
/// domains: every domain has `n_users` clients and `n_items` items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub n_users: u64,
    pub n_items: u64,
    pub dim: u64,
    pub n_layers: u64,
    pub mapper_layers: u64,
    pub n_domains: u64,
    pub t_rounds: u64,
    pub t_finetune: u64,
    pub n_edges: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommunicationForecast {
    pub source_train: u64,
    pub transfer: u64,
    pub target_train: u64,
    pub finetune: u64,
    pub total: u64,
}

/// Exact scalar totals of the dense-upload protocol.
///
/// Per client-round a training stage moves the item table (`I*F`) plus the
/// attention vector (`2F`) down and the same-shaped gradients up; the target
/// stage adds the mapper parameters in both directions. Fine-tuning moves
/// the item finals (`I*F`) plus one user final (`F`) each way per epoch.
pub fn predict_communication(cm: &CostModel, dense_uploads: bool) -> Result<CommunicationForecast> {
    if !dense_uploads {
        return Err(Error::Validation(
            "communication forecast only covers dense uploads; sparse mode has no closed form"
                .into(),
        ));
    }
    let per_dir_train = cm.n_items * cm.dim + 2 * cm.dim;
    let mapper_scalars = if cm.n_domains > 1 {
        (cm.n_domains - 1) * MapperMlp::param_count(cm.dim as usize) as u64
    } else {
        0
    };
    let source_train =
        cm.n_domains.saturating_sub(1) * cm.t_rounds * cm.n_users * 2 * per_dir_train;
    let target_train = cm.t_rounds * cm.n_users * 2 * (per_dir_train + mapper_scalars);
    let finetune = cm.t_finetune * cm.n_users * 2 * (cm.n_items * cm.dim + cm.dim);
    Ok(CommunicationForecast {
        source_train,
        transfer: 0,
        target_train,
        finetune,
        total: source_train + target_train + finetune,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputationForecast {
    /// `T^G * N^D * N^K * E * F + T^F * F^2`
    pub dominant: u128,
    /// `T^G * (N^D * N^K * E * F + N^m * F^2) + T^F * F^2`
    pub full: u128,
}

pub fn predict_computation(cm: &CostModel) -> ComputationForecast {
    let prop = cm.t_rounds as u128
        * cm.n_domains as u128
        * cm.n_layers as u128
        * cm.n_edges as u128
        * cm.dim as u128;
    let mapper = cm.t_rounds as u128 * cm.mapper_layers as u128 * (cm.dim as u128).pow(2);
    let ft = cm.t_finetune as u128 * (cm.dim as u128).pow(2);
    ComputationForecast {
        dominant: prop + ft,
        full: prop + mapper + ft,
    }
}
