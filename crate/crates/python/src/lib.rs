//! Python bindings: configuration in, metrics out, plus the standalone
//! metric and privacy helpers. Build the cdylib and import it as
//! `fedgcdr_py` (see python/smoke_test.py).

use std::collections::HashMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use fedgcdr_core::config::RunConfig;
use fedgcdr_core::dataset::synth_generate;
use fedgcdr_core::federation::{run_pipeline, MultiDomainData};
use fedgcdr_core::privacy::{
    leakage_sweep as core_sweep, AttackConfig, AttackInit, ScenarioKind,
};
use fedgcdr_core::{costledger, evalkit, transfer};

fn to_py_err(err: fedgcdr_core::Error) -> PyErr {
    PyValueError::new_err(err.to_string())
}

/// Noise multiplier of the Gaussian mechanism:
/// `sqrt(2 ln(1.25/delta)) / epsilon`.
#[pyfunction]
fn gaussian_sigma(epsilon: f64, delta: f64) -> f64 {
    transfer::gaussian_sigma(epsilon, delta)
}

#[pyfunction]
fn hr_at_k(ranks: Vec<usize>, k: usize) -> f64 {
    evalkit::hr_at_k(&ranks, k)
}

#[pyfunction]
fn ndcg_at_k(ranks: Vec<usize>, k: usize) -> f64 {
    evalkit::ndcg_at_k(&ranks, k)
}

/// 1-indexed rank of `positive` among (item, score) candidates.
#[pyfunction]
fn rank_candidates(items: Vec<usize>, scores: Vec<f64>, positive: usize) -> PyResult<usize> {
    if items.len() != scores.len() {
        return Err(PyValueError::new_err("items and scores must align"));
    }
    let scored: Vec<(usize, f64)> = items.into_iter().zip(scores).collect();
    evalkit::rank_candidates(&scored, positive).map_err(to_py_err)
}

/// Result of one pipeline run.
#[pyclass]
struct RunResult {
    #[pyo3(get)]
    hr: HashMap<u32, f64>,
    #[pyo3(get)]
    ndcg: HashMap<u32, f64>,
    #[pyo3(get)]
    n_users: usize,
    #[pyo3(get)]
    seed: u64,
    #[pyo3(get)]
    ledger_totals: HashMap<String, u64>,
    #[pyo3(get)]
    metrics_json: String,
}

#[pymethods]
impl RunResult {
    fn __repr__(&self) -> String {
        format!(
            "RunResult(seed={}, n_users={}, hr={:?})",
            self.seed, self.n_users, self.hr
        )
    }
}

/// Run the full pipeline from a TOML configuration string. Data comes from
/// the `[data]` section when present, otherwise the `[synth]` generator.
#[pyfunction]
fn run_from_toml(config_toml: &str) -> PyResult<RunResult> {
    let cfg = RunConfig::from_toml_str(config_toml).map_err(to_py_err)?;
    cfg.validate().map_err(to_py_err)?;
    let data = if let Some(dir) = &cfg.data.splits_dir {
        let mut registry = fedgcdr_core::dataset::UserRegistry::new();
        let mut splits = Vec::new();
        for domain in 0u32.. {
            let path = dir.join(format!("domain_{domain}.csv"));
            if !path.exists() {
                break;
            }
            let mut vocab = fedgcdr_core::dataset::ItemVocab::default();
            splits.push(
                fedgcdr_core::dataset::read_split_csv(&path, &mut registry, &mut vocab, domain)
                    .map_err(to_py_err)?,
            );
        }
        MultiDomainData::from_splits(splits, registry)
    } else {
        MultiDomainData::from_synth(synth_generate(&cfg.synth).map_err(to_py_err)?)
    };
    let out = run_pipeline(&cfg.pipeline, &data).map_err(to_py_err)?;
    let mut ledger_totals = HashMap::new();
    for stage in [
        costledger::Stage::SourceTrain,
        costledger::Stage::Transfer,
        costledger::Stage::TargetTrain,
        costledger::Stage::Finetune,
    ] {
        ledger_totals.insert(stage.label().to_string(), out.ledger.stage_total(stage));
    }
    Ok(RunResult {
        hr: out.metrics.hr.iter().map(|(&k, &v)| (k, v)).collect(),
        ndcg: out.metrics.ndcg.iter().map(|(&k, &v)| (k, v)).collect(),
        n_users: out.metrics.n_users,
        seed: out.metrics.seed,
        ledger_totals,
        metrics_json: out.metrics.to_json(),
    })
}

/// Inversion-attack sweep; returns rows of
/// (epsilon, seed, lambda, mean_user_leak, recon_error).
#[pyfunction]
#[pyo3(signature = (epsilons, delta, scenario, seeds, iterations = 300))]
fn leakage_sweep(
    epsilons: Vec<f64>,
    delta: f64,
    scenario: &str,
    seeds: Vec<u64>,
    iterations: usize,
) -> PyResult<Vec<(f64, u64, f64, f64, f64)>> {
    let kind: ScenarioKind = scenario.parse().map_err(to_py_err)?;
    let attack = AttackConfig {
        iterations,
        restarts: 1,
        init: AttackInit::Oracle,
        ..Default::default()
    };
    let rows = core_sweep(&epsilons, delta, kind, &seeds, &attack).map_err(to_py_err)?;
    Ok(rows
        .into_iter()
        .map(|r| (r.epsilon, r.seed, r.lambda, r.mean_user_leak, r.recon_error))
        .collect())
}

#[pymodule]
fn fedgcdr_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gaussian_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(hr_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(rank_candidates, m)?)?;
    m.add_function(wrap_pyfunction!(run_from_toml, m)?)?;
    m.add_function(wrap_pyfunction!(leakage_sweep, m)?)?;
    m.add_class::<RunResult>()?;
    Ok(())
}
