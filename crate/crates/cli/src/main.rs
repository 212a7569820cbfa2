//! `fedgcdr`: prepare data, generate synthetic domains, train the federated
//! pipeline, evaluate checkpoints, run the privacy attack sweep, and check
//! the communication-cost forecasts against measured traffic.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use fedgcdr_core::config::RunConfig;
use fedgcdr_core::costledger::{predict_communication, predict_computation, CostModel, Stage};
use fedgcdr_core::dataset::{
    filter_user_core, leave_one_out_split, load_domain_ratings, read_split_csv, synth_generate,
    to_implicit, write_split_csv, ItemVocab, SplitPair, UserRegistry,
};
use fedgcdr_core::evalkit::evaluate;
use fedgcdr_core::federation::{run_pipeline, Checkpoint, Mode, MultiDomainData, PipelineOutput};
use fedgcdr_core::gatmodel::{predict, MapperMlp};
use fedgcdr_core::privacy::{leakage_sweep, write_sweep_csv, AttackConfig};
use fedgcdr_core::rng::SeedTree;
use fedgcdr_core::{Error, Result};

#[derive(Parser)]
#[command(name = "fedgcdr", version, about = "Federated cross-domain recommendation simulator")]
struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker-thread cap (0 = runtime default).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Pipeline mode: full, ablate-M, ablate-T, single-domain.
    #[arg(long, global = true)]
    mode: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load rating CSVs, convert to implicit feedback, split leave-one-out,
    /// and write split files plus the user registry.
    Prepare,
    /// Generate a synthetic multi-domain dataset.
    Synth,
    /// Run the three-stage pipeline and write metrics, ledger, manifest and
    /// checkpoints.
    Train,
    /// Score a checkpoint on the prepared test split.
    Evaluate {
        /// Checkpoint path (defaults to <out>/train/checkpoint_final.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also dump per-user ranks as CSV.
        #[arg(long)]
        ranks_csv: bool,
    },
    /// Run the inversion-attack sweep over the privacy-budget grid.
    Attack,
    /// Compare measured ledger totals against the closed-form forecast.
    CostReport,
}

fn main() -> ExitCode {
    let env = env_logger::Env::new().filter_or("FEDGCDR_LOG", "error");
    env_logger::Builder::from_env(env).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_toml_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if let Some(mode) = &cli.mode {
        cfg.mode = mode.parse::<Mode>()?;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;

    if cfg.threads > 0 {
        // best effort; the pool may already exist
        let _ = fedgcdr_core::set_thread_cap(cfg.threads);
    }

    match cli.command {
        Command::Prepare => cmd_prepare(&cfg),
        Command::Synth => cmd_synth(&cfg),
        Command::Train => cmd_train(&cfg),
        Command::Evaluate {
            checkpoint,
            ranks_csv,
        } => cmd_evaluate(&cfg, checkpoint, ranks_csv),
        Command::Attack => cmd_attack(&cfg),
        Command::CostReport => cmd_cost_report(&cfg),
    }
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_string(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    if cfg.data.domain_csvs.is_empty() {
        return Err(Error::Config(
            "prepare needs data.domain_csvs in the config file".into(),
        ));
    }
    let dir = cfg.out.join("prepared");
    ensure_dir(&dir)?;
    let mut registry = UserRegistry::new();
    for (domain, path) in cfg.data.domain_csvs.iter().enumerate() {
        let outcome = load_domain_ratings(path, cfg.data.strict)?;
        for (line, why) in &outcome.malformed {
            log::info!("{}: skipped line {line}: {why}", path.display());
        }
        let records = filter_user_core(outcome.records, cfg.data.min_user_interactions);
        let mut vocab = ItemVocab::default();
        let iset = to_implicit(&records, &mut registry, &mut vocab, domain as u32);
        let split = leave_one_out_split(&iset);
        let split_path = dir.join(format!("domain_{domain}.csv"));
        write_split_csv(&split_path, &split, &registry, &vocab)?;
        log::info!(
            "domain {domain}: {} train / {} test interactions",
            split.train.len(),
            split.test.len()
        );
    }
    let registry_json = serde_json::to_string(&registry)?;
    write_string(&dir.join("registry.json"), &registry_json)?;
    println!("prepared {} domains into {}", cfg.data.domain_csvs.len(), dir.display());
    Ok(())
}

fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let dir = cfg.out.join("synth");
    ensure_dir(&dir)?;
    let out = synth_generate(&cfg.synth)?;
    for iset in &out.domains {
        let path = dir.join(format!("domain_{}.csv", iset.domain_id));
        let mut text = String::from("user_id,item_id,rating,timestamp\n");
        for it in iset.iter() {
            let global = out
                .registry
                .global_of_local(iset.domain_id, it.user)
                .expect("member");
            text.push_str(&format!(
                "{},i{:05},5,{}\n",
                out.registry.global_id(global),
                it.item,
                it.timestamp
            ));
        }
        write_string(&path, &text)?;
    }
    let manifest = serde_json::to_string_pretty(&cfg.synth)?;
    write_string(&dir.join("synth_manifest.json"), &manifest)?;
    println!(
        "wrote {} synthetic domains into {}",
        cfg.synth.n_domains,
        dir.display()
    );
    Ok(())
}

/// Assemble the multi-domain dataset from, in order of preference: prepared
/// split files, raw rating CSVs, or the synthetic generator.
fn load_data(cfg: &RunConfig) -> Result<MultiDomainData> {
    if let Some(dir) = &cfg.data.splits_dir {
        let mut registry = UserRegistry::new();
        let mut splits: Vec<SplitPair> = Vec::new();
        for domain in 0u32.. {
            let path = dir.join(format!("domain_{domain}.csv"));
            if !path.exists() {
                break;
            }
            let mut vocab = ItemVocab::default();
            splits.push(read_split_csv(&path, &mut registry, &mut vocab, domain)?);
        }
        if splits.is_empty() {
            return Err(Error::Validation(format!(
                "no domain_<id>.csv files under {}",
                dir.display()
            )));
        }
        return Ok(MultiDomainData::from_splits(splits, registry));
    }
    if !cfg.data.domain_csvs.is_empty() {
        let mut registry = UserRegistry::new();
        let mut sets = Vec::new();
        for (domain, path) in cfg.data.domain_csvs.iter().enumerate() {
            let outcome = load_domain_ratings(path, cfg.data.strict)?;
            let records = filter_user_core(outcome.records, cfg.data.min_user_interactions);
            let mut vocab = ItemVocab::default();
            sets.push(to_implicit(&records, &mut registry, &mut vocab, domain as u32));
        }
        return Ok(MultiDomainData::from_interactions(sets, registry));
    }
    Ok(MultiDomainData::from_synth(synth_generate(&cfg.synth)?))
}

fn train_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out.join("train")
}

fn run_and_dump(cfg: &RunConfig) -> Result<(MultiDomainData, PipelineOutput)> {
    let data = load_data(cfg)?;
    let out = run_pipeline(&cfg.pipeline, &data)?;
    Ok((data, out))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = train_dir(cfg);
    ensure_dir(&dir)?;
    let (_, out) = run_and_dump(cfg)?;

    write_string(&dir.join("metrics.json"), &out.metrics.to_json())?;
    out.ledger.write_csv(&dir.join("ledger.csv"))?;
    write_string(
        &dir.join("manifest.json"),
        &serde_json::to_string_pretty(&out.manifest)?,
    )?;
    for server in &out.model.source_servers {
        let ck = Checkpoint {
            version: Checkpoint::VERSION,
            target_domain: server.domain_id,
            dim: server.dim(),
            n_layers: cfg.pipeline.n_layers,
            user_finals: Vec::new(),
            item_finals: server.items.clone(),
            attention: server.attention.clone(),
        };
        ck.write_json(&dir.join(format!("checkpoint_source_{}.json", server.domain_id)))?;
    }
    out.model
        .checkpoint(cfg.pipeline.target_domain, cfg.pipeline.n_layers)
        .write_json(&dir.join("checkpoint_final.json"))?;
    println!(
        "HR@5 {:.4}  NDCG@5 {:.4}  HR@10 {:.4}  NDCG@10 {:.4}  ({} users, mode {})",
        out.metrics.hr.get(&5).copied().unwrap_or(f64::NAN),
        out.metrics.ndcg.get(&5).copied().unwrap_or(f64::NAN),
        out.metrics.hr.get(&10).copied().unwrap_or(f64::NAN),
        out.metrics.ndcg.get(&10).copied().unwrap_or(f64::NAN),
        out.metrics.n_users,
        cfg.mode,
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, checkpoint: Option<PathBuf>, ranks_csv: bool) -> Result<()> {
    let ck_path = checkpoint.unwrap_or_else(|| train_dir(cfg).join("checkpoint_final.json"));
    let ck = Checkpoint::read_json(&ck_path)?;
    let data = load_data(cfg)?;
    let target = ck.target_domain;
    let dd = data
        .domains
        .get(&target)
        .ok_or_else(|| Error::Validation(format!("target domain {target} not in dataset")))?;
    if ck.user_finals.len() != dd.split.train.n_users {
        return Err(Error::Validation(format!(
            "checkpoint has {} user finals, dataset has {} users",
            ck.user_finals.len(),
            dd.split.train.n_users
        )));
    }
    let tree = SeedTree::new(cfg.seed);
    let negatives: Vec<Vec<usize>> = dd
        .split
        .test
        .iter()
        .map(|held| {
            let global = data
                .registry
                .global_of_local(target, held.user)
                .expect("member");
            let mut rng = tree.stream_with("eval-neg", &[target as u64, global as u64]);
            fedgcdr_core::dataset::sample_eval_negatives(
                &dd.split.train,
                held.user,
                &[held.item],
                cfg.pipeline.eval_negatives,
                &mut rng,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(
        |user, item| predict(&ck.user_finals[user], ck.item_finals.row(item)),
        &dd.split.test,
        &negatives,
        dd.split.train.n_users,
        &cfg.pipeline.ks,
        cfg.seed,
    );
    let dir = cfg.out.join("evaluate");
    ensure_dir(&dir)?;
    write_string(&dir.join("metrics.json"), &report.to_json())?;
    if ranks_csv {
        report.write_rank_csv(&dir.join("ranks.csv"))?;
    }
    println!("{}", report.to_json());
    Ok(())
}

fn cmd_attack(cfg: &RunConfig) -> Result<()> {
    let attack = AttackConfig {
        step_size: cfg.attack.step_size,
        iterations: cfg.attack.iterations,
        restarts: cfg.attack.restarts,
        init: cfg.attack.init,
        seed: 0,
    };
    let rows = leakage_sweep(
        &cfg.attack.epsilons,
        cfg.attack.delta,
        cfg.attack.scenario,
        &cfg.attack.seeds,
        &attack,
    )?;
    let dir = cfg.out.join("attack");
    ensure_dir(&dir)?;
    write_sweep_csv(&dir.join("leakage_sweep.csv"), &rows)?;
    for row in &rows {
        println!(
            "epsilon {:6.1}  seed {}  lambda {:.4}  recon_error {:.4}",
            row.epsilon, row.seed, row.lambda, row.recon_error
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct CostReport {
    predicted: serde_json::Value,
    measured: serde_json::Value,
    exact_match: bool,
    computation: serde_json::Value,
}

fn cmd_cost_report(cfg: &RunConfig) -> Result<()> {
    if !matches!(cfg.mode, Mode::Full | Mode::SingleDomain) {
        return Err(Error::Validation(format!(
            "cost-report covers modes full and single-domain; {} has no closed form",
            cfg.mode
        )));
    }
    if cfg.data.splits_dir.is_some() || !cfg.data.domain_csvs.is_empty() {
        return Err(Error::Validation(
            "cost-report runs on the synthetic generator; remove data sources".into(),
        ));
    }
    if cfg.synth.overlap < 1.0 {
        return Err(Error::Validation(
            "cost forecast assumes uniform domains: set synth.overlap = 1.0".into(),
        ));
    }
    let (data, out) = run_and_dump(cfg)?;
    let n_edges: u64 = data.domains[&cfg.pipeline.target_domain].graph.n_edges() as u64;
    let model = CostModel {
        n_users: cfg.synth.users_per_domain as u64,
        n_items: cfg.synth.items_per_domain as u64,
        dim: cfg.pipeline.dim as u64,
        n_layers: cfg.pipeline.n_layers as u64,
        mapper_layers: 3,
        n_domains: if cfg.mode == Mode::SingleDomain {
            1
        } else {
            cfg.synth.n_domains as u64
        },
        t_rounds: cfg.pipeline.t_rounds as u64,
        t_finetune: if cfg.mode.uses_finetune() {
            cfg.pipeline.t_finetune as u64
        } else {
            0
        },
        n_edges,
    };
    let forecast = predict_communication(&model, cfg.pipeline.dense_uploads)?;
    let measured = [
        out.ledger.stage_total(Stage::SourceTrain),
        out.ledger.stage_total(Stage::Transfer),
        out.ledger.stage_total(Stage::TargetTrain),
        out.ledger.stage_total(Stage::Finetune),
    ];
    let exact = forecast.source_train == measured[0]
        && forecast.transfer == measured[1]
        && forecast.target_train == measured[2]
        && forecast.finetune == measured[3];
    let compute = predict_computation(&model);
    let report = CostReport {
        predicted: serde_json::json!({
            "source_train": forecast.source_train,
            "transfer": forecast.transfer,
            "target_train": forecast.target_train,
            "finetune": forecast.finetune,
            "total": forecast.total,
        }),
        measured: serde_json::json!({
            "source_train": measured[0],
            "transfer": measured[1],
            "target_train": measured[2],
            "finetune": measured[3],
            "total": out.ledger.total(),
        }),
        exact_match: exact,
        computation: serde_json::json!({
            "dominant": compute.dominant.to_string(),
            "full": compute.full.to_string(),
            "measured_edge_madds": out.ledger.flops.edge_madds,
            "mapper_param_scalars": MapperMlp::param_count(cfg.pipeline.dim),
        }),
    };
    let dir = cfg.out.join("cost");
    ensure_dir(&dir)?;
    let json = serde_json::to_string_pretty(&report)?;
    write_string(&dir.join("cost_report.json"), &json)?;
    println!("{json}");
    Ok(())
}
