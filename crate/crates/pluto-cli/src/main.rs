//! `pluto` — command-line harness for the desk-scale adaptation experiments.
//!
//! Subcommands: synth, pretrain, adapt, serve, fetch, verify.
//! Exit codes: 0 ok, 1 check failure, 2 usage error, 3 runtime error.

use pluto_cli::config::ExperimentConfig;
use pluto_cli::experiment::{
    self, forgetting_comparison, parse_sweep, run_baseline, run_pluto,
    single_source_accuracies, target_stream,
};
use pluto_cli::verify;
use pluto_core::engine::EngineConfig;
use pluto_core::pet::{
    adapter_param_count, selector_param_count, vpt_param_count, ModuleKind, ModuleRecord,
    PetHyper, Store,
};
use pluto_core::selector::SelectorParams;
use pluto_core::synth::{dataset_from_container, dataset_to_container, make_domain, Dataset};
use pluto_core::vit::{pretrain_source_module, VitParams};
use pluto_store_service as service;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const USAGE: &str = "\
pluto — plug-and-play modular test-time adaptation at desk scale

USAGE:
  pluto synth    [--config FILE] [--seed N] --store DIR
  pluto pretrain [--config FILE] [--seed N] --store DIR
  pluto adapt    [--config FILE] [--seed N] [--shots U] [--top-m M]
                 [--sweep-m A..B] [--rho R] [--entropy-factor F]
                 --store DIR --out DIR
  pluto serve    --store DIR [--addr HOST:PORT]
  pluto fetch    [--addr HOST:PORT] --store DIR (--list | ID...)
  pluto verify   [--seed N]

The store address falls back to the PLUTO_STORE_ADDR environment variable,
then to 127.0.0.1:7070. Exit codes: 0 ok, 1 check failure, 2 usage error,
3 runtime error.";

enum CliError {
    Usage(String),
    CheckFailure(String),
    Runtime(String),
}

impl From<pluto_core::PlutoError> for CliError {
    fn from(e: pluto_core::PlutoError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<service::ServiceError> for CliError {
    fn from(e: service::ServiceError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::CheckFailure(msg)) => {
            eprintln!("check failure: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("usage error: {msg}\n\n{USAGE}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}

// ── flag parsing ─────────────────────────────────────────────────────

#[derive(Default)]
struct Flags {
    config: Option<String>,
    seed: Option<u64>,
    shots: Option<usize>,
    top_m: Option<usize>,
    sweep_m: Option<String>,
    rho: Option<f64>,
    entropy_factor: Option<f64>,
    store: Option<String>,
    addr: Option<String>,
    out: Option<String>,
    list: bool,
    positional: Vec<String>,
}

fn parse_flags(args: &[String]) -> CliResult<Flags> {
    let mut flags = Flags::default();
    let mut it = args.iter().peekable();
    while let Some(arg) = it.next() {
        let mut take = |name: &str| -> CliResult<String> {
            it.next()
                .cloned()
                .ok_or_else(|| CliError::Usage(format!("{name} expects a value")))
        };
        match arg.as_str() {
            "--config" => flags.config = Some(take("--config")?),
            "--seed" => {
                flags.seed = Some(parse_num(&take("--seed")?, "--seed")?);
            }
            "--shots" => flags.shots = Some(parse_num(&take("--shots")?, "--shots")?),
            "--top-m" => flags.top_m = Some(parse_num(&take("--top-m")?, "--top-m")?),
            "--sweep-m" => flags.sweep_m = Some(take("--sweep-m")?),
            "--rho" => flags.rho = Some(parse_num(&take("--rho")?, "--rho")?),
            "--entropy-factor" => {
                flags.entropy_factor = Some(parse_num(&take("--entropy-factor")?, "--entropy-factor")?)
            }
            "--store" => flags.store = Some(take("--store")?),
            "--addr" => flags.addr = Some(take("--addr")?),
            "--out" => flags.out = Some(take("--out")?),
            "--list" => flags.list = true,
            "--help" | "-h" => {
                println!("{USAGE}");
                std::process::exit(0);
            }
            other if other.starts_with("--") => {
                return Err(CliError::Usage(format!("unknown flag {other}")))
            }
            other => flags.positional.push(other.to_string()),
        }
    }
    Ok(flags)
}

fn parse_num<T: std::str::FromStr>(raw: &str, flag: &str) -> CliResult<T> {
    raw.parse()
        .map_err(|_| CliError::Usage(format!("{flag}: cannot parse {raw:?}")))
}

fn load_config(flags: &Flags) -> CliResult<ExperimentConfig> {
    let mut cfg = match &flags.config {
        Some(path) => {
            let raw = std::fs::read_to_string(path)
                .map_err(|e| CliError::Runtime(format!("reading {path}: {e}")))?;
            ExperimentConfig::from_json(&raw).map_err(CliError::Usage)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = flags.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(shots) = flags.shots {
        cfg.engine.shots = shots;
    }
    if let Some(m) = flags.top_m {
        cfg.engine.top_m = m;
    }
    if let Some(rho) = flags.rho {
        cfg.engine.sam.rho = rho;
    }
    if let Some(factor) = flags.entropy_factor {
        cfg.engine.sam.entropy_threshold_factor = factor;
    }
    cfg.validate().map_err(CliError::Usage)?;
    Ok(cfg)
}

fn require_store(flags: &Flags) -> CliResult<PathBuf> {
    flags
        .store
        .as_ref()
        .map(PathBuf::from)
        .ok_or_else(|| CliError::Usage("--store is required".to_string()))
}

fn resolve_addr(flags: &Flags) -> String {
    flags
        .addr
        .clone()
        .or_else(|| std::env::var("PLUTO_STORE_ADDR").ok())
        .unwrap_or_else(|| "127.0.0.1:7070".to_string())
}

fn dispatch(args: &[String]) -> CliResult<()> {
    let Some(command) = args.first() else {
        return Err(CliError::Usage("missing subcommand".to_string()));
    };
    let flags = parse_flags(&args[1..])?;
    match command.as_str() {
        "synth" => cmd_synth(&flags),
        "pretrain" => cmd_pretrain(&flags),
        "adapt" => cmd_adapt(&flags),
        "serve" => cmd_serve(&flags),
        "fetch" => cmd_fetch(&flags),
        "verify" => cmd_verify(&flags),
        other => Err(CliError::Usage(format!("unknown subcommand {other}"))),
    }
}

// ── subcommands ──────────────────────────────────────────────────────

fn cmd_synth(flags: &Flags) -> CliResult<()> {
    let cfg = load_config(flags)?;
    let store = Store::open(require_store(flags)?)?;
    let seed = cfg.seeds[0];
    let base = pluto_core::synth::make_base_dataset(cfg.training.base_dataset_size, seed)?;
    store.put(&dataset_to_container("dataset:base", "base", &base)?)?;
    println!("dataset:base ({} samples)", base.len());

    let mut domains: Vec<(String, pluto_core::synth::DomainSpec)> = cfg
        .sources
        .iter()
        .map(|s| (format!("dataset:source:{}", s.label()), *s))
        .collect();
    match &cfg.target {
        pluto_cli::config::TargetSpec::Domain { spec } => {
            domains.push((format!("dataset:target:{}", spec.label()), *spec));
        }
        pluto_cli::config::TargetSpec::Mixture { domains: specs, .. } => {
            for spec in specs {
                domains.push((format!("dataset:target:{}", spec.label()), *spec));
            }
        }
    }
    for (id, spec) in &domains {
        let domain = make_domain(&base, spec)?;
        store.put(&dataset_to_container(id, &spec.label(), &domain)?)?;
        println!("{id} ({} samples)", domain.len());
    }
    println!("wrote {} dataset files", domains.len() + 1);
    Ok(())
}

fn load_store_dataset(store: &Store, id: &str) -> CliResult<Dataset> {
    Ok(dataset_from_container(&store.get(id)?)?)
}

fn cmd_pretrain(flags: &Flags) -> CliResult<()> {
    let cfg = load_config(flags)?;
    let store = Store::open(require_store(flags)?)?;
    let seed = cfg.seeds[0];

    let base = load_store_dataset(&store, "dataset:base")?;
    let n_train = (base.len() as f64 * cfg.training.train_fraction).round() as usize;
    let (base_train, _) = base.split(n_train);
    let backbone =
        pluto_core::vit::pretrain_backbone(&base_train, &cfg.vit, &cfg.training.backbone, seed)?;
    store.put(&backbone.to_container("backbone"))?;
    println!("backbone trained and stored");

    let (hyper, opt) = match cfg.module_kind {
        ModuleKind::Vpt => (
            PetHyper::Vpt {
                prompts: cfg.vpt_prompts,
            },
            &cfg.training.vpt,
        ),
        ModuleKind::Adapter => (
            PetHyper::Adapter {
                bottleneck: cfg.adapter_bottleneck,
            },
            &cfg.training.adapter,
        ),
    };

    let mut modules = Vec::new();
    let mut source_train = Vec::new();
    for (i, spec) in cfg.sources.iter().enumerate() {
        let full = load_store_dataset(&store, &format!("dataset:source:{}", spec.label()))?;
        let (train, _) = full.split(n_train);
        let record = pretrain_source_module(
            &backbone,
            hyper,
            &format!("module:{}", spec.label()),
            &spec.label(),
            &train,
            opt,
            seed + i as u64,
        )?;
        store.put_module(&record)?;
        println!(
            "module:{} stored (source-train accuracy {:.3})",
            spec.label(),
            record.meta.source_train_accuracy
        );
        modules.push(record);
        source_train.push(train);
    }

    let mut rng = pluto_core::rng::Rng::new(seed ^ 0x5E1);
    let sel0 = SelectorParams::init(&cfg.selector, &mut rng)?;
    let samples = experiment::selector_training_set(&backbone, &modules, &source_train)?;
    let selector = pluto_core::selector::init_supervised(
        &sel0,
        &samples,
        cfg.training.selector_lr,
        cfg.training.selector_epochs,
        cfg.training.selector_batch,
        seed,
    )?;
    let selector = pluto_core::selector::init_supervised(
        &selector,
        &samples,
        cfg.training.selector_fine_lr,
        cfg.training.selector_fine_epochs,
        cfg.training.selector_batch,
        seed ^ 1,
    )?;
    store.put(&selector.to_container("selector"))?;
    println!("selector trained and stored");

    print_param_table(&cfg, &modules, &selector)?;
    Ok(())
}

fn print_param_table(
    cfg: &ExperimentConfig,
    modules: &[ModuleRecord],
    selector: &SelectorParams,
) -> CliResult<()> {
    println!("\nparameter counts");
    println!("{:<34} {:>10} {:>10} {:>8}", "artifact", "formula", "stored", "bias");
    for m in modules {
        let formula = match m.hyper {
            PetHyper::Vpt { prompts } => vpt_param_count(prompts, cfg.vit.embed_dim)?,
            PetHyper::Adapter { bottleneck } => {
                adapter_param_count(cfg.vit.depth, cfg.vit.embed_dim, bottleneck)?
            }
        };
        println!(
            "{:<34} {:>10} {:>10} {:>8}",
            m.id,
            formula,
            m.projection_param_count(),
            m.bias_param_count()
        );
    }
    let sel_formula = selector_param_count(
        cfg.selector.embed_dim,
        cfg.selector.input_proj_dim,
        cfg.selector.logit_proj_dim,
        cfg.selector.attn_dim,
        cfg.selector.logit_dim,
    )?;
    println!(
        "{:<34} {:>10} {:>10} {:>8}",
        "selector",
        sel_formula,
        selector.param_count(),
        0
    );
    Ok(())
}

#[derive(serde::Serialize)]
struct SeedSummary {
    seed: u64,
    shots: usize,
    top_m: usize,
    pluto_accuracy: f64,
    baseline_accuracy: f64,
    difference: f64,
    single_source_accuracy: Vec<f64>,
    pluto_pre_digest: String,
    pluto_post_digest: String,
    baseline_pre_digest: String,
    baseline_post_digest: String,
    sweep: Vec<SweepRow>,
    forgetting: experiment::ForgettingReport,
}

#[derive(serde::Serialize)]
struct SweepRow {
    top_m: usize,
    accuracy: f64,
}

fn cmd_adapt(flags: &Flags) -> CliResult<()> {
    let cfg = load_config(flags)?;
    let store = Store::open(require_store(flags)?)?;
    let out_dir = PathBuf::from(
        flags
            .out
            .clone()
            .or_else(|| cfg.output.clone())
            .ok_or_else(|| CliError::Usage("--out is required".to_string()))?,
    );
    std::fs::create_dir_all(&out_dir)?;
    let seed = cfg.seeds[0];

    // artifacts come from the store; datasets are re-derived from it
    let backbone = VitParams::from_container(&store.get("backbone")?)?;
    let modules: Vec<ModuleRecord> = cfg
        .sources
        .iter()
        .map(|s| store.get_module(&format!("module:{}", s.label())))
        .collect::<pluto_core::Result<_>>()?;
    let selector = SelectorParams::from_container(&store.get("selector")?)?;

    let base = load_store_dataset(&store, "dataset:base")?;
    let n_train = (base.len() as f64 * cfg.training.train_fraction).round() as usize;
    let (base_train, base_test) = base.split(n_train);
    let source_train: Vec<Dataset> = cfg
        .sources
        .iter()
        .map(|s| {
            load_store_dataset(&store, &format!("dataset:source:{}", s.label()))
                .map(|d| d.split(n_train).0)
        })
        .collect::<CliResult<_>>()?;
    let source_test: Vec<Dataset> = cfg
        .sources
        .iter()
        .map(|s| {
            load_store_dataset(&store, &format!("dataset:source:{}", s.label()))
                .map(|d| d.split(n_train).1)
        })
        .collect::<CliResult<_>>()?;

    let artifacts = experiment::Artifacts {
        backbone,
        modules,
        selector,
        base_train,
        base_test,
        source_train,
        source_test,
    };

    let (batches, labels, target_eval) = target_stream(&cfg, &artifacts.base_test, seed)?;
    let engine_cfg = cfg.engine;

    let pluto = run_pluto(&artifacts, engine_cfg, &batches, Some(&labels), false)?;
    let baseline = run_baseline(&artifacts, engine_cfg, &batches, Some(&labels), true, false)?;

    // append-only per-batch records for both pipelines
    let mut records = std::fs::File::create(out_dir.join("records.jsonl"))?;
    for (pipeline, run) in [("pluto", &pluto), ("baseline", &baseline)] {
        for batch in &run.metrics.batches {
            let mut value = serde_json::to_value(batch)?;
            let obj = value.as_object_mut().expect("record object");
            obj.insert("pipeline".to_string(), serde_json::json!(pipeline));
            obj.insert("seed".to_string(), serde_json::json!(seed));
            writeln!(records, "{}", serde_json::Value::Object(obj.clone()))?;
        }
    }

    let mut sweep = Vec::new();
    if let Some(raw) = &flags.sweep_m {
        let range = parse_sweep(raw)?;
        for m in range {
            if m > artifacts.modules.len() {
                return Err(CliError::Usage(format!(
                    "sweep m {m} exceeds {} sources",
                    artifacts.modules.len()
                )));
            }
            let run_cfg = EngineConfig {
                top_m: m,
                ..engine_cfg
            };
            let run = run_pluto(&artifacts, run_cfg, &batches, Some(&labels), false)?;
            sweep.push(SweepRow {
                top_m: m,
                accuracy: run.mean_accuracy.unwrap_or(f64::NAN),
            });
        }
    }

    let forgetting = forgetting_comparison(&artifacts, &cfg, seed)?;
    let singles = single_source_accuracies(&artifacts, &target_eval)?;

    let summary = SeedSummary {
        seed,
        shots: engine_cfg.shots,
        top_m: engine_cfg.top_m,
        pluto_accuracy: pluto.mean_accuracy.unwrap_or(f64::NAN),
        baseline_accuracy: baseline.mean_accuracy.unwrap_or(f64::NAN),
        difference: pluto.mean_accuracy.unwrap_or(f64::NAN)
            - baseline.mean_accuracy.unwrap_or(f64::NAN),
        single_source_accuracy: singles,
        pluto_pre_digest: pluto.pre_digest.clone(),
        pluto_post_digest: pluto.post_digest.clone(),
        baseline_pre_digest: baseline.pre_digest.clone(),
        baseline_post_digest: baseline.post_digest.clone(),
        sweep,
        forgetting,
    };
    std::fs::write(
        out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;

    // CSV mirror of the headline numbers
    let mut csv = String::from("seed,pipeline,top_m,shots,accuracy\n");
    csv.push_str(&format!(
        "{seed},pluto,{},{},{:.6}\n",
        summary.top_m, summary.shots, summary.pluto_accuracy
    ));
    csv.push_str(&format!(
        "{seed},baseline,{},{},{:.6}\n",
        summary.top_m, summary.shots, summary.baseline_accuracy
    ));
    for row in &summary.sweep {
        csv.push_str(&format!(
            "{seed},pluto_sweep,{},{},{:.6}\n",
            row.top_m, summary.shots, row.accuracy
        ));
    }
    std::fs::write(out_dir.join("summary.csv"), csv)?;

    println!(
        "pluto {:.4} baseline {:.4} difference {:+.4}",
        summary.pluto_accuracy, summary.baseline_accuracy, summary.difference
    );
    println!(
        "forgetting drop: pluto {:+.4} baseline {:+.4}",
        summary.forgetting.pluto_mean_drop, summary.forgetting.baseline_mean_drop
    );
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn cmd_serve(flags: &Flags) -> CliResult<()> {
    let store_dir = require_store(flags)?;
    let addr = resolve_addr(flags);
    let handle = service::serve(Path::new(&store_dir), &addr)?;
    println!("serving {} on {}", store_dir.display(), handle.addr());
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

fn cmd_fetch(flags: &Flags) -> CliResult<()> {
    let addr = resolve_addr(flags);
    if flags.list {
        let listing = service::client_list(&addr)?;
        println!("{}", serde_json::to_string_pretty(&listing)?);
        return Ok(());
    }
    if flags.positional.is_empty() {
        return Err(CliError::Usage(
            "fetch needs --list or at least one id".to_string(),
        ));
    }
    let store = Store::open(require_store(flags)?)?;
    for id in &flags.positional {
        let (_, bytes) = service::client_get(&addr, id)?;
        let entry = store.put_bytes(&bytes)?;
        println!("{id} -> {} ({} bytes, sha256 {})", entry.path, entry.byte_len, entry.sha256);
    }
    Ok(())
}

fn cmd_verify(flags: &Flags) -> CliResult<()> {
    let seed = flags.seed.unwrap_or(17);
    let results = verify::run_all(seed);
    let mut failures = 0;
    for r in &results {
        println!(
            "check {:<28} {}  {}",
            r.name,
            if r.passed { "ok" } else { "FAIL" },
            r.detail
        );
        if !r.passed {
            failures += 1;
        }
    }
    let counts: BTreeMap<&str, usize> = BTreeMap::from([
        ("passed", results.len() - failures),
        ("failed", failures),
    ]);
    println!(
        "verify: {} passed, {} failed",
        counts["passed"], counts["failed"]
    );
    if failures > 0 {
        return Err(CliError::CheckFailure(format!(
            "{failures} oracle checks failed"
        )));
    }
    Ok(())
}
