use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use trialmoe::checkpoint;
use trialmoe::embedding::check_cache_file;
use trialmoe::ontology::load_ontology;
use trialmoe::pipeline::{
    self, ablation_grid, encode_requests, evaluate_checkpoint, prepare, read_jsonl, run_pipeline,
    run_variant, summarize, textualize_records, validation_jsonl, EvalRows, RunConfig,
    TextualizeConfig,
};
use trialmoe::schema::parse_record;
use trialmoe::smiles::canonical_smiles;
use trialmoe::smoe::GateMode;
use trialmoe::textualize::upsert_processed;
use trialmoe::training::{history_csv, stratified_split};
use trialmoe::validate::Validator;

/// Clinical-trial outcome prediction with a sparse mixture-of-experts.
#[derive(Parser)]
#[command(name = "trialmoe", version)]
struct Cli {
    /// Run configuration (JSON); relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate and repair raw records; exits 2 when any record is rejected.
    Validate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        ontology: Option<PathBuf>,
        #[arg(long)]
        synonyms: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        min_p3_enrollment: Option<u64>,
    },
    /// Generate the narrative pair for each record.
    Textualize {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        raw_log: Option<PathBuf>,
        /// offline, fixture or http
        #[arg(long)]
        client: Option<String>,
        #[arg(long)]
        endpoint: Option<String>,
        /// Recorded responses for the fixture client.
        #[arg(long)]
        responses: Option<PathBuf>,
    },
    Smiles {
        #[command(subcommand)]
        command: SmilesCommand,
    },
    /// Encode validated records into an embedding cache, or check one.
    Encode {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, required_unless_present = "requests")]
        cache: Option<PathBuf>,
        /// stub writes vectors into the cache; cache checks every key is present.
        #[arg(long)]
        encoder: Option<String>,
        /// Only check the cache file format.
        #[arg(long)]
        verify: bool,
        /// Write every (modality, text, key) lookup as JSONL for an external encoder.
        #[arg(long, conflicts_with = "verify")]
        requests: Option<PathBuf>,
    },
    /// Train one model and write its checkpoint and history.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        history: PathBuf,
        /// Also evaluate on the test split and write the report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Refit temperature and threshold on the validation split.
        #[arg(long)]
        calibrate: bool,
        /// test (held-out split) or all
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run every stage for the configured variant.
    Run,
    /// Run the ablation grid on shared splits.
    Ablate,
    Ontology {
        #[command(subcommand)]
        command: OntologyCommand,
    },
}

#[derive(Subcommand)]
enum SmilesCommand {
    /// Canonicalize one SMILES per line; failures become empty lines.
    Canon {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum OntologyCommand {
    /// Load an ontology directory and report its size.
    Check {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    /// Embedding cache; read with --encoder cache, filled with --encoder stub.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    encoder: Option<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    experts: Option<usize>,
    #[arg(long)]
    topk: Option<usize>,
    /// drug-disease or all
    #[arg(long)]
    gate: Option<String>,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_json("{}", Path::new("."), &|k| std::env::var(k).ok())?,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_data(cfg: &mut RunConfig, data: &DataArgs) {
    if let Some(p) = &data.input {
        cfg.input = p.clone();
    }
    if let Some(p) = &data.cache {
        cfg.encode.cache = Some(p.clone());
    }
    if let Some(e) = &data.encoder {
        cfg.encode.encoder = e.clone();
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, contents).with_context(|| path.display().to_string())
}

fn run(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Validate {
            input,
            ontology,
            synonyms,
            report,
            min_p3_enrollment,
        } => {
            let mut cfg = load_config(cli)?;
            if let Some(p) = input {
                cfg.input = p.clone();
            }
            if let Some(p) = ontology {
                cfg.ontology_dir = p.clone();
            }
            if let Some(p) = synonyms {
                cfg.synonyms = Some(p.clone());
            }
            if let Some(n) = min_p3_enrollment {
                cfg.validate.min_p3_enrollment = *n;
            }
            let (onto, syn) = pipeline::load_resources(&cfg)?;
            let validator = Validator {
                ontology: &onto,
                synonyms: &syn,
                config: cfg.validate,
            };
            let values = read_jsonl(&cfg.input).with_context(|| cfg.input.display().to_string())?;
            let reports: Vec<_> = values.iter().map(|v| validator.validate_value(v)).collect();
            write_file(report, &validation_jsonl(&reports))?;
            let s = summarize(&reports);
            println!(
                "{} records: {} accepted ({} repaired), {} rejected",
                s.total, s.accepted, s.repaired, s.rejected
            );
            for (code, n) in &s.reasons {
                println!("  {code}: {n}");
            }
            Ok(if s.rejected > 0 { 2 } else { 0 })
        }
        Command::Textualize {
            input,
            out,
            raw_log,
            client,
            endpoint,
            responses,
        } => {
            let cfg = load_config(cli)?;
            let input = input.clone().unwrap_or(cfg.input.clone());
            let tcfg = TextualizeConfig {
                client: client.clone().unwrap_or(cfg.textualize.client.clone()),
                endpoint: endpoint.clone().or(cfg.textualize.endpoint.clone()),
                responses: responses.clone().or(cfg.textualize.responses.clone()),
                processed: None,
                ..cfg.textualize.clone()
            };
            let mut records = Vec::new();
            for (i, v) in read_jsonl(&input)
                .with_context(|| input.display().to_string())?
                .iter()
                .enumerate()
            {
                match parse_record(v) {
                    Ok(r) => records.push(r),
                    Err(e) => log::warn!("line {}: skipped ({e})", i + 1),
                }
            }
            let rows = textualize_records(&mut records, &tcfg, raw_log.as_deref())?;
            upsert_processed(out, &rows)?;
            println!("{} of {} records textualized", rows.len(), records.len());
            Ok(0)
        }
        Command::Smiles {
            command: SmilesCommand::Canon { input, out },
        } => {
            let text = fs::read_to_string(input).with_context(|| input.display().to_string())?;
            let mut lines = String::new();
            let (mut ok, mut total) = (0usize, 0usize);
            for line in text.lines() {
                total += 1;
                match canonical_smiles(line.trim()) {
                    Ok(c) => {
                        ok += 1;
                        lines.push_str(&c);
                    }
                    Err(e) => log::warn!("line {total}: {e}"),
                }
                lines.push('\n');
            }
            write_file(out, &lines)?;
            let rate = if total == 0 {
                1.0
            } else {
                ok as f64 / total as f64
            };
            println!("parsed {ok}/{total} ({:.1}%)", 100.0 * rate);
            Ok(0)
        }
        Command::Encode {
            input,
            cache,
            encoder,
            verify,
            requests,
        } => {
            if let Some(path) = requests {
                let mut cfg = load_config(cli)?;
                if let Some(p) = input {
                    cfg.input = p.clone();
                }
                let reqs = encode_requests(&cfg)?;
                let mut lines = String::new();
                for r in &reqs {
                    lines.push_str(&serde_json::to_string(r)?);
                    lines.push('\n');
                }
                write_file(path, &lines)?;
                println!(
                    "{} encoder requests written to {}",
                    reqs.len(),
                    path.display()
                );
                return Ok(0);
            }
            let cache = cache.as_ref().expect("clap requires --cache");
            if *verify {
                let s = check_cache_file(cache, None)?;
                println!(
                    "{}: ok, dim {}, {} vectors",
                    cache.display(),
                    s.dim,
                    s.count
                );
                return Ok(0);
            }
            let mut cfg = load_config(cli)?;
            apply_data(
                &mut cfg,
                &DataArgs {
                    input: input.clone(),
                    cache: Some(cache.clone()),
                    encoder: encoder.clone(),
                },
            );
            let prepared = prepare(&cfg, None)?;
            if let Some(c) = &prepared.cache {
                c.flush()?;
            }
            println!(
                "{} records encoded into {}",
                prepared.records.len(),
                cache.display()
            );
            Ok(0)
        }
        Command::Train {
            data,
            model,
            out,
            history,
            report,
        } => {
            let mut cfg = load_config(cli)?;
            apply_data(&mut cfg, data);
            if let Some(n) = model.experts {
                cfg.model.experts = n;
            }
            if let Some(k) = model.topk {
                cfg.model.top_k = k;
            }
            if let Some(g) = &model.gate {
                cfg.gate_mode =
                    GateMode::parse(g).with_context(|| format!("unknown gate mode {g}"))?;
            }
            cfg.check()?;
            let prepared = prepare(&cfg, None)?;
            if let Some(c) = &prepared.cache {
                c.flush()?;
            }
            let split = stratified_split(&prepared.phases, &cfg.split_spec())?;
            let run = run_variant("full", &cfg, &prepared, &split)?;
            checkpoint::save(out, &run.model, run.temperature, Some(run.tuned_threshold))?;
            write_file(history, &history_csv(&run.history))?;
            if let Some(p) = report {
                write_file(p, &pipeline::report_json(&run.report))?;
            }
            println!(
                "best epoch {} of {}, val AUC {:?}",
                run.report.best_epoch, run.report.epochs_run, run.report.val_auc
            );
            Ok(0)
        }
        Command::Eval {
            data,
            model,
            report,
            calibrate,
            split,
        } => {
            let mut cfg = load_config(cli)?;
            apply_data(&mut cfg, data);
            let rows = match split.as_str() {
                "test" => EvalRows::Test,
                "all" => EvalRows::All,
                other => bail!("--split must be test or all, got {other}"),
            };
            let (m, header) =
                checkpoint::load(model).with_context(|| model.display().to_string())?;
            let r = evaluate_checkpoint(&cfg, &m, &header, rows, *calibrate)?;
            let mut json = serde_json::to_string_pretty(&r)?;
            json.push('\n');
            write_file(report, &json)?;
            println!(
                "n {} AUC {:?} AP {:?} F1 {:.4} T {:.4}",
                r.overall.n,
                r.overall.auc_roc,
                r.overall.average_precision,
                r.overall.f1,
                r.temperature
            );
            Ok(0)
        }
        Command::Run => {
            let cfg = load_config(cli)?;
            let a = run_pipeline(&cfg)?;
            println!("report: {}", a.report.display());
            println!("checkpoint: {}", a.checkpoint.display());
            println!("history: {}", a.history.display());
            Ok(0)
        }
        Command::Ablate => {
            let cfg = load_config(cli)?;
            let reports = ablation_grid(&cfg)?;
            let mut out = std::io::stdout().lock();
            for r in &reports {
                let auc = r
                    .test
                    .overall
                    .auc_roc
                    .map_or("nan".into(), |a| format!("{a:.4}"));
                writeln!(out, "{:<18} test AUC {auc}", r.variant)?;
            }
            writeln!(
                out,
                "table: {}",
                cfg.output_dir.join("ablation.csv").display()
            )?;
            Ok(0)
        }
        Command::Ontology {
            command: OntologyCommand::Check { dir },
        } => {
            let t = load_ontology(dir).with_context(|| dir.display().to_string())?;
            println!("{}: {} concepts", dir.display(), t.len());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
