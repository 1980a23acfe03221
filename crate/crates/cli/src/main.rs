use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use otc_core::config::{apply_settings, parse_assignment, read_settings, Setting};
use otc_core::corpus::{generate_corpus, load_jsonl, save_jsonl, CorpusConfig};
use otc_core::encoder::load_model;
use otc_core::eval_stats::{emit_reports, evaluate, otc_deltas, probe_retrieval, sign_flip_test};
use otc_core::par::{with_jobs, ExecMode};
use otc_core::selfcheck::{run_grad_check, GradCheckConfig};
use otc_core::sweep::{load_results, run_sweep, SweepSpec};
use otc_core::trainer::{train, RunConfig, MODEL_FILE};
use otc_core::Error;

/// Original-translated contrastive training lab.
#[derive(Parser, Debug)]
#[command(name = "otc-lab", version)]
struct Cli {
    /// Root that every relative path is resolved against.
    #[arg(long, global = true, default_value = ".")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// `key = value` config file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` setting, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic parallel corpus as JSONL.
    GenCorpus {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        languages: Option<usize>,
        #[arg(long)]
        groups: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "corpus")]
        out: PathBuf,
    },
    /// Train one run.
    Train {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        original_language: Option<String>,
        /// on or off
        #[arg(long)]
        otc: Option<String>,
        #[arg(long)]
        baseline: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train every cell of a language x OTC x seed grid.
    Sweep {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value = "sweep")]
        out: PathBuf,
        /// Comma-separated original languages.
        #[arg(long)]
        languages: Option<String>,
        /// on, off or both
        #[arg(long)]
        otc: Option<String>,
        /// Comma-separated seeds.
        #[arg(long)]
        seeds: Option<String>,
        /// Also train original-only baseline runs.
        #[arg(long)]
        baseline: bool,
        #[arg(long, env = "OTC_JOBS", default_value_t = 1)]
        jobs: usize,
    },
    /// Score a checkpoint on a corpus test split.
    Eval {
        /// Model file, or a run directory holding one.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Original language for held-out retrieval.
        #[arg(long)]
        original_language: Option<String>,
        /// Write the metrics as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build result tables from a sweep directory.
    Report {
        #[arg(long, default_value = "sweep")]
        sweep: PathBuf,
        /// Defaults to `<sweep>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients of the full loss.
    GradCheck {
        #[arg(long, default_value_t = 8)]
        embed_dim: usize,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        no_otc: bool,
    },
}

fn resolve(root: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

fn settings(root: &Path, o: &Overrides, flags: Vec<Setting>) -> anyhow::Result<Vec<Setting>> {
    let mut all = match &o.config {
        Some(p) => read_settings(&resolve(root, p))?,
        None => Vec::new(),
    };
    all.extend(flags);
    for s in &o.set {
        all.push(parse_assignment(s)?);
    }
    Ok(all)
}

fn flag<T: std::fmt::Display>(out: &mut Vec<Setting>, key: &str, v: &Option<T>) {
    if let Some(v) = v {
        out.push(Setting::flag(key, v));
    }
}

fn on_off(v: &Option<String>) -> anyhow::Result<Option<bool>> {
    match v.as_deref() {
        None => Ok(None),
        Some("on") => Ok(Some(true)),
        Some("off") => Ok(Some(false)),
        Some(x) => Err(Error::Usage(format!("--otc takes on or off, got {x:?}")).into()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let root = cli.workdir;
    match cli.command {
        Command::GenCorpus {
            overrides,
            languages,
            groups,
            seed,
            out,
        } => {
            let mut f = Vec::new();
            flag(&mut f, "num_languages", &languages);
            flag(&mut f, "groups_per_language", &groups);
            flag(&mut f, "seed", &seed);
            let cfg: CorpusConfig =
                apply_settings(&CorpusConfig::default(), &settings(&root, &overrides, f)?)?;
            let generated = generate_corpus(&cfg)?;
            let dir = resolve(&root, &out);
            save_jsonl(&generated.split, &dir)?;
            let s = &generated.split;
            println!(
                "wrote {}: {} languages, {} train groups, {} test rows, {} probe groups, vocab {}",
                dir.display(),
                s.languages.len(),
                s.train.len(),
                s.test.len(),
                s.probe.len(),
                s.vocab.len()
            );
        }
        Command::Train {
            overrides,
            corpus,
            out,
            original_language,
            otc,
            baseline,
            seed,
            epochs,
        } => {
            let mut f = Vec::new();
            flag(&mut f, "corpus", &corpus.map(|p| p.display().to_string()));
            flag(&mut f, "output_dir", &out.map(|p| p.display().to_string()));
            flag(&mut f, "original_language", &original_language);
            flag(&mut f, "use_otc", &on_off(&otc)?);
            flag(&mut f, "baseline", &baseline.then_some(true));
            flag(&mut f, "seed", &seed);
            flag(&mut f, "epochs", &epochs);
            let mut cfg: RunConfig =
                apply_settings(&RunConfig::desk_scale(), &settings(&root, &overrides, f)?)?;
            if cfg.baseline && otc.is_none() {
                cfg.use_otc = false;
            }
            cfg.corpus = resolve(&root, &cfg.corpus);
            cfg.output_dir = resolve(&root, &cfg.output_dir);
            let t = Instant::now();
            let outcome = train(&cfg)?;
            let last = outcome.last_epoch();
            println!(
                "trained {} steps in {:.1}s; final epoch mean loss {:.4} (ce {:.4}, otc {:.4}), tau {:.4}; outputs in {}",
                outcome.metrics.len(),
                t.elapsed().as_secs_f64(),
                outcome.epoch_mean(last, |m| m.loss_total).unwrap_or(f64::NAN),
                outcome.epoch_mean(last, |m| m.loss_ce).unwrap_or(f64::NAN),
                outcome.epoch_mean(last, |m| m.loss_otc).unwrap_or(f64::NAN),
                outcome.model.tau(),
                cfg.output_dir.display()
            );
        }
        Command::Sweep {
            overrides,
            corpus,
            out,
            languages,
            otc,
            seeds,
            baseline,
            jobs,
        } => {
            let mut f = Vec::new();
            flag(
                &mut f,
                "base.corpus",
                &corpus.map(|p| p.display().to_string()),
            );
            flag(&mut f, "languages", &languages);
            flag(&mut f, "otc", &otc);
            flag(&mut f, "seeds", &seeds);
            flag(&mut f, "baseline", &baseline.then_some(true));
            let mut spec: SweepSpec =
                apply_settings(&SweepSpec::default(), &settings(&root, &overrides, f)?)?;
            spec.base.corpus = resolve(&root, &spec.base.corpus);
            let corpus = load_jsonl(&spec.base.corpus)?;
            let dir = resolve(&root, &out);
            let t = Instant::now();
            let outcome = with_jobs(jobs, |mode| run_sweep(&corpus, &spec, &dir, mode))?;
            println!(
                "sweep {}: {} runs trained, {} already complete, {:.1}s",
                dir.display(),
                outcome.trained.len(),
                outcome.skipped.len(),
                t.elapsed().as_secs_f64()
            );
        }
        Command::Eval {
            checkpoint,
            corpus,
            original_language,
            out,
        } => {
            let mut path = resolve(&root, &checkpoint);
            if path.is_dir() {
                path = path.join(MODEL_FILE);
            }
            let model = load_model(&path)?;
            let corpus = load_jsonl(&resolve(&root, &corpus))?;
            let metrics = evaluate(&model, &corpus.test, ExecMode::default())?;
            for m in &metrics {
                println!(
                    "{}\tf1_micro={:.3}\tn={}",
                    m.language, m.f1_micro, m.n_examples
                );
            }
            let retrieval = match &original_language {
                Some(l) => {
                    let r = probe_retrieval(&model, &corpus, l, ExecMode::default())?;
                    println!("retrieval({l})\t{r:.3}");
                    Some(r)
                }
                None => None,
            };
            if let Some(o) = out {
                let o = resolve(&root, &o);
                let json = serde_json::json!({ "metrics": metrics, "retrieval_acc": retrieval });
                std::fs::write(&o, serde_json::to_string_pretty(&json)?)
                    .with_context(|| format!("writing {}", o.display()))?;
            }
        }
        Command::Report { sweep, out } => {
            let dir = resolve(&root, &sweep);
            let results = load_results(&dir)?;
            if results.is_empty() {
                return Err(
                    Error::Data(format!("no completed runs under {}", dir.display())).into(),
                );
            }
            let out = out.map_or_else(|| dir.join("report"), |o| resolve(&root, &o));
            let files = emit_reports(&results, &out)?;
            for name in ["table1.txt", "table2.txt", "table3.txt"] {
                print!("{}", std::fs::read_to_string(out.join(name))?);
                println!();
            }
            let deltas = otc_deltas(&results);
            match sign_flip_test(&deltas, 0, 10_000) {
                Ok(t) => {
                    println!(
                        "OTC - no OTC on translated-only languages: mean {:+.4} over {} pairs, sign-flip p = {:.4}{}",
                        t.mean_delta,
                        t.n_pairs,
                        t.p_value,
                        if t.exact { " (exact)" } else { "" }
                    );
                    let path = out.join("significance.json");
                    std::fs::write(&path, serde_json::to_string_pretty(&t)?)
                        .with_context(|| format!("writing {}", path.display()))?;
                }
                Err(e) => println!("significance test skipped: {e}"),
            }
            println!("{} files written to {}", files.written.len(), out.display());
        }
        Command::GradCheck {
            embed_dim,
            blocks,
            eps,
            tolerance,
            seed,
            no_otc,
        } => {
            let cfg = GradCheckConfig {
                embed_dim,
                num_blocks: blocks,
                eps,
                tolerance,
                seed,
                use_otc: !no_otc,
                ..GradCheckConfig::default()
            };
            let t = Instant::now();
            let report = run_grad_check(&cfg)?;
            let (name, idx) = report.worst.clone().unwrap_or_default();
            println!(
                "checked {} entries in {:.2}s; max relative error {:.3e} at {name}[{idx}]",
                report.entries_checked,
                t.elapsed().as_secs_f64(),
                report.max_relative_error
            );
            if !report.passes(tolerance) {
                return Err(Error::Numeric(format!(
                    "gradient check failed: {:.3e} >= {tolerance:e}",
                    report.max_relative_error
                ))
                .into());
            }
            println!("PASS (tolerance {tolerance:e})");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(2, |e| e.exit_code() as u8);
            ExitCode::from(code)
        }
    }
}
