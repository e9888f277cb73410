//! Operator CLI: the full lifecycle behind one thin binary.
//!
//! ```text
//! sidsearch [--config <path>] [--seed <n>] [--steps <n>]
//!           [--checkpoint <path>] [--listen <addr>] [--print-config]
//!           <gen-data | pretrain | spo | eval | serve | export-plots>
//! ```
//!
//! Every command echoes the resolved configuration and seed to stderr
//! before doing anything. CSV schemas:
//!
//! * pretrain metrics: `step,l_contrast,l_codebook,l_ntp,l_total,ppl_1..ppl_k`
//! * spo rounds: `round,mean_reward,mean_kl,valid_rate,probe_reward,recall_at_k,mrr`
//! * eval metrics: `metric,slice,value`
//!
//! `export-plots` converts whichever CSVs exist into `<plot_dir>/*.plot`
//! files of tab-separated `(metric, slice, value)` rows.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::checkpoint::{load_checkpoint, model_version, save_checkpoint};
use crate::codebook::{quantize, EffectiveCodebook};
use crate::config::RunConfig;
use crate::eval::{build_splits, evaluate, EvalSplit};
use crate::model::{encode_item, ModelParams};
use crate::num::ParamStore;
use crate::pretrain::run_pretrain;
use crate::service::{serve, Shared};
use crate::sim::{generate_corpus, load_corpus, save_corpus, Corpus};
use crate::spo::run_spo;
use crate::trie::Trie;
use crate::{Error, Result};

#[derive(Parser)]
#[command(
    name = "sidsearch",
    version,
    about = "Generative search over semantic-ID paths: data simulation, joint training, preference post-training, evaluation, serving"
)]
struct Cli {
    /// Key-value config file (defaults apply when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override pretrain steps / spo rounds.
    #[arg(long, global = true)]
    steps: Option<usize>,
    /// Checkpoint to load (resume, post-train, evaluate, or serve from).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Override the serve listen address.
    #[arg(long, global = true)]
    listen: Option<String>,
    /// Print the resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and write it to paths.corpus.
    GenData,
    /// Jointly train encoders, codebook, and decoder; write checkpoint,
    /// metrics CSV, and trie snapshot.
    Pretrain,
    /// Preference post-training from a pre-trained checkpoint.
    Spo,
    /// Offline evaluation on the held-out probe splits.
    Eval,
    /// Start the search-serving endpoint.
    Serve,
    /// Convert metric CSVs into plot-data files.
    ExportPlots,
}

/// Entry point for the binary; returns the process exit code.
pub fn run() -> i32 {
    run_from(std::env::args().collect())
}

pub fn run_from(args: Vec<String>) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };

    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::parse_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(listen) = &cli.listen {
        config.listen = listen.clone();
    }
    if let Some(steps) = cli.steps {
        config.pretrain.steps = steps;
        config.spo.rounds = steps;
    }
    config.validate()?;

    if cli.print_config {
        let mut out = std::io::stdout().lock();
        for line in config.to_lines() {
            writeln!(out, "{line}")?;
        }
        return Ok(());
    }

    let Some(command) = cli.command else {
        return Err(Error::InvalidArgument(
            "no subcommand (try gen-data | pretrain | spo | eval | serve | export-plots, or --print-config)".into(),
        ));
    };

    // Echo the resolved configuration and seed.
    eprintln!("# resolved configuration (seed = {})", config.seed);
    for line in config.to_lines() {
        eprintln!("# {line}");
    }

    match command {
        Command::GenData => cmd_gen_data(&config),
        Command::Pretrain => cmd_pretrain(&config, cli.checkpoint.as_deref()),
        Command::Spo => cmd_spo(&config, cli.checkpoint.as_deref()),
        Command::Eval => cmd_eval(&config, cli.checkpoint.as_deref()),
        Command::Serve => cmd_serve(&config, cli.checkpoint.as_deref()),
        Command::ExportPlots => cmd_export_plots(&config),
    }
}

fn require_file(path: &Path, produced_by: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "{} not found (run `{produced_by}` first)",
            path.display()
        )))
    }
}

fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    let corpus = generate_corpus(&config.corpus_config())?;
    save_corpus(&corpus, &config.paths.corpus)?;
    println!(
        "wrote {} ({} items, {} queries, {} records)",
        config.paths.corpus.display(),
        corpus.items.len(),
        corpus.queries.len(),
        corpus.records.len()
    );
    Ok(())
}

fn load_corpus_checked(config: &RunConfig) -> Result<Corpus> {
    require_file(&config.paths.corpus, "gen-data")?;
    load_corpus(&config.paths.corpus)
}

/// Quantize every corpus item under the current parameters into a trie.
pub fn build_trie(store: &ParamStore, params: &ModelParams, corpus: &Corpus) -> Result<Trie> {
    let cb = EffectiveCodebook::materialize(store, params);
    let mut trie = Trie::new(params.dims.k);
    for item in &corpus.items {
        let fwd = encode_item(store, params, &item.feature_tokens)?;
        let (path, _) = quantize(&fwd.latents, &cb);
        trie.insert(&path, item.item_id)?;
    }
    Ok(trie)
}

fn cmd_pretrain(config: &RunConfig, resume: Option<&Path>) -> Result<()> {
    let corpus = load_corpus_checked(config)?;
    let dims = config.model_dims();
    let (mut store, params) = match resume {
        Some(path) => {
            require_file(path, "pretrain")?;
            let (store, loaded_dims) = load_checkpoint(path)?;
            if loaded_dims != dims {
                return Err(Error::Checkpoint(
                    "checkpoint dimensions do not match the configuration".into(),
                ));
            }
            let params = ModelParams::bind(&store, loaded_dims)?;
            (store, params)
        }
        None => {
            let mut store = ParamStore::new();
            let params = ModelParams::register(&mut store, dims, config.codebook, config.seed);
            (store, params)
        }
    };

    let mut csv = std::fs::File::create(&config.paths.pretrain_metrics)?;
    let ppl_cols: Vec<String> = (1..=config.k).map(|n| format!("ppl_{n}")).collect();
    writeln!(
        csv,
        "step,l_contrast,l_codebook,l_ntp,l_total,{}",
        ppl_cols.join(",")
    )?;
    run_pretrain(
        &mut store,
        &params,
        &corpus,
        &config.pretrain,
        config.seed,
        |row| {
            let ppl: Vec<String> = row.perplexities.iter().map(|p| format!("{p:.6}")).collect();
            let _ = writeln!(
                csv,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{}",
                row.step,
                row.report.l_contrast,
                row.report.l_codebook,
                row.report.l_ntp,
                row.report.l_total,
                ppl.join(",")
            );
        },
    )?;

    save_checkpoint(&store, &dims, &config.paths.checkpoint)?;
    let trie = build_trie(&store, &params, &corpus)?;
    trie.save_snapshot(&config.paths.trie_snapshot)?;
    println!(
        "wrote {} (version {}), {} ({} paths), {}",
        config.paths.checkpoint.display(),
        model_version(&store),
        config.paths.trie_snapshot.display(),
        trie.path_count(),
        config.paths.pretrain_metrics.display()
    );
    Ok(())
}

fn load_model(config: &RunConfig, explicit: Option<&Path>, prefer_spo: bool) -> Result<(ParamStore, ModelParams)> {
    let path = match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            if prefer_spo && config.paths.spo_checkpoint.is_file() {
                config.paths.spo_checkpoint.clone()
            } else {
                config.paths.checkpoint.clone()
            }
        }
    };
    require_file(&path, "pretrain")?;
    let (store, dims) = load_checkpoint(&path)?;
    let params = ModelParams::bind(&store, dims)?;
    Ok((store, params))
}

fn load_or_build_trie(
    config: &RunConfig,
    store: &ParamStore,
    params: &ModelParams,
    corpus: &Corpus,
) -> Result<Trie> {
    if config.paths.trie_snapshot.is_file() {
        Trie::load_snapshot(&config.paths.trie_snapshot)
    } else {
        build_trie(store, params, corpus)
    }
}

fn truncated(split: EvalSplit, limit: usize) -> EvalSplit {
    if limit == 0 || split.records.len() <= limit {
        split
    } else {
        EvalSplit {
            kind: split.kind,
            records: split.records.into_iter().take(limit).collect(),
        }
    }
}

fn cmd_spo(config: &RunConfig, explicit: Option<&Path>) -> Result<()> {
    let corpus = load_corpus_checked(config)?;
    let (mut store, params) = load_model(config, explicit, false)?;
    let reference = store.clone();
    let trie = load_or_build_trie(config, &store, &params, &corpus)?;
    if trie.is_empty() {
        return Err(Error::InvalidArgument("spo: trie is empty".into()));
    }
    let spo_cfg = config.spo_config();
    let (_, ck) = build_splits(&corpus, &config.reward, config.eval.top_m, config.seed);
    let ck = truncated(ck, config.eval.probe_limit);

    let mut csv = std::fs::File::create(&config.paths.spo_rounds)?;
    writeln!(
        csv,
        "round,mean_reward,mean_kl,valid_rate,probe_reward,recall_at_k,mrr"
    )?;
    run_spo(
        &mut store,
        &params,
        &reference,
        &corpus,
        &trie,
        &spo_cfg,
        config.seed,
        config.eval.probe_limit,
        |current| {
            if ck.records.is_empty() {
                return Ok((0.0, 0.0));
            }
            let ev = evaluate(
                current,
                &params,
                &trie,
                &corpus,
                &ck,
                config.eval.k,
                config.decode.beam_size,
                config.decode.top_n,
                true,
            )?;
            Ok((ev.overall.recall_at_k, ev.overall.mrr))
        },
        |row| {
            let _ = writeln!(
                csv,
                "{},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                row.round,
                row.mean_reward,
                row.mean_kl,
                row.valid_rate,
                row.probe_reward,
                row.recall_at_k,
                row.mrr
            );
        },
    )?;

    let dims = params.dims;
    save_checkpoint(&store, &dims, &config.paths.spo_checkpoint)?;
    println!(
        "wrote {} (version {}), {}",
        config.paths.spo_checkpoint.display(),
        model_version(&store),
        config.paths.spo_rounds.display()
    );
    Ok(())
}

fn cmd_eval(config: &RunConfig, explicit: Option<&Path>) -> Result<()> {
    let corpus = load_corpus_checked(config)?;
    let (store, params) = load_model(config, explicit, true)?;
    let trie = load_or_build_trie(config, &store, &params, &corpus)?;
    let (rk, ck) = build_splits(&corpus, &config.reward, config.eval.top_m, config.seed);
    let rk = truncated(rk, config.eval.probe_limit);
    let ck = truncated(ck, config.eval.probe_limit);

    let mut rows: Vec<(String, String, f64)> = Vec::new();
    for split in [&rk, &ck] {
        if split.records.is_empty() {
            continue;
        }
        let ev = evaluate(
            &store,
            &params,
            &trie,
            &corpus,
            split,
            config.eval.k,
            config.decode.beam_size,
            config.decode.top_n,
            true,
        )?;
        let recall_name = format!("recall_at_{}", config.eval.k);
        let prefix = split.kind.name();
        rows.push((recall_name.clone(), format!("{prefix}_overall"), ev.overall.recall_at_k));
        rows.push(("mrr".into(), format!("{prefix}_overall"), ev.overall.mrr));
        for (slice, m) in &ev.slices {
            rows.push((recall_name.clone(), format!("{prefix}_{slice}"), m.recall_at_k));
            rows.push(("mrr".into(), format!("{prefix}_{slice}"), m.mrr));
        }
    }
    // Valid-path rate with and without the trie constraint.
    let constrained = evaluate(
        &store, &params, &trie, &corpus, &rk, config.eval.k,
        config.decode.beam_size, config.decode.top_n, true,
    )?;
    let unconstrained = evaluate(
        &store, &params, &trie, &corpus, &rk, config.eval.k,
        config.decode.beam_size, config.decode.top_n, false,
    )?;
    rows.push(("valid_rate".into(), "constrained".into(), constrained.overall.valid_rate));
    rows.push(("valid_rate".into(), "unconstrained".into(), unconstrained.overall.valid_rate));

    let mut csv = std::fs::File::create(&config.paths.eval_metrics)?;
    writeln!(csv, "metric,slice,value")?;
    for (metric, slice, value) in &rows {
        writeln!(csv, "{metric},{slice},{value:.9e}")?;
    }
    println!("wrote {}", config.paths.eval_metrics.display());
    for (metric, slice, value) in &rows {
        if slice.ends_with("_overall") || metric == "valid_rate" {
            println!("{metric:<16} {slice:<16} {value:.4}");
        }
    }
    Ok(())
}

fn cmd_serve(config: &RunConfig, explicit: Option<&Path>) -> Result<()> {
    let (store, params) = load_model(config, explicit, true)?;
    require_file(&config.paths.trie_snapshot, "pretrain")?;
    let trie = Trie::load_snapshot(&config.paths.trie_snapshot)?;
    let shared = Arc::new(Shared::new(store, params, trie, config.decode.beam_size));
    let handle = serve(Arc::clone(&shared), &config.listen)?;
    println!("listening on {}", handle.addr);
    std::io::stdout().flush()?;
    // Blocks until a shutdown message arrives.
    drop(handle);
    Ok(())
}

fn cmd_export_plots(config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&config.paths.plot_dir)?;
    let mut written = Vec::new();

    // Per-step training curves.
    if config.paths.pretrain_metrics.is_file() {
        let out = config.paths.plot_dir.join("pretrain.plot");
        let rows = read_csv(&config.paths.pretrain_metrics)?;
        let mut file = std::fs::File::create(&out)?;
        for row in &rows {
            let step = &row[0];
            for (name, value) in rows_header(&config.paths.pretrain_metrics)?
                .iter()
                .skip(1)
                .zip(row.iter().skip(1))
            {
                writeln!(file, "{name}\tstep:{step}\t{value}")?;
            }
        }
        written.push(out);
    }

    // Per-round post-training curves.
    if config.paths.spo_rounds.is_file() {
        let out = config.paths.plot_dir.join("spo.plot");
        let rows = read_csv(&config.paths.spo_rounds)?;
        let header = rows_header(&config.paths.spo_rounds)?;
        let mut file = std::fs::File::create(&out)?;
        for row in &rows {
            let round = &row[0];
            for (name, value) in header.iter().skip(1).zip(row.iter().skip(1)) {
                writeln!(file, "{name}\tround:{round}\t{value}")?;
            }
        }
        written.push(out);
    }

    // Metric/slice bars (already triplets).
    if config.paths.eval_metrics.is_file() {
        let out = config.paths.plot_dir.join("eval.plot");
        let rows = read_csv(&config.paths.eval_metrics)?;
        let mut file = std::fs::File::create(&out)?;
        for row in &rows {
            writeln!(file, "{}\t{}\t{}", row[0], row[1], row[2])?;
        }
        written.push(out);
    }

    if written.is_empty() {
        return Err(Error::InvalidArgument(
            "export-plots: no metric CSVs found (run pretrain/spo/eval first)".into(),
        ));
    }
    for path in written {
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn rows_header(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)?;
    let header = text.lines().next().ok_or(Error::Parse {
        line: 1,
        message: format!("{}: empty csv", path.display()),
    })?;
    Ok(header.split(',').map(|s| s.to_string()).collect())
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(|s| s.to_string()).collect())
        .collect())
}
