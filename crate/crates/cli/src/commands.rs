use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use knowmem::corpus::{generate_synthetic, kfold_split, write_corpus, SyntheticSpec};
use knowmem::harness::{
    self, aggregate, evaluate, load_checkpoint, multi_start, save_checkpoint, FoldEvaluation, RunConfig,
};
use knowmem::metrics::save_traces;
use knowmem::{CorpusBundle, MemoryReport};
use rayon::prelude::*;

use crate::args::{ConfigArgs, CorpusArgs};
use crate::output::*;

const CONFIG_FILE: &str = "config.toml";

fn fold_dir(run: &Path, fold: usize) -> PathBuf {
    run.join(format!("fold-{fold:02}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| knowmem::Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory for examples.jsonl and knowledge.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub slots: usize,
    #[arg(long, default_value_t = 50)]
    pub positives: usize,
    #[arg(long, default_value_t = 950)]
    pub negatives: usize,
    #[arg(long, default_value_t = 200)]
    pub vocab_size: usize,
    /// Per-token replacement probability.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 6)]
    pub slot_length: usize,
    #[arg(long, default_value_t = 2)]
    pub max_targets: usize,
}

pub fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        slots: args.slots,
        positives: args.positives,
        negatives: args.negatives,
        vocab_size: args.vocab_size,
        noise: args.noise,
        seed: args.seed,
        slot_length: args.slot_length,
        max_targets: args.max_targets,
        ..SyntheticSpec::default()
    };
    let bundle = generate_synthetic(&spec)?;
    create_dir(&args.out)?;
    write_corpus(
        &bundle,
        &args.out.join("examples.jsonl"),
        &args.out.join("knowledge.jsonl"),
    )?;
    let s = &bundle.stats;
    println!(
        "wrote {} examples ({} positive, ratio {}) and {} slots to {}",
        s.examples,
        s.positives,
        fmt(s.positive_ratio),
        s.slots,
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Run directory for checkpoints and training logs.
    #[arg(long)]
    pub out: PathBuf,
    /// Train a single fold instead of all of them.
    #[arg(long)]
    pub fold: Option<usize>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

pub fn train(args: &TrainArgs) -> Result<()> {
    let cfg = args.config.resolve()?;
    let bundle = args.corpus.load()?;
    let mut folds = kfold_split(&bundle, cfg.folds, cfg.seed)?;
    if let Some(f) = args.fold {
        if f >= folds.len() {
            return Err(knowmem::Error::Config(format!("fold {f} out of range for {} folds", folds.len())).into());
        }
        folds = vec![folds.swap_remove(f)];
    }
    create_dir(&args.out)?;
    std::fs::write(args.out.join(CONFIG_FILE), cfg.to_toml_string()?)
        .with_context(|| format!("writing {}", args.out.join(CONFIG_FILE).display()))?;

    let results = folds
        .par_iter()
        .map(|fold| {
            log::info!("training fold {}", fold.index);
            let ms = multi_start(&bundle, fold, &cfg)?;
            save_checkpoint(
                &fold_dir(&args.out, fold.index),
                &ms.best,
                &bundle.knowledge,
                fold.index,
                &cfg,
            )?;
            Ok((fold.index, ms))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut summary = Vec::new();
    let mut history = Vec::new();
    for (fold, ms) in &results {
        for (r, f1) in ms.validation_f1.iter().enumerate() {
            summary.push(vec![
                fold.to_string(),
                r.to_string(),
                harness::restart_seed(cfg.seed, *fold, r).to_string(),
                fmt(*f1),
                (r == ms.best_index).to_string(),
            ]);
        }
        let h = &ms.best.history;
        for e in 0..h.train_loss.len() {
            history.push(vec![
                fold.to_string(),
                (e + 1).to_string(),
                fmt(h.train_loss[e]),
                fmt(h.validation_f1[e]),
                fmt(h.validation_loss[e]),
                (e + 1 == h.best_epoch).to_string(),
            ]);
        }
        println!(
            "fold {fold}: restart {} selected, best epoch {}, stopped at {} ({}), validation macro-F1 {}",
            ms.best_index,
            h.best_epoch,
            h.stop_epoch,
            h.stop_reason,
            fmt(h.best_validation_f1())
        );
    }
    let header = |cols: &[&str]| cols.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    write_rows(
        &args.out.join("restarts.csv"),
        &header(&["fold", "restart", "seed", "validation_f1", "selected"]),
        &summary,
    )?;
    write_rows(
        &args.out.join("history.csv"),
        &header(&[
            "fold",
            "epoch",
            "train_loss",
            "validation_f1",
            "validation_loss",
            "best",
        ]),
        &history,
    )?;
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Where to write reports; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub ks: Option<Vec<usize>>,
    #[arg(long)]
    pub repetitions: Option<usize>,
}

fn run_config(
    run: &Path,
    delta: Option<f64>,
    ks: &Option<Vec<usize>>,
    repetitions: Option<usize>,
) -> Result<RunConfig> {
    let overrides = ConfigArgs {
        config: Some(run.join(CONFIG_FILE)),
        delta,
        ks: ks.clone(),
        repetitions,
        ..ConfigArgs::default()
    };
    overrides.resolve()
}

/// Evaluates every fold that has a checkpoint under `run`.
fn evaluate_run(bundle: &CorpusBundle, run: &Path, cfg: &RunConfig) -> Result<Vec<FoldEvaluation>> {
    let folds: Vec<_> = kfold_split(bundle, cfg.folds, cfg.seed)?
        .into_iter()
        .filter(|f| fold_dir(run, f.index).join("manifest.json").exists())
        .collect();
    if folds.is_empty() {
        return Err(knowmem::Error::Data(format!("no checkpoints under {}", run.display())).into());
    }
    folds
        .par_iter()
        .map(|fold| {
            let ck = load_checkpoint(&fold_dir(run, fold.index), &bundle.knowledge)?;
            Ok(evaluate(&ck.model, &ck.priorities, bundle, fold, cfg)?)
        })
        .collect()
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let cfg = run_config(&args.run, args.delta, &args.ks, args.repetitions)?;
    let bundle = args.corpus.load()?;
    let evals = evaluate_run(&bundle, &args.run, &cfg)?;
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    let traces_dir = out.join("traces");
    create_dir(&traces_dir)?;

    let rows: Vec<Vec<String>> = evals.iter().flat_map(|e| fold_rows(e, cfg.delta, &cfg.ks)).collect();
    write_rows(&out.join("folds.csv"), &fold_header(&cfg.ks), &rows)?;
    for e in &evals {
        for (r, rep) in e.repetitions.iter().enumerate() {
            save_traces(
                &traces_dir.join(format!("fold-{:02}-rep-{r}.jsonl", e.fold)),
                &rep.traces,
            )?;
        }
    }
    let agg = aggregate(&evals)?;
    let header = aggregate_header(&cfg.ks);
    let row = aggregate_row(&agg, cfg.delta, &cfg.ks);
    write_rows(&out.join("aggregate.csv"), &header, std::slice::from_ref(&row))?;
    print!("{}", markdown_table(&header, &[row]));
    Ok(())
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated ascending thresholds.
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    pub deltas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub ks: Vec<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let cfg = run_config(&args.run, None, &Some(args.ks.clone()), args.repetitions)?;
    let bundle = args.corpus.load()?;
    let evals = evaluate_run(&bundle, &args.run, &cfg)?;
    let mut header = vec!["fold".to_string()];
    header.extend(memory_header(&args.ks));
    let mut rows = Vec::new();
    let mut per_fold: Vec<Vec<MemoryReport>> = Vec::new();
    for e in &evals {
        if e.positive_traces().is_empty() {
            log::warn!("fold {} has no positive test examples; skipped", e.fold);
            continue;
        }
        let reports = harness::sweep(e, &args.deltas, &args.ks)?;
        for (d, r) in args.deltas.iter().zip(&reports) {
            let mut row = vec![e.fold.to_string()];
            row.extend(memory_fields(Some(r), *d, &args.ks));
            rows.push(row);
        }
        per_fold.push(reports);
    }
    for (i, d) in args.deltas.iter().enumerate() {
        let at: Vec<MemoryReport> = per_fold.iter().map(|r| r[i].clone()).collect();
        let mean = if at.is_empty() {
            None
        } else {
            Some(MemoryReport::mean(&at)?)
        };
        let mut row = vec!["mean".to_string()];
        row.extend(memory_fields(mean.as_ref(), *d, &args.ks));
        rows.push(row);
    }
    let out = args.out.clone().unwrap_or_else(|| args.run.clone());
    create_dir(&out)?;
    write_rows(&out.join("sweep.csv"), &header, &rows)?;
    let means: Vec<Vec<String>> = rows.into_iter().filter(|r| r[0] == "mean").collect();
    print!("{}", markdown_table(&header, &means));
    Ok(())
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Evaluated run directories to compare.
    #[arg(long = "run", required = true)]
    pub runs: Vec<PathBuf>,
    /// Combined CSV output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Markdown output; printed to stdout when absent.
    #[arg(long)]
    pub markdown: Option<PathBuf>,
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let mut header: Option<Vec<String>> = None;
    let mut rows = Vec::new();
    for run in &args.runs {
        let (h, body) = read_rows(&run.join("aggregate.csv"))?;
        let mut full = vec!["run".to_string()];
        full.extend(h);
        match &header {
            Some(existing) if *existing != full => {
                return Err(knowmem::Error::Data(format!(
                    "{} reports different columns from the first run",
                    run.display()
                ))
                .into())
            }
            Some(_) => {}
            None => header = Some(full),
        }
        let name = run
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| run.display().to_string());
        for r in body {
            let mut row = vec![name.clone()];
            row.extend(r);
            rows.push(row);
        }
    }
    let header = header.expect("at least one run");
    if let Some(path) = &args.csv {
        write_rows(path, &header, &rows)?;
    }
    let md = markdown_table(&header, &rows);
    match &args.markdown {
        Some(path) => std::fs::write(path, md).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{md}"),
    }
    Ok(())
}
