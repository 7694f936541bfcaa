use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use mma_core::latency::{metric_al, metric_ap, metric_dal, DelayRecord};
use mma_core::model::Variant;
use mma_core::training::{
    ablation, evaluate, filter_dal, streams, sweep as run_sweep, to_csv, train_with, Checkpoint, LogEntry, RunConfig,
    SweepRow,
};
use mma_core::{Error, Model32};

/// Failure of a command: usage problems exit with 1, runtime failures with 2.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Usage(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("config file {} not found", path.display())));
    }
    Ok(RunConfig::load(path)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    if !path.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} not found", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
}

pub fn train(config: &Path, out: &Path, seed: Option<u64>, steps: Option<usize>) -> Result<(), CliError> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = steps {
        cfg.steps = s;
    }
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    let mut log = String::from(LogEntry::CSV_HEADER);
    log.push('\n');
    let outcome = train_with(&cfg, |e| {
        log.push_str(&e.to_csv_row());
        log.push('\n');
    })?;
    outcome.best.save(&out.join("model.ckpt"))?;
    outcome.last.save(&out.join("last.ckpt"))?;
    write(&out.join("train_log.csv"), &log)?;
    let mut val = String::from("step,accuracy\n");
    for (s, a) in &outcome.validations {
        val.push_str(&format!("{s},{a}\n"));
    }
    write(&out.join("validation.csv"), &val)?;
    let last = outcome.log.last().copied().unwrap_or_default();
    println!(
        "final step={} loss={} nll={} l_avg={} l_var={} best_valid_accuracy={} best_step={}",
        last.step, last.loss, last.nll, last.l_avg, last.l_var, outcome.best_accuracy, outcome.best.step
    );
    Ok(())
}

/// Reads one sentence per non-blank line; returns `(line number, tokens)`.
fn read_token_file(path: &Path) -> Result<Vec<(usize, Vec<usize>)>, CliError> {
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let toks = line
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CliError::Usage(format!("{}:{}: not a list of token ids", path.display(), k + 1)))?;
        out.push((k + 1, toks));
    }
    if out.is_empty() {
        return Err(CliError::Usage(format!("{} contains no sentences", path.display())));
    }
    Ok(out)
}

fn join(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn decode(checkpoint: &Path, input: &Path, stream: bool, trace: Option<&Path>) -> Result<(), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let model: Model32 = ckpt.model()?;
    let sentences = read_token_file(input)?;
    let vocab = model.config().vocab_size;
    let mut traces = String::new();
    for (line, src) in &sentences {
        if let Some(bad) = src.iter().find(|&&t| t >= vocab) {
            return Err(runtime(format!("{}:{line}: token {bad} outside vocabulary of {vocab}", input.display())));
        }
        let out = model.decode(src.iter().copied()).map_err(|e| runtime(format!("{}:{line}: {e}", input.display())))?;
        println!("{}", join(out.content()));
        let t = out.delays.to_trace_line();
        println!("{t}");
        if stream {
            println!("{}", out.action_string());
        }
        traces.push_str(&t);
        traces.push('\n');
    }
    if let Some(p) = trace {
        write(p, &traces)?;
    }
    Ok(())
}

pub fn eval(checkpoint: &Path, sentences: usize, seed: Option<u64>, trace: Option<&Path>) -> Result<(), CliError> {
    if sentences == 0 {
        return Err(CliError::Usage("--sentences must be positive".into()));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let model: Model32 = ckpt.model()?;
    let mut spec = ckpt.config.task_spec();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let pairs = spec.dataset(sentences, streams::TEST)?;
    let report = evaluate(&model, &pairs)?;
    if let Some(p) = trace {
        let mut t = String::new();
        for s in &report.sentences {
            t.push_str(&s.delays.to_trace_line());
            t.push('\n');
        }
        write(p, &t)?;
    }
    println!("accuracy,bleu,ap,al,dal,span,max_head_latency");
    let l = report.latency;
    println!(
        "{},{},{},{},{},{},{}",
        report.token_accuracy, report.bleu, l.ap, l.al, l.dal, l.avg_attention_span, l.max_head_latency
    );
    Ok(())
}

pub struct GridOptions {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
    pub jobs: usize,
    pub eval_sentences: usize,
    pub filter_dal: Option<(f64, f64)>,
}

fn finish_grid(opts: &GridOptions, rows: Vec<SweepRow>) -> Result<(), CliError> {
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let rows = match opts.filter_dal {
        Some((lo, hi)) => filter_dal(&rows, lo, hi),
        None => rows,
    };
    let csv = to_csv(&rows);
    write(&opts.out, &csv)?;
    print!("{csv}");
    if failed > 0 {
        eprintln!("warning: {failed} cell(s) failed; their metrics are NaN");
    }
    Ok(())
}

pub fn sweep(opts: &GridOptions, grid: &[(f64, f64)]) -> Result<(), CliError> {
    let base = load_config(&opts.config)?;
    let rows = run_sweep(&base, grid, &opts.seeds, opts.jobs, opts.eval_sentences)?;
    finish_grid(opts, rows)
}

pub fn ablate(opts: &GridOptions, layers: &[usize], heads: &[usize], variant: Option<&str>) -> Result<(), CliError> {
    let base = load_config(&opts.config)?;
    let variant = match variant {
        Some(v) => v.parse::<Variant>()?,
        None => base.variant,
    };
    let rows = ablation(&base, layers, heads, variant, &opts.seeds, opts.jobs, opts.eval_sentences)?;
    finish_grid(opts, rows)
}

pub fn metrics(trace: &Path) -> Result<(), CliError> {
    let text =
        fs::read_to_string(trace).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", trace.display())))?;
    let mut records = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r = DelayRecord::parse_trace_line(line)
            .map_err(|e| CliError::Usage(format!("{}:{}: {e}", trace.display(), k + 1)))?;
        records.push((k + 1, r));
    }
    if records.is_empty() {
        return Err(CliError::Usage(format!("{} contains no traces", trace.display())));
    }
    println!("line,ap,al,dal");
    let mut sum = [0.0; 3];
    for (line, r) in &records {
        let m = [metric_ap(r), metric_al(r), metric_dal(r)];
        println!("{line},{},{},{}", m[0], m[1], m[2]);
        sum.iter_mut().zip(m).for_each(|(s, v)| *s += v);
    }
    let n = records.len() as f64;
    println!("mean,{},{},{}", sum[0] / n, sum[1] / n, sum[2] / n);
    Ok(())
}
