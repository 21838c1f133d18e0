//! The `grpo` batch driver.
//!
//! Exit codes: 0 success, 1 validation error, 2 I/O error.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{RunConfig, SplitPart};
use crate::error::{Error, Result};
use crate::eval::{comparison_report, cross_matrix, evaluate_accuracy, EvalResult};
use crate::reward::weighted_reward;
use crate::task::{
    generate_suite, group_by, load_dataset, split_suite, write_jsonl, SplitDataset, Suite,
    VqaItem, TRAIN_FRACTION,
};

#[derive(Debug, Parser)]
#[command(name = "grpo", about = "Group-relative policy optimization on multiple-choice suites")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic multi-domain suite as JSONL files.
    Gen(Flags),
    /// Train one policy on a dataset.
    Train(Flags),
    /// Evaluate a checkpoint; prints JSON on stdout.
    Eval(Flags),
    /// Train on each domain and evaluate on all; writes CSV matrices.
    Matrix(Flags),
    /// Score `<letter>\t<response>` lines with the reward rules.
    Score(ScoreArgs),
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    file: PathBuf,
    #[command(flatten)]
    flags: Flags,
}

/// Every value is parsed by [`RunConfig::set`] so file and flag handling agree.
#[derive(Debug, Args, Default)]
struct Flags {
    /// Flat `key = value` config file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    domains: Option<String>,
    #[arg(long)]
    items: Option<String>,
    #[arg(long)]
    features: Option<String>,
    #[arg(long)]
    options: Option<String>,
    #[arg(long)]
    alpha: Option<String>,
    /// Responses sampled per question (G).
    #[arg(long)]
    group_size: Option<String>,
    /// Sampling temperature.
    #[arg(long)]
    temp: Option<String>,
    /// Ratio clip radius.
    #[arg(long)]
    clip_eps: Option<String>,
    /// KL penalty coefficient.
    #[arg(long)]
    kl_beta: Option<String>,
    #[arg(long)]
    adv_eps: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    /// Fixed number of update steps (overrides epochs).
    #[arg(long)]
    steps: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    /// think | no-think
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    think_slots: Option<String>,
    #[arg(long)]
    think_vocab: Option<String>,
    #[arg(long)]
    structures: Option<String>,
    #[arg(long)]
    init_scale: Option<String>,
    #[arg(long)]
    w_format: Option<String>,
    #[arg(long)]
    w_accuracy: Option<String>,
    #[arg(long)]
    eval_every: Option<String>,
    /// grpo | sft
    #[arg(long)]
    trainer: Option<String>,
    /// Comma-separated trainers to compare, e.g. grpo,sft
    #[arg(long)]
    compare: Option<String>,
    /// domain | task
    #[arg(long)]
    axis: Option<String>,
    #[arg(long)]
    train_domain: Option<String>,
    /// train | test | all
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    per_domain: bool,
    #[arg(long)]
    jobs: Option<String>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    log: Option<String>,
    #[arg(long)]
    out: Option<String>,
}

impl Flags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let opts: [(&'static str, &Option<String>); 34] = [
            ("seed", &self.seed),
            ("domains", &self.domains),
            ("items", &self.items),
            ("features", &self.features),
            ("options", &self.options),
            ("alpha", &self.alpha),
            ("group_size", &self.group_size),
            ("temp", &self.temp),
            ("clip_eps", &self.clip_eps),
            ("kl_beta", &self.kl_beta),
            ("adv_eps", &self.adv_eps),
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("steps", &self.steps),
            ("batch", &self.batch),
            ("mode", &self.mode),
            ("think_slots", &self.think_slots),
            ("think_vocab", &self.think_vocab),
            ("structures", &self.structures),
            ("init_scale", &self.init_scale),
            ("w_format", &self.w_format),
            ("w_accuracy", &self.w_accuracy),
            ("eval_every", &self.eval_every),
            ("trainer", &self.trainer),
            ("compare", &self.compare),
            ("axis", &self.axis),
            ("train_domain", &self.train_domain),
            ("split", &self.split),
            ("jobs", &self.jobs),
            ("data", &self.data),
            ("checkpoint", &self.checkpoint),
            ("log", &self.log),
            ("out", &self.out),
            ("per_domain", &None),
        ];
        let mut pairs: Vec<_> = opts
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect();
        if self.per_domain {
            pairs.push(("per_domain", "true"));
        }
        pairs
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            cfg.apply_text(&text, path)?;
        }
        for (k, v) in self.pairs() {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub alpha: f64,
    pub feature_dim: usize,
    pub num_options: usize,
    pub domains: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub count: usize,
}

fn cmd_gen(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let suite = generate_suite(&cfg.suite)?;
    let mut domains = Vec::new();
    fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))?;
    for (name, items) in &suite {
        let file = format!("{}.jsonl", file_stem(name));
        write_jsonl(&cfg.out.join(&file), items)?;
        domains.push(ManifestEntry {
            name: name.clone(),
            file,
            count: items.len(),
        });
    }
    let manifest = Manifest {
        seed: cfg.suite.seed,
        alpha: cfg.suite.alpha,
        feature_dim: cfg.suite.feature_dim,
        num_options: cfg.suite.num_options,
        domains,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_file(&cfg.out.join("manifest.json"), json)?;
    write_file(&cfg.out.join("gen.conf"), cfg.to_conf())?;
    writeln!(stdout, "wrote {} domains to {}", suite.len(), cfg.out.display()).ok();
    Ok(())
}

/// A JSONL file, or a directory of them (manifest order if present, else by name).
pub fn load_items(path: &Path) -> Result<Vec<VqaItem>> {
    if !path.is_dir() {
        return load_dataset(path);
    }
    let manifest_path = path.join("manifest.json");
    let files: Vec<PathBuf> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: manifest_path.clone(),
            line: e.line(),
            reason: e.to_string(),
        })?;
        manifest.domains.iter().map(|d| path.join(&d.file)).collect()
    } else {
        let mut files: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        files.sort();
        files
    };
    let mut items = Vec::new();
    for f in files {
        items.extend(load_dataset(&f)?);
    }
    Ok(items)
}

fn data_path(cfg: &RunConfig) -> Result<&Path> {
    cfg.data
        .as_deref()
        .ok_or_else(|| Error::invalid("data", "no dataset given (--data)"))
}

fn load_suite(cfg: &RunConfig) -> Result<Suite> {
    let items = load_items(data_path(cfg)?)?;
    let mut suite = group_by(items, cfg.axis);
    if let Some(only) = &cfg.train_domain {
        let items = suite
            .shift_remove(only)
            .ok_or_else(|| Error::invalid("train_domain", format!("{only:?} not in dataset")))?;
        suite = Suite::from([(only.clone(), items)]);
    }
    Ok(suite)
}

fn concat(splits: impl Iterator<Item = SplitDataset>) -> SplitDataset {
    let mut out = SplitDataset {
        train: Vec::new(),
        test: Vec::new(),
        ratio: TRAIN_FRACTION,
    };
    for s in splits {
        out.train.extend(s.train);
        out.test.extend(s.test);
    }
    out
}

fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out.join("policy.ckpt"))
}

fn cmd_train(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let suite = load_suite(cfg)?;
    let dataset = concat(split_suite(&suite, cfg.suite.seed)?.into_values());
    let (policy, log) = cfg.trainer.train(&dataset, &cfg.grpo)?;
    let ckpt = checkpoint_path(cfg);
    let log_path = cfg.log.clone().unwrap_or_else(|| cfg.out.join("train_log.jsonl"));
    write_file(&ckpt, checkpoint::to_bytes(&policy))?;
    write_file(&log_path, log.to_jsonl())?;
    write_file(&cfg.out.join("train.conf"), cfg.to_conf())?;
    let summary = serde_json::json!({
        "trainer": cfg.trainer.name(),
        "steps": log.records.len(),
        "train_accuracy": log.last_accuracy(),
        "checkpoint": ckpt.display().to_string(),
    });
    writeln!(stdout, "{summary}").ok();
    Ok(())
}

#[derive(Debug, Serialize)]
struct DomainResult {
    domain: String,
    #[serde(flatten)]
    result: EvalResult,
}

fn cmd_eval(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let policy = checkpoint::load(&checkpoint_path(cfg))?;
    let items = load_items(data_path(cfg)?)?;
    if let Some(first) = items.first() {
        policy.check_item(first)?;
    }
    let suite = group_by(items, cfg.axis);
    let parts: Vec<(String, Vec<VqaItem>)> = match cfg.split {
        SplitPart::All => suite.into_iter().collect(),
        ref part => split_suite(&suite, cfg.suite.seed)?
            .into_iter()
            .map(|(label, s)| (label, if *part == SplitPart::Train { s.train } else { s.test }))
            .collect(),
    };
    let mut rows = Vec::new();
    let (mut n, mut correct) = (0, 0);
    for (label, items) in &parts {
        let r = evaluate_accuracy(&policy, items)?;
        n += r.n;
        correct += r.correct;
        rows.push(DomainResult {
            domain: label.clone(),
            result: r,
        });
    }
    let overall = EvalResult::from_counts(correct, n)?;
    let json = if cfg.per_domain {
        serde_json::json!({ "overall": overall, "per_domain": rows })
    } else {
        serde_json::to_value(overall).expect("serializes")
    };
    writeln!(stdout, "{json}").ok();
    write_file(&cfg.out.join("eval.conf"), cfg.to_conf())?;
    Ok(())
}

fn cmd_matrix(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let suite = load_suite(cfg)?;
    if suite.len() < 2 {
        return Err(Error::invalid(
            "data",
            format!("matrix needs at least 2 domains, found {}", suite.len()),
        ));
    }
    let splits = split_suite(&suite, cfg.suite.seed)?;
    let methods = if cfg.compare.is_empty() {
        vec![cfg.trainer]
    } else {
        cfg.compare.clone()
    };
    let mut columns: Vec<String> = splits.keys().cloned().collect();
    columns.push("Overall".into());
    let mut results = Vec::new();
    for trainer in &methods {
        let (matrix, rows) = cross_matrix(&splits, &cfg.grpo, *trainer, cfg.jobs)?;
        let csv = matrix.to_csv();
        write_file(&cfg.out.join(format!("matrix_{}.csv", trainer.name())), &csv)?;
        for row in &rows {
            let name = format!("{}_{}.jsonl", trainer.name(), file_stem(&row.label));
            write_file(&cfg.out.join("logs").join(name), row.log.to_jsonl())?;
        }
        if cfg.compare.is_empty() {
            write!(stdout, "{csv}").ok();
        }
        let mut values = matrix.overall_col.clone();
        values.push(matrix.grand_overall);
        results.push((trainer.name().to_string(), values));
    }
    if !cfg.compare.is_empty() {
        let report = comparison_report(&columns, &results)?;
        write_file(&cfg.out.join("report.txt"), &report.text)?;
        write_file(&cfg.out.join("report.csv"), &report.csv)?;
        write!(stdout, "{}", report.text).ok();
    }
    write_file(&cfg.out.join("matrix.conf"), cfg.to_conf())?;
    Ok(())
}

fn cmd_score(path: &Path, cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    writeln!(stdout, "line\tformat\taccuracy\ttotal").ok();
    for (n, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (gt, response) = line.split_once('\t').unwrap_or((line, ""));
        let r = weighted_reward(response, gt, cfg.grpo.mode, cfg.weights()).map_err(|e| {
            Error::Parse {
                path: path.to_path_buf(),
                line: n + 1,
                reason: e.to_string(),
            }
        })?;
        writeln!(stdout, "{}\t{}\t{}\t{}", n + 1, r.format, r.accuracy, r.total).ok();
    }
    Ok(())
}

fn dispatch(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Gen(f) => cmd_gen(&f.resolve()?, stdout),
        Command::Train(f) => cmd_train(&f.resolve()?, stdout),
        Command::Eval(f) => cmd_eval(&f.resolve()?, stdout),
        Command::Matrix(f) => cmd_matrix(&f.resolve()?, stdout),
        Command::Score(a) => cmd_score(&a.file, &a.flags.resolve()?, stdout),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            if e.use_stderr() {
                write!(stderr, "{e}").ok();
            } else {
                write!(stdout, "{e}").ok();
            }
            return code;
        }
    };
    match dispatch(cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            writeln!(stderr, "error: {e}").ok();
            e.exit_code()
        }
    }
}
