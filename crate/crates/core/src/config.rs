//! Flat `key = value` run configuration.
//!
//! The same keys are accepted from a config file and from command-line
//! flags (`group_size` in a file, `--group-size` on the command line).
//! Unknown keys are rejected. [`RunConfig::to_conf`] writes every key so
//! a resolved config can be fed back to reproduce a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::policy::Mode;
use crate::reward::RewardWeights;
use crate::task::{Axis, SuiteSpec};
use crate::trainer::{GrpoConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitPart {
    Train,
    Test,
    All,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub suite: SuiteSpec,
    pub grpo: GrpoConfig,
    pub trainer: Trainer,
    pub compare: Vec<Trainer>,
    pub axis: Axis,
    pub train_domain: Option<String>,
    pub split: SplitPart,
    pub per_domain: bool,
    pub jobs: usize,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            suite: SuiteSpec::default(),
            grpo: GrpoConfig::default(),
            trainer: Trainer::Grpo,
            compare: Vec::new(),
            axis: Axis::Domain,
            train_domain: None,
            split: SplitPart::Test,
            per_domain: false,
            jobs: 1,
            data: None,
            checkpoint: None,
            log: None,
            out: PathBuf::from("out"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(key, format!("cannot parse {value:?}")))
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn path_str(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

pub fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Think => "think",
        Mode::NoThink => "no-think",
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let key = key.as_str();
        let value = value.trim();
        let g = &mut self.grpo;
        let s = &mut self.suite;
        match key {
            "seed" => {
                let seed = parse(key, value)?;
                s.seed = seed;
                g.seed = seed;
            }
            "domains" => s.num_domains = parse(key, value)?,
            "items" => s.items_per_domain = parse(key, value)?,
            "features" => s.feature_dim = parse(key, value)?,
            "options" => s.num_options = parse(key, value)?,
            "alpha" => s.alpha = parse(key, value)?,
            "group_size" => g.group_size = parse(key, value)?,
            "temp" => g.temperature = parse(key, value)?,
            "clip_eps" => g.clip_eps = parse(key, value)?,
            "kl_beta" => g.kl_beta = parse(key, value)?,
            "adv_eps" => g.adv_eps = parse(key, value)?,
            "lr" => g.lr = parse(key, value)?,
            "epochs" => g.epochs = parse(key, value)?,
            "steps" => {
                g.max_steps = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "batch" => g.batch = parse(key, value)?,
            "mode" => {
                g.mode = match value {
                    "think" => Mode::Think,
                    "no-think" | "nothink" => Mode::NoThink,
                    other => {
                        return Err(Error::invalid(key, format!("{other:?} is not think or no-think")))
                    }
                }
            }
            "think_slots" => g.think_slots = parse(key, value)?,
            "think_vocab" => g.think_vocab = parse(key, value)?,
            "structures" => g.structures = parse(key, value)?,
            "init_scale" => g.init_scale = parse(key, value)?,
            "w_format" => g.reward_weights.format = parse(key, value)?,
            "w_accuracy" => g.reward_weights.accuracy = parse(key, value)?,
            "eval_every" => g.eval_every = parse(key, value)?,
            "trainer" => self.trainer = value.parse()?,
            "compare" => {
                self.compare = value
                    .split(',')
                    .map(str::trim)
                    .filter(|v| !v.is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "axis" => {
                self.axis = match value {
                    "domain" => Axis::Domain,
                    "task" => Axis::Task,
                    other => return Err(Error::invalid(key, format!("{other:?} is not domain or task"))),
                }
            }
            "train_domain" => self.train_domain = (!value.is_empty()).then(|| value.to_string()),
            "split" => {
                self.split = match value {
                    "train" => SplitPart::Train,
                    "test" => SplitPart::Test,
                    "all" => SplitPart::All,
                    other => return Err(Error::invalid(key, format!("{other:?} is not train, test or all"))),
                }
            }
            "per_domain" => self.per_domain = parse(key, value)?,
            "jobs" => self.jobs = parse(key, value)?,
            "data" => self.data = opt_path(value),
            "checkpoint" => self.checkpoint = opt_path(value),
            "log" => self.log = opt_path(value),
            "out" => self.out = PathBuf::from(value),
            other => return Err(Error::invalid(other, "unknown configuration key")),
        }
        Ok(())
    }

    /// Applies a config file body; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, source: &Path) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: source.to_path_buf(),
                line: n + 1,
                reason: "expected key = value".into(),
            })?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str, source: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text, source)?;
        Ok(cfg)
    }

    pub fn weights(&self) -> RewardWeights {
        self.grpo.reward_weights
    }

    pub fn to_conf(&self) -> String {
        let s = &self.suite;
        let g = &self.grpo;
        let pairs: Vec<(&str, String)> = vec![
            ("seed", s.seed.to_string()),
            ("domains", s.num_domains.to_string()),
            ("items", s.items_per_domain.to_string()),
            ("features", s.feature_dim.to_string()),
            ("options", s.num_options.to_string()),
            ("alpha", format!("{:?}", s.alpha)),
            ("group_size", g.group_size.to_string()),
            ("temp", format!("{:?}", g.temperature)),
            ("clip_eps", format!("{:?}", g.clip_eps)),
            ("kl_beta", format!("{:?}", g.kl_beta)),
            ("adv_eps", format!("{:?}", g.adv_eps)),
            ("lr", format!("{:?}", g.lr)),
            ("epochs", g.epochs.to_string()),
            ("steps", g.max_steps.map_or("none".into(), |v| v.to_string())),
            ("batch", g.batch.to_string()),
            ("mode", mode_name(g.mode).into()),
            ("think_slots", g.think_slots.to_string()),
            ("think_vocab", g.think_vocab.to_string()),
            ("structures", g.structures.to_string()),
            ("init_scale", format!("{:?}", g.init_scale)),
            ("w_format", format!("{:?}", g.reward_weights.format)),
            ("w_accuracy", format!("{:?}", g.reward_weights.accuracy)),
            ("eval_every", g.eval_every.to_string()),
            ("trainer", self.trainer.name().into()),
            (
                "compare",
                self.compare.iter().map(|t| t.name()).collect::<Vec<_>>().join(","),
            ),
            (
                "axis",
                match self.axis {
                    Axis::Domain => "domain",
                    Axis::Task => "task",
                }
                .into(),
            ),
            ("train_domain", self.train_domain.clone().unwrap_or_default()),
            (
                "split",
                match self.split {
                    SplitPart::Train => "train",
                    SplitPart::Test => "test",
                    SplitPart::All => "all",
                }
                .into(),
            ),
            ("per_domain", self.per_domain.to_string()),
            ("jobs", self.jobs.to_string()),
            ("data", path_str(&self.data)),
            ("checkpoint", path_str(&self.checkpoint)),
            ("log", path_str(&self.log)),
            ("out", self.out.display().to_string()),
        ];
        let mut out = String::new();
        for (k, v) in pairs {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::default();
        for (k, v) in [
            ("seed", "7"),
            ("alpha", "0.3"),
            ("group-size", "6"),
            ("temp", "0.9"),
            ("steps", "120"),
            ("mode", "no-think"),
            ("compare", "grpo,sft"),
            ("axis", "task"),
            ("train_domain", "CT"),
            ("data", "data/x"),
            ("per_domain", "true"),
            ("lr", "0.1"),
        ] {
            cfg.set(k, v).unwrap();
        }
        let back = RunConfig::from_text(&cfg.to_conf(), Path::new("r.conf")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_conf(), cfg.to_conf());
    }

    #[test]
    fn unknown_and_bad_values_rejected() {
        let mut cfg = RunConfig::default();
        assert!(cfg.set("colour", "red").unwrap_err().to_string().contains("colour"));
        assert!(cfg.set("alpha", "x").unwrap_err().to_string().contains("alpha"));
        assert!(cfg.set("trainer", "ppo").is_err());
        let err = RunConfig::from_text("seed 3\n", Path::new("c.conf")).unwrap_err();
        assert!(err.to_string().contains("c.conf:1"));
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::from_text("# run\n\nlr = 0.2 # faster\n", Path::new("c")).unwrap();
        assert_eq!(cfg.grpo.lr, 0.2);
    }
}
