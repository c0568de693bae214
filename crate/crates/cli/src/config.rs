//! Experiment configuration: `key = value` lines grouped under `[section]`
//! headers. `#` starts a comment. Unknown sections or keys are errors.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use flowstrike::attack::{QueryStatistic, StatsMode};
use flowstrike::data::Vocabulary;
use flowstrike::whitebox::{AttackParams, Collector};

use crate::error::{CliError, Result};

/// Every recognised key with its default, as printed by `--help`.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("data", "source", "synthetic | cifar"),
    ("data", "cifar_train", "path to a CIFAR-10 binary batch (source = cifar)"),
    ("data", "cifar_test", "path to the CIFAR-10 test batch (source = cifar)"),
    ("data", "size", "synthetic image side, 16 or 32 (default 32)"),
    ("data", "classes", "synthetic class count (default 10)"),
    ("data", "train", "training examples (default 4000)"),
    ("data", "test", "test examples (default 1000)"),
    ("data", "vocab", "synthetic shapes: primary | secondary (default primary)"),
    ("data", "seed", "dataset and split seed (default 1)"),
    ("models", "zoo_seeds", "target model seeds (default 10,11,12)"),
    ("models", "surrogate_seeds", "white-box collector seeds (default 20,21)"),
    ("models", "condition_seed", "condition network seed (default 30)"),
    ("models", "epochs", "classifier epochs (default 5)"),
    ("models", "lr", "classifier learning rate (default 0.002)"),
    ("models", "batch_size", "classifier batch size (default 32)"),
    ("collect", "method", "pgd | mifgsm | fgsm (default mifgsm)"),
    ("collect", "epsilons", "L-inf budgets in 1/255 units (default 16)"),
    ("collect", "step", "step size in 1/255 units (default 2)"),
    ("collect", "iterations", "attack iterations (default 10 at eps <= 8, else 20)"),
    ("collect", "momentum", "MI-FGSM decay (default 1.0)"),
    ("collect", "random_start", "uniform start inside the ball (default true)"),
    ("collect", "keep_failures", "also store perturbations that fool no collector (default false)"),
    ("collect", "seed", "collection seed (default 3)"),
    ("flow", "levels", "L (default 2)"),
    ("flow", "steps", "K (default 2)"),
    ("flow", "hidden", "coupling network width (default 16)"),
    ("flow", "seed", "parameter init seed (default 5)"),
    ("train", "lr", "Adam learning rate (default 0.0001)"),
    ("train", "beta1", "Adam beta1 (default 0.9)"),
    ("train", "beta2", "Adam beta2 (default 0.999)"),
    ("train", "iterations", "training iterations (default 2000)"),
    ("train", "batch_size", "pairs per iteration (default 32)"),
    ("train", "mse", "reconstruction step on/off (default true)"),
    ("train", "checkpoint_every", "checkpoint period, 0 = only at the end (default 500)"),
    ("train", "seed", "batch and latent sampling seed (default 0)"),
    ("attack", "budgets", "query budgets, ascending (default 25,50,100)"),
    ("attack", "examples", "test examples attacked (default 500)"),
    ("attack", "target", "index into zoo_seeds of the attacked model (default 0)"),
    ("attack", "stats", "per-dim | scalar | standard (default per-dim)"),
    ("attack", "query_statistic", "successes | all (default successes)"),
    ("attack", "count_eligibility", "charge the clean check to the budget (default false)"),
    ("attack", "baseline", "also run the random-noise baseline (default true)"),
    ("attack", "seed", "attack sampling seed (default 7)"),
];

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic { size: usize, classes: usize, vocab: Vocabulary },
    Cifar { train: PathBuf, test: PathBuf },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelsConfig {
    pub zoo_seeds: Vec<u64>,
    pub surrogate_seeds: Vec<u64>,
    pub condition_seed: u64,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CollectConfig {
    pub method: Collector,
    /// In 1/255 units.
    pub epsilons: Vec<u32>,
    pub step: Option<f32>,
    pub iterations: Option<usize>,
    pub momentum: f32,
    pub random_start: bool,
    pub keep_failures: bool,
    pub seed: u64,
}

impl CollectConfig {
    pub fn params(&self, eps_units: u32) -> AttackParams {
        let epsilon = eps_units as f32 / 255.0;
        let mut p = AttackParams::pgd_default(epsilon);
        if let Some(step) = self.step {
            p.step_size = step / 255.0;
        }
        if let Some(it) = self.iterations {
            p.iterations = it;
        }
        p.momentum = self.momentum;
        p.random_start = self.random_start;
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowSettings {
    pub levels: usize,
    pub steps: usize,
    pub hidden: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub budgets: Vec<u64>,
    pub examples: usize,
    pub target: usize,
    pub stats: StatsMode,
    pub query_statistic: QueryStatistic,
    pub count_eligibility: bool,
    pub baseline: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub data: DataConfig,
    pub models: ModelsConfig,
    pub collect: CollectConfig,
    pub flow: FlowSettings,
    pub train: flowstrike::train::TrainConfig,
    pub attack: AttackConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::from_text("").expect("defaults parse")
    }
}

type Table = BTreeMap<(String, String), (usize, String)>;

fn parse_table(text: &str) -> Result<Table> {
    let mut table = Table::new();
    let mut section = String::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let lineno = n + 1;
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| CliError::Config(format!("line {lineno}: unterminated section header")))?
                .trim();
            if !KEYS.iter().any(|(s, _, _)| *s == name) {
                return Err(CliError::Config(format!("line {lineno}: unknown section [{name}]")));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("line {lineno}: expected key = value")))?;
        let key = k.trim().to_string();
        if section.is_empty() {
            return Err(CliError::Config(format!("line {lineno}: key {key:?} outside any section")));
        }
        if !KEYS.iter().any(|(s, kk, _)| *s == section && *kk == key) {
            return Err(CliError::Config(format!("line {lineno}: unknown key {key:?} in [{section}]")));
        }
        if table.insert((section.clone(), key.clone()), (lineno, v.trim().to_string())).is_some() {
            return Err(CliError::Config(format!("line {lineno}: duplicate key {key:?} in [{section}]")));
        }
    }
    Ok(table)
}

struct Reader {
    table: Table,
}

impl Reader {
    fn raw(&self, section: &str, key: &str) -> Option<&(usize, String)> {
        self.table.get(&(section.to_string(), key.to_string()))
    }

    fn get<T: std::str::FromStr>(&self, section: &str, key: &str, default: T) -> Result<T> {
        match self.raw(section, key) {
            None => Ok(default),
            Some((line, v)) => v
                .parse()
                .map_err(|_| CliError::Config(format!("line {line}: cannot parse {section}.{key} = {v:?}"))),
        }
    }

    fn opt<T: std::str::FromStr>(&self, section: &str, key: &str) -> Result<Option<T>> {
        match self.raw(section, key) {
            None => Ok(None),
            Some((line, v)) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("line {line}: cannot parse {section}.{key} = {v:?}"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, section: &str, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.raw(section, key) {
            None => Ok(default),
            Some((_, v)) if v.is_empty() => Ok(Vec::new()),
            Some((line, v)) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| CliError::Config(format!("line {line}: bad list item {s:?} in {section}.{key}")))
                })
                .collect(),
        }
    }

    fn text(&self, section: &str, key: &str) -> Option<String> {
        self.raw(section, key).map(|(_, v)| v.clone())
    }
}

impl Config {
    pub fn from_text(text: &str) -> Result<Self> {
        let r = Reader { table: parse_table(text)? };

        let source = match r.text("data", "source").as_deref().unwrap_or("synthetic") {
            "synthetic" => DataSource::Synthetic {
                size: r.get("data", "size", 32)?,
                classes: r.get("data", "classes", 10)?,
                vocab: match r.text("data", "vocab").as_deref().unwrap_or("primary") {
                    "primary" => Vocabulary::Primary,
                    "secondary" => Vocabulary::Secondary,
                    other => return Err(CliError::Config(format!("unknown vocab {other:?}"))),
                },
            },
            "cifar" => {
                let path = |k: &str| {
                    r.text("data", k)
                        .map(PathBuf::from)
                        .ok_or_else(|| CliError::Usage(format!("source = cifar needs data.{k}")))
                };
                DataSource::Cifar {
                    train: path("cifar_train")?,
                    test: path("cifar_test")?,
                }
            }
            other => return Err(CliError::Config(format!("unknown data source {other:?}"))),
        };
        let data = DataConfig {
            source,
            train: r.get("data", "train", 4000)?,
            test: r.get("data", "test", 1000)?,
            seed: r.get("data", "seed", 1)?,
        };

        let models = ModelsConfig {
            zoo_seeds: r.list("models", "zoo_seeds", vec![10, 11, 12])?,
            surrogate_seeds: r.list("models", "surrogate_seeds", vec![20, 21])?,
            condition_seed: r.get("models", "condition_seed", 30)?,
            epochs: r.get("models", "epochs", 5)?,
            lr: r.get("models", "lr", 2e-3)?,
            batch_size: r.get("models", "batch_size", 32)?,
        };

        let collect = CollectConfig {
            method: r.get("collect", "method", Collector::MiFgsm)?,
            epsilons: r.list("collect", "epsilons", vec![16])?,
            step: r.opt("collect", "step")?,
            iterations: r.opt("collect", "iterations")?,
            momentum: r.get("collect", "momentum", 1.0)?,
            random_start: r.get("collect", "random_start", true)?,
            keep_failures: r.get("collect", "keep_failures", false)?,
            seed: r.get("collect", "seed", 3)?,
        };

        let flow = FlowSettings {
            levels: r.get("flow", "levels", 2)?,
            steps: r.get("flow", "steps", 2)?,
            hidden: r.get("flow", "hidden", 16)?,
            seed: r.get("flow", "seed", 5)?,
        };

        let d = flowstrike::train::TrainConfig::default();
        let train = flowstrike::train::TrainConfig {
            lr: r.get("train", "lr", d.lr)?,
            beta1: r.get("train", "beta1", d.beta1)?,
            beta2: r.get("train", "beta2", d.beta2)?,
            max_iters: r.get("train", "iterations", d.max_iters)?,
            batch_size: r.get("train", "batch_size", d.batch_size)?,
            seed: r.get("train", "seed", d.seed)?,
            mse_enabled: r.get("train", "mse", d.mse_enabled)?,
            checkpoint_every: r.get("train", "checkpoint_every", d.checkpoint_every)?,
        };

        let attack = AttackConfig {
            budgets: r.list("attack", "budgets", vec![25, 50, 100])?,
            examples: r.get("attack", "examples", 500)?,
            target: r.get("attack", "target", 0)?,
            stats: r.get("attack", "stats", StatsMode::PerDimension)?,
            query_statistic: match r.text("attack", "query_statistic").as_deref().unwrap_or("successes") {
                "successes" => QueryStatistic::SuccessesOnly,
                "all" => QueryStatistic::AllAttempts,
                other => return Err(CliError::Config(format!("unknown query_statistic {other:?}"))),
            },
            count_eligibility: r.get("attack", "count_eligibility", false)?,
            baseline: r.get("attack", "baseline", true)?,
            seed: r.get("attack", "seed", 7)?,
        };

        let cfg = Self {
            data,
            models,
            collect,
            flow,
            train,
            attack,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.models.zoo_seeds.is_empty() || self.models.surrogate_seeds.is_empty() {
            return bad("zoo_seeds and surrogate_seeds must be non-empty".into());
        }
        if self.attack.target >= self.models.zoo_seeds.len() {
            return bad(format!("attack.target {} is outside the zoo", self.attack.target));
        }
        if self.attack.budgets.is_empty() || self.attack.budgets.windows(2).any(|w| w[0] >= w[1]) || self.attack.budgets[0] == 0 {
            return bad("attack.budgets must be positive and strictly ascending".into());
        }
        if self.collect.epsilons.is_empty() || self.collect.epsilons.windows(2).any(|w| w[0] >= w[1]) {
            return bad("collect.epsilons must be non-empty and strictly ascending".into());
        }
        for &e in &self.collect.epsilons {
            self.collect.params(e).validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.data.train == 0 || self.data.test == 0 {
            return bad("data.train and data.test must be positive".into());
        }
        Ok(())
    }

    /// Overrides every seed-bearing field derived from `--seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.attack.seed = seed.wrapping_add(7);
        self.collect.seed = seed.wrapping_add(3);
        self.flow.seed = seed.wrapping_add(5);
    }

    pub fn max_budget(&self) -> u64 {
        *self.attack.budgets.last().expect("validated")
    }
}

/// Help text listing every key.
pub fn keys_help() -> String {
    let mut s = String::from("Config keys (key = value under [section]):\n");
    let mut last = "";
    for (sec, key, doc) in KEYS {
        if *sec != last {
            s.push_str(&format!("  [{sec}]\n"));
            last = sec;
        }
        s.push_str(&format!("    {key:<18} {doc}\n"));
    }
    s
}
