//! The six commands. Each reads its inputs from the output directory, so
//! they can run one after another or be re-run independently.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use flowstrike::attack::{
    attack_examples, compute_latent_stats, evaluate, off_diagonal_mean, transfer_matrix, AttackRecord, AttackSettings,
    GaussianStats, Method, MetricsReport, StatsMode,
};
use flowstrike::data::{gen_synthetic_vocab, load_cifar_batch, load_pairs, save_pairs, split, Dataset, Example};
use flowstrike::flow::{FlowConfig, FlowModel};
use flowstrike::models::{accuracy, train_classifier, ClassifierConfig, QueryOracle, SmallCnn};
use flowstrike::train::{history_csv, load_checkpoint, save_checkpoint, train_from, TrainState, TrainingSet};
use flowstrike::whitebox::{collect_pairs_with, CollectionReport};

use crate::config::{Config, DataSource};
use crate::error::{CliError, Result};

/// File layout under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn zoo(&self, i: usize) -> PathBuf {
        self.root.join(format!("zoo_{i}.tff"))
    }

    pub fn surrogate(&self, i: usize) -> PathBuf {
        self.root.join(format!("surrogate_{i}.tff"))
    }

    pub fn condition(&self) -> PathBuf {
        self.root.join("condition.tff")
    }

    pub fn accuracy(&self) -> PathBuf {
        self.root.join("accuracy.json")
    }

    pub fn pairs(&self, eps: u32) -> PathBuf {
        self.root.join(format!("pairs_eps{eps}.tff"))
    }

    pub fn collection(&self, eps: u32) -> PathBuf {
        self.root.join(format!("collection_eps{eps}.json"))
    }

    pub fn flow(&self, eps: u32) -> PathBuf {
        self.root.join(format!("flow_eps{eps}.tff"))
    }

    pub fn checkpoint(&self, eps: u32) -> PathBuf {
        self.root.join(format!("flow_eps{eps}.ckpt.tff"))
    }

    pub fn stats(&self, eps: u32) -> PathBuf {
        self.root.join(format!("stats_eps{eps}.tff"))
    }

    pub fn loss(&self, eps: u32) -> PathBuf {
        self.root.join(format!("loss_eps{eps}.csv"))
    }

    pub fn metrics(&self, eps: u32, method: &str) -> PathBuf {
        self.root.join(format!("metrics_eps{eps}_{method}.json"))
    }

    pub fn table(&self, eps: u32) -> PathBuf {
        self.root.join(format!("attack_eps{eps}.csv"))
    }

    pub fn transfer(&self, eps: u32, method: &str) -> PathBuf {
        self.root.join(format!("transfer_eps{eps}_{method}.csv"))
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Missing(path.display().to_string()))
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Usage(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// Train and test sets described by the config.
pub fn load_data(cfg: &Config) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    match &d.source {
        DataSource::Synthetic { size, classes, vocab } => {
            let all = gen_synthetic_vocab(*classes, *size, d.train + d.test, d.seed, *vocab)?;
            let frac = d.train as f64 / (d.train + d.test) as f64;
            Ok(split(&all, frac, d.seed)?)
        }
        DataSource::Cifar { train, test } => {
            for p in [train, test] {
                if !p.exists() {
                    return Err(CliError::Usage(format!("dataset file {} does not exist", p.display())));
                }
            }
            let tr = load_cifar_batch(train)?;
            let te = load_cifar_batch(test)?;
            Ok((tr.take(d.train), te.take(d.test)))
        }
    }
}

/// Examples handed to the attack: the first `attack.examples` test images.
pub fn attack_set(cfg: &Config, test: &Dataset) -> Vec<Example> {
    test.examples.iter().take(cfg.attack.examples).cloned().collect()
}

fn classifier_config(cfg: &Config, seed: u64) -> ClassifierConfig {
    ClassifierConfig {
        epochs: cfg.models.epochs,
        lr: cfg.models.lr,
        batch_size: cfg.models.batch_size,
        seed,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AccuracyReport {
    pub zoo: Vec<f64>,
    pub surrogates: Vec<f64>,
    pub condition: f64,
}

/// Every trained network: the target zoo, the white-box surrogates and the
/// condition network.
#[derive(Debug, Clone)]
pub struct Models {
    pub zoo: Vec<SmallCnn>,
    pub surrogates: Vec<SmallCnn>,
    pub condition: SmallCnn,
}

impl Models {
    pub fn train(cfg: &Config, train: &Dataset) -> Result<Self> {
        let fit = |seed| -> Result<SmallCnn> { Ok(train_classifier(train, &classifier_config(cfg, seed))?.0) };
        Ok(Self {
            zoo: cfg.models.zoo_seeds.iter().map(|&s| fit(s)).collect::<Result<_>>()?,
            surrogates: cfg.models.surrogate_seeds.iter().map(|&s| fit(s)).collect::<Result<_>>()?,
            condition: fit(cfg.models.condition_seed)?,
        })
    }

    pub fn load(cfg: &Config, layout: &Layout) -> Result<Self> {
        let load = |p: PathBuf| -> Result<SmallCnn> {
            require(&p)?;
            Ok(SmallCnn::load(&p)?)
        };
        Ok(Self {
            zoo: (0..cfg.models.zoo_seeds.len()).map(|i| load(layout.zoo(i))).collect::<Result<_>>()?,
            surrogates: (0..cfg.models.surrogate_seeds.len())
                .map(|i| load(layout.surrogate(i)))
                .collect::<Result<_>>()?,
            condition: load(layout.condition())?,
        })
    }

    pub fn save(&self, layout: &Layout) -> Result<()> {
        for (i, m) in self.zoo.iter().enumerate() {
            m.save(layout.zoo(i))?;
        }
        for (i, m) in self.surrogates.iter().enumerate() {
            m.save(layout.surrogate(i))?;
        }
        self.condition.save(layout.condition())?;
        Ok(())
    }

    pub fn accuracy(&self, test: &Dataset) -> Result<AccuracyReport> {
        Ok(AccuracyReport {
            zoo: self.zoo.iter().map(|m| accuracy(m, test)).collect::<Result<_, _>>()?,
            surrogates: self.surrogates.iter().map(|m| accuracy(m, test)).collect::<Result<_, _>>()?,
            condition: accuracy(&self.condition, test)?,
        })
    }
}

pub fn flow_config(cfg: &Config, in_shape: [usize; 3], cond_shape: [usize; 3]) -> FlowConfig {
    FlowConfig {
        levels: cfg.flow.levels,
        steps: cfg.flow.steps,
        in_shape,
        cond_shape,
        hidden: cfg.flow.hidden,
    }
}

/// Trains (or resumes) a flow. `on_checkpoint` sees every snapshot.
pub fn fit_flow(
    cfg: &Config,
    data: &TrainingSet,
    resume: Option<(FlowModel, TrainState)>,
    on_checkpoint: impl FnMut(&FlowModel, &TrainState) -> flowstrike::Result<()>,
) -> Result<(FlowModel, TrainState)> {
    let fc = flow_config(cfg, data.shape, data.cond_shape);
    let (mut flow, mut state) = match resume {
        Some((flow, state)) => {
            if flow.config != fc {
                return Err(CliError::Usage("checkpoint was trained with a different flow config".into()));
            }
            (flow, state)
        }
        None => {
            let flow = FlowModel::new(fc, cfg.flow.seed)?;
            let state = TrainState::new(&flow);
            (flow, state)
        }
    };
    train_from(&mut flow, &mut state, data, &cfg.train, on_checkpoint)?;
    flow.set_trainable(false)?;
    Ok((flow, state))
}

pub fn latent_stats(flow: &FlowModel, data: &TrainingSet, mode: StatsMode) -> Result<GaussianStats> {
    Ok(compute_latent_stats(flow, data, mode)?)
}

/// DTA records against `target` at the largest budget.
pub fn run_dta(
    cfg: &Config,
    flow: &FlowModel,
    stats: &GaussianStats,
    cond: &SmallCnn,
    target: &SmallCnn,
    examples: &[Example],
    eps: u32,
) -> Result<Vec<AttackRecord>> {
    let method = Method::Dta {
        flow,
        stats,
        cond_net: cond,
    };
    run(cfg, &method, target, examples, eps)
}

pub fn run_baseline(cfg: &Config, target: &SmallCnn, examples: &[Example], eps: u32) -> Result<Vec<AttackRecord>> {
    run(cfg, &Method::RandomNoise, target, examples, eps)
}

fn run(cfg: &Config, method: &Method, target: &SmallCnn, examples: &[Example], eps: u32) -> Result<Vec<AttackRecord>> {
    let mut oracle = QueryOracle::new(target.clone(), None);
    let settings = AttackSettings {
        epsilon: eps as f32 / 255.0,
        budget: cfg.max_budget(),
        seed: cfg.attack.seed,
        count_eligibility: cfg.attack.count_eligibility,
    };
    Ok(attack_examples(method, &mut oracle, examples, &settings)?.records)
}

pub fn report(cfg: &Config, records: &[AttackRecord]) -> Result<MetricsReport> {
    Ok(evaluate(records, &cfg.attack.budgets, cfg.attack.query_statistic)?)
}

/// Transfer matrix of adversarials produced against each zoo model.
pub fn transfer(per_source: &[Vec<AttackRecord>], examples: &[Example], zoo: &[SmallCnn]) -> Result<Vec<Vec<f64>>> {
    let refs: Vec<&[AttackRecord]> = per_source.iter().map(|r| r.as_slice()).collect();
    Ok(transfer_matrix(&refs, examples, zoo)?)
}

pub fn matrix_csv(m: &[Vec<f64>]) -> String {
    let n = m.len();
    let mut s = String::from("source\\target");
    for j in 0..n {
        s.push_str(&format!(",zoo_{j}"));
    }
    s.push('\n');
    for (i, row) in m.iter().enumerate() {
        s.push_str(&format!("zoo_{i}"));
        for v in row {
            s.push_str(&format!(",{:.2}", 100.0 * v));
        }
        s.push('\n');
    }
    s
}

fn training_set(cfg: &Config, layout: &Layout, cond: &SmallCnn, eps: u32) -> Result<TrainingSet> {
    let _ = cfg;
    let p = layout.pairs(eps);
    require(&p)?;
    Ok(TrainingSet::new(&load_pairs(&p)?, cond)?)
}

fn load_flow(layout: &Layout, eps: u32) -> Result<FlowModel> {
    let p = layout.flow(eps);
    require(&p)?;
    Ok(FlowModel::load(&p)?)
}

fn load_stats(layout: &Layout, eps: u32) -> Result<GaussianStats> {
    let p = layout.stats(eps);
    require(&p)?;
    Ok(GaussianStats::load(&p)?)
}

fn prepare(layout: &Layout) -> Result<()> {
    fs::create_dir_all(&layout.root)?;
    Ok(())
}

pub fn cmd_train_classifier(cfg: &Config, layout: &Layout) -> Result<AccuracyReport> {
    prepare(layout)?;
    let (train, test) = load_data(cfg)?;
    let models = Models::train(cfg, &train)?;
    models.save(layout)?;
    let acc = models.accuracy(&test)?;
    write_json(&layout.accuracy(), &acc)?;
    Ok(acc)
}

pub fn cmd_collect_adv(cfg: &Config, layout: &Layout) -> Result<Vec<CollectionReport>> {
    prepare(layout)?;
    let models = Models::load(cfg, layout)?;
    let (train, _) = load_data(cfg)?;
    let mut reports = Vec::new();
    for &eps in &cfg.collect.epsilons {
        let params = cfg.collect.params(eps);
        let (pairs, rep) = collect_pairs_with(
            &train,
            &models.surrogates,
            cfg.collect.method,
            &params,
            cfg.collect.seed,
            cfg.collect.keep_failures,
        )?;
        write_json(&layout.collection(eps), &rep)?;
        if rep.empty {
            return Err(flowstrike::Error::NoPairs.into());
        }
        save_pairs(&pairs, layout.pairs(eps))?;
        reports.push(rep);
    }
    Ok(reports)
}

/// Resumes from the epsilon's checkpoint when one exists.
pub fn cmd_train_flow(cfg: &Config, layout: &Layout) -> Result<()> {
    prepare(layout)?;
    let cond = Models::load(cfg, layout)?.condition;
    for &eps in &cfg.collect.epsilons {
        let data = training_set(cfg, layout, &cond, eps)?;
        let ckpt = layout.checkpoint(eps);
        let resume = if ckpt.exists() { Some(load_checkpoint(&ckpt)?) } else { None };
        let (flow, state) = fit_flow(cfg, &data, resume, |f, s| save_checkpoint(&ckpt, f, s))?;
        flow.save(layout.flow(eps))?;
        fs::write(layout.loss(eps), history_csv(&state.history))?;
        latent_stats(&flow, &data, cfg.attack.stats)?.save(layout.stats(eps))?;
    }
    Ok(())
}

/// Recomputes the latent statistics with the configured mode.
pub fn cmd_stats(cfg: &Config, layout: &Layout) -> Result<Vec<GaussianStats>> {
    let cond = Models::load(cfg, layout)?.condition;
    let mut out = Vec::new();
    for &eps in &cfg.collect.epsilons {
        let flow = load_flow(layout, eps)?;
        let data = training_set(cfg, layout, &cond, eps)?;
        let stats = latent_stats(&flow, &data, cfg.attack.stats)?;
        stats.save(layout.stats(eps))?;
        out.push(stats);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub eps: u32,
    pub dta: MetricsReport,
    pub baseline: Option<MetricsReport>,
}

pub fn cmd_attack(cfg: &Config, layout: &Layout) -> Result<Vec<AttackOutcome>> {
    let models = Models::load(cfg, layout)?;
    let target = &models.zoo[cfg.attack.target];
    let (_, test) = load_data(cfg)?;
    let examples = attack_set(cfg, &test);
    let mut out = Vec::new();
    for &eps in &cfg.collect.epsilons {
        let flow = load_flow(layout, eps)?;
        let stats = load_stats(layout, eps)?;
        let dta = report(cfg, &run_dta(cfg, &flow, &stats, &models.condition, target, &examples, eps)?)?;
        fs::write(layout.metrics(eps, "dta"), dta.to_json()? + "\n")?;
        let mut table = dta.to_csv("dta");
        let baseline = if cfg.attack.baseline {
            let b = report(cfg, &run_baseline(cfg, target, &examples, eps)?)?;
            fs::write(layout.metrics(eps, "baseline"), b.to_json()? + "\n")?;
            table.push_str(b.to_csv("baseline").lines().skip(1).map(|l| format!("{l}\n")).collect::<String>().as_str());
            Some(b)
        } else {
            None
        };
        fs::write(layout.table(eps), table)?;
        out.push(AttackOutcome { eps, dta, baseline });
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub eps: u32,
    pub dta: Vec<Vec<f64>>,
    pub baseline: Option<Vec<Vec<f64>>>,
}

impl TransferOutcome {
    pub fn dta_mean(&self) -> f64 {
        off_diagonal_mean(&self.dta)
    }

    pub fn baseline_mean(&self) -> Option<f64> {
        self.baseline.as_deref().map(off_diagonal_mean)
    }
}

pub fn cmd_eval_transfer(cfg: &Config, layout: &Layout) -> Result<Vec<TransferOutcome>> {
    if cfg.models.zoo_seeds.len() < 2 {
        return Err(CliError::Usage("transfer evaluation needs at least 2 zoo models".into()));
    }
    let models = Models::load(cfg, layout)?;
    let (_, test) = load_data(cfg)?;
    let examples = attack_set(cfg, &test);
    let mut out = Vec::new();
    for &eps in &cfg.collect.epsilons {
        let flow = load_flow(layout, eps)?;
        let stats = load_stats(layout, eps)?;
        let dta_records = models
            .zoo
            .iter()
            .map(|t| run_dta(cfg, &flow, &stats, &models.condition, t, &examples, eps))
            .collect::<Result<Vec<_>>>()?;
        let dta = transfer(&dta_records, &examples, &models.zoo)?;
        fs::write(layout.transfer(eps, "dta"), matrix_csv(&dta))?;
        let baseline = if cfg.attack.baseline {
            let recs = models
                .zoo
                .iter()
                .map(|t| run_baseline(cfg, t, &examples, eps))
                .collect::<Result<Vec<_>>>()?;
            let m = transfer(&recs, &examples, &models.zoo)?;
            fs::write(layout.transfer(eps, "baseline"), matrix_csv(&m))?;
            Some(m)
        } else {
            None
        };
        out.push(TransferOutcome { eps, dta, baseline });
    }
    Ok(out)
}
