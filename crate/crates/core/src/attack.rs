//! Latent statistics, clipped sampling, the hard-label query loop, the
//! random-noise baseline and evaluation metrics.

use flowstrike_tensor::tff::Record;
use flowstrike_tensor::{Prng, Tensor};
use serde::Serialize;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::flow::{FlowModel, LatentVec};
use crate::models::{QueryOracle, SmallCnn};
use crate::train::{condition_features, TrainingSet};

pub const SIGMA_FLOOR: f32 = 1e-3;

/// How the sampling distribution is summarised from the encoded pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StatsMode {
    PerDimension,
    Scalar,
    /// Ignore the data and sample from N(0, 1).
    Standard,
}

impl std::str::FromStr for StatsMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-dim" | "per_dimension" | "vector" => Ok(Self::PerDimension),
            "scalar" => Ok(Self::Scalar),
            "standard" | "normal" => Ok(Self::Standard),
            other => Err(Error::InvalidInput(format!("unknown stats mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mu: Vec<f32>,
    pub sigma: Vec<f32>,
}

impl GaussianStats {
    pub fn standard(dim: usize) -> Self {
        Self {
            mu: vec![0.0; dim],
            sigma: vec![1.0; dim],
        }
    }

    /// Elementwise mean and population std of `rows` (each of length `dim`),
    /// with the std floored at [`SIGMA_FLOOR`].
    pub fn from_latents(rows: &[Vec<f32>], mode: StatsMode) -> Result<Self> {
        let dim = rows
            .first()
            .ok_or_else(|| Error::InvalidInput("no latents to summarise".into()))?
            .len();
        if mode == StatsMode::Standard {
            return Ok(Self::standard(dim));
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0f64; dim];
        for r in rows {
            if r.len() != dim {
                return Err(Error::InvalidInput("latents of unequal length".into()));
            }
            mean.iter_mut().zip(r).for_each(|(m, &v)| *m += v as f64);
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0f64; dim];
        for r in rows {
            var.iter_mut()
                .zip(r.iter().zip(&mean))
                .for_each(|(s, (&v, m))| *s += (v as f64 - m).powi(2));
        }
        var.iter_mut().for_each(|s| *s /= n);
        if mode == StatsMode::Scalar {
            let m = mean.iter().sum::<f64>() / dim as f64;
            // pooled population variance around the scalar mean
            let v = var.iter().zip(&mean).map(|(s, mi)| s + (mi - m).powi(2)).sum::<f64>() / dim as f64;
            mean = vec![m; dim];
            var = vec![v; dim];
        }
        Ok(Self {
            mu: mean.iter().map(|&m| m as f32).collect(),
            sigma: var.iter().map(|&v| (v.sqrt() as f32).max(SIGMA_FLOOR)).collect(),
        })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn to_records(&self) -> Result<Vec<Record>> {
        Ok(vec![
            Record::new(vec![self.dim()], self.mu.clone())?,
            Record::new(vec![self.dim()], self.sigma.clone())?,
        ])
    }

    pub fn from_records(recs: &[Record]) -> Result<Self> {
        let [mu, sigma] = recs else {
            return Err(Error::Format("stats file must hold two records".into()));
        };
        if mu.shape.len() != 1 || mu.shape != sigma.shape {
            return Err(Error::Format("stats records have mismatched shapes".into()));
        }
        if sigma.data.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Format("stats sigma must be positive".into()));
        }
        Ok(Self {
            mu: mu.data.clone(),
            sigma: sigma.data.clone(),
        })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        Ok(flowstrike_tensor::tff::write_records(path, &self.to_records()?)?)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_records(&flowstrike_tensor::tff::read_records(path)?)
    }
}

/// Runs `f` with the flow's parameters excluded from gradient tracking.
pub fn without_grad<T>(flow: &FlowModel, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let was: Vec<bool> = flow.params().iter().map(Tensor::requires_grad).collect();
    flow.set_trainable(false)?;
    let out = f();
    for (p, on) in flow.params().iter().zip(was) {
        p.set_requires_grad(on)?;
    }
    out
}

/// Encodes every training adversarial with its condition and summarises
/// the latents.
pub fn compute_latent_stats(flow: &FlowModel, data: &TrainingSet, mode: StatsMode) -> Result<GaussianStats> {
    if data.len == 0 {
        return Err(Error::NoPairs);
    }
    let rows = without_grad(flow, || {
        let mut rows = Vec::with_capacity(data.len);
        let idx: Vec<usize> = (0..data.len).collect();
        for chunk in idx.chunks(64) {
            let (_, adv, cond) = data.batch(chunk)?;
            let (z, _) = flow.encode_frozen(&adv, &cond)?;
            let flat = z.flatten()?;
            let d = flat.shape()[1];
            rows.extend(flat.data().chunks(d).map(<[f32]>::to_vec));
        }
        Ok(rows)
    })?;
    GaussianStats::from_latents(&rows, mode)
}

/// `n` draws of `mu + sigma * e` with `e ~ N(0, I)`, flattened `[n * D]`,
/// drawn one example after another.
pub fn sample_flat(stats: &GaussianStats, n: usize, rng: &mut Prng) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * stats.dim());
    for _ in 0..n {
        for (m, s) in stats.mu.iter().zip(&stats.sigma) {
            out.push(m + s * rng.normal());
        }
    }
    out
}

pub fn sample_latent(stats: &GaussianStats, flow: &FlowModel, n: usize, rng: &mut Prng) -> Result<LatentVec> {
    if stats.dim() != flow.config.latent_dim() {
        return Err(Error::InvalidInput(format!(
            "stats dimension {} does not match latent dimension {}",
            stats.dim(),
            flow.config.latent_dim()
        )));
    }
    LatentVec::unflatten(&sample_flat(stats, n, rng), n, &flow.config)
}

/// `clamp(x + clamp(x_gen - x, -eps, eps), 0, 1)`.
pub fn clip_values(x_gen: &[f32], x: &[f32], epsilon: f32) -> Vec<f32> {
    x_gen
        .iter()
        .zip(x)
        .map(|(&g, &c)| clip_one(g, c, epsilon))
        .collect()
}

/// The rounded sum can land one ulp outside the ball; step back toward `c`
/// until the bound holds exactly.
fn clip_one(g: f32, c: f32, epsilon: f32) -> f32 {
    let mut v = (c + (g - c).clamp(-epsilon, epsilon)).clamp(0.0, 1.0);
    while (v as f64 - c as f64).abs() > epsilon as f64 {
        v = if v > c { v.next_down() } else { v.next_up() };
    }
    v
}

pub fn clip_adversarial(x_gen: &Tensor, x: &Tensor, epsilon: f32) -> Result<Tensor> {
    if x_gen.shape() != x.shape() {
        return Err(Error::InvalidInput(format!(
            "clip shapes differ: {:?} vs {:?}",
            x_gen.shape(),
            x.shape()
        )));
    }
    Ok(Tensor::from_vec(clip_values(&x_gen.data(), &x.data(), epsilon), x.shape())?)
}

#[derive(Debug, Clone)]
pub struct AttackRecord {
    pub id: usize,
    /// Label the attack tries to move away from.
    pub label: usize,
    pub success: bool,
    pub queries_used: u64,
    pub image: Option<Tensor>,
}

/// Supplies attack candidates one at a time.
pub trait CandidateSource {
    fn next_candidate(&mut self) -> Result<Tensor>;
}

/// Queries candidates until the label differs from `label` or the oracle
/// refuses further queries. `queries_used` is the counter advance.
pub fn query_loop(oracle: &mut QueryOracle, id: usize, label: usize, q: u64, source: &mut dyn CandidateSource) -> Result<AttackRecord> {
    if q == 0 {
        return Err(Error::InvalidInput("query budget must be at least 1".into()));
    }
    let start = oracle.counter();
    let saved = oracle.budget();
    let cap = saved.map_or(start + q, |b| b.min(start + q));
    oracle.set_budget(Some(cap));
    let mut record = AttackRecord {
        id,
        label,
        success: false,
        queries_used: 0,
        image: None,
    };
    let outcome = loop {
        if oracle.counter() >= cap {
            break Ok(());
        }
        let cand = match source.next_candidate() {
            Ok(c) => c,
            Err(e) => break Err(e),
        };
        match oracle.hard_label(&cand) {
            Ok(pred) if pred != label => {
                record.success = true;
                record.image = Some(cand);
                break Ok(());
            }
            Ok(_) => {}
            Err(Error::BudgetExceeded(_)) => break Ok(()),
            Err(e) => break Err(e),
        }
    };
    oracle.set_budget(saved);
    record.queries_used = oracle.counter() - start;
    outcome.map(|_| record)
}

/// Decodes latents sampled from the shifted Gaussian, in growing chunks.
pub struct FlowSource<'a> {
    flow: &'a FlowModel,
    stats: &'a GaussianStats,
    clean: Tensor,
    cond: Tensor,
    epsilon: f32,
    rng: Prng,
    buffer: Vec<Tensor>,
    chunk: usize,
}

const MAX_CHUNK: usize = 32;

impl<'a> FlowSource<'a> {
    /// `cond` is `[1, Cc, Hc, Wc]` for the single clean image `[C, H, W]`.
    pub fn new(flow: &'a FlowModel, stats: &'a GaussianStats, clean: &Tensor, cond: Tensor, epsilon: f32, rng: Prng) -> Self {
        Self {
            flow,
            stats,
            clean: clean.clone(),
            cond,
            epsilon,
            rng,
            buffer: Vec::new(),
            chunk: 1,
        }
    }

    fn refill(&mut self) -> Result<()> {
        let n = self.chunk;
        self.chunk = (self.chunk * 2).min(MAX_CHUNK);
        let z = sample_latent(self.stats, self.flow, n, &mut self.rng)?;
        let cs = self.cond.shape();
        let per: usize = cs[1..].iter().product();
        let mut rep = Vec::with_capacity(n * per);
        for _ in 0..n {
            rep.extend_from_slice(&self.cond.data());
        }
        let cond = Tensor::from_vec(rep, &[n, cs[1], cs[2], cs[3]])?;
        let generated = without_grad(self.flow, || self.flow.decode(&z, &cond))?;
        let d = self.clean.numel();
        let g = generated.data();
        let clean = self.clean.data();
        for i in (0..n).rev() {
            let vals = clip_values(&g[i * d..(i + 1) * d], &clean, self.epsilon);
            self.buffer.push(Tensor::from_vec(vals, self.clean.shape())?);
        }
        Ok(())
    }
}

impl CandidateSource for FlowSource<'_> {
    fn next_candidate(&mut self) -> Result<Tensor> {
        if self.buffer.is_empty() {
            self.refill()?;
        }
        Ok(self.buffer.pop().expect("refilled"))
    }
}

/// `clip(x + eps * u, 0, 1)` with `u` uniform on `{-1, +1}^d`.
pub struct NoiseSource {
    clean: Tensor,
    epsilon: f32,
    rng: Prng,
}

impl NoiseSource {
    pub fn new(clean: &Tensor, epsilon: f32, rng: Prng) -> Self {
        Self {
            clean: clean.clone(),
            epsilon,
            rng,
        }
    }
}

impl CandidateSource for NoiseSource {
    fn next_candidate(&mut self) -> Result<Tensor> {
        let signs = self.rng.sign_vec(self.clean.numel());
        let vals: Vec<f32> = self
            .clean
            .data()
            .iter()
            .zip(&signs)
            .map(|(&c, &s)| (c + self.epsilon * s).clamp(0.0, 1.0))
            .collect();
        Ok(Tensor::from_vec(vals, self.clean.shape())?)
    }
}

/// Condition features of one `[C, H, W]` image as `[1, Cc, Hc, Wc]`.
pub fn single_condition(cond_net: &SmallCnn, image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    condition_features(cond_net, &image.reshape(&[1, s[0], s[1], s[2]])?)
}

/// One DTA attack on an eligible example. The condition is computed once.
#[allow(clippy::too_many_arguments)]
pub fn dta_attack(
    flow: &FlowModel,
    stats: &GaussianStats,
    cond_net: &SmallCnn,
    oracle: &mut QueryOracle,
    id: usize,
    example: &Example,
    epsilon: f32,
    q: u64,
    rng: Prng,
) -> Result<AttackRecord> {
    let cond = single_condition(cond_net, &example.image)?;
    let mut src = FlowSource::new(flow, stats, &example.image, cond, epsilon, rng);
    query_loop(oracle, id, example.label, q, &mut src)
}

pub fn random_noise_baseline(oracle: &mut QueryOracle, id: usize, example: &Example, epsilon: f32, q: u64, rng: Prng) -> Result<AttackRecord> {
    let mut src = NoiseSource::new(&example.image, epsilon, rng);
    query_loop(oracle, id, example.label, q, &mut src)
}

/// Sampling strategy for [`attack_examples`].
pub enum Method<'a> {
    Dta {
        flow: &'a FlowModel,
        stats: &'a GaussianStats,
        cond_net: &'a SmallCnn,
    },
    RandomNoise,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSettings {
    pub epsilon: f32,
    pub budget: u64,
    pub seed: u64,
    /// Spend one budgeted query on the clean-image eligibility check.
    pub count_eligibility: bool,
}

/// Outcome of a batch of attacks; `skipped` lists examples the oracle
/// already misclassifies.
#[derive(Debug, Clone)]
pub struct AttackRun {
    pub records: Vec<AttackRecord>,
    pub skipped: Vec<usize>,
}

/// Attacks every eligible example. Example `i` uses random stream `i` of
/// `settings.seed`, so results do not depend on which other examples run.
pub fn attack_examples(method: &Method, oracle: &mut QueryOracle, examples: &[Example], settings: &AttackSettings) -> Result<AttackRun> {
    let mut run = AttackRun {
        records: Vec::new(),
        skipped: Vec::new(),
    };
    for (id, ex) in examples.iter().enumerate() {
        let start = oracle.counter();
        let mut budget = settings.budget;
        let clean_pred = if settings.count_eligibility {
            budget = budget.saturating_sub(1);
            oracle.hard_label(&ex.image)?
        } else {
            oracle.classify_uncounted(&ex.image)?
        };
        if clean_pred != ex.label {
            run.skipped.push(id);
            continue;
        }
        let rng = Prng::stream(settings.seed, id as u64);
        let mut record = if budget == 0 {
            AttackRecord {
                id,
                label: ex.label,
                success: false,
                queries_used: 0,
                image: None,
            }
        } else {
            match method {
                Method::Dta { flow, stats, cond_net } => {
                    dta_attack(flow, stats, cond_net, oracle, id, ex, settings.epsilon, budget, rng)?
                }
                Method::RandomNoise => random_noise_baseline(oracle, id, ex, settings.epsilon, budget, rng)?,
            }
        };
        record.queries_used = oracle.counter() - start;
        run.records.push(record);
    }
    Ok(run)
}

/// Label-free success: the perturbed prediction must differ from the
/// oracle's prediction on the clean image.
pub fn evasion_rate(method: &Method, oracle: &mut QueryOracle, images: &[Tensor], epsilon: f32, budget: u64, seed: u64) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no images".into()));
    }
    let mut successes = 0;
    for (id, img) in images.iter().enumerate() {
        let label = oracle.classify_uncounted(img)?;
        let ex = Example {
            image: img.clone(),
            label,
        };
        let rng = Prng::stream(seed, id as u64);
        let rec = match method {
            Method::Dta { flow, stats, cond_net } => dta_attack(flow, stats, cond_net, oracle, id, &ex, epsilon, budget, rng)?,
            Method::RandomNoise => random_noise_baseline(oracle, id, &ex, epsilon, budget, rng)?,
        };
        successes += rec.success as usize;
    }
    Ok(successes as f64 / images.len() as f64)
}

/// Whether Avg/Med query counts cover successes only or every attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum QueryStatistic {
    SuccessesOnly,
    AllAttempts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BudgetMetrics {
    pub budget: u64,
    pub attempts: usize,
    pub successes: usize,
    pub asr: f64,
    pub avg_queries: Option<f64>,
    pub median_queries: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HistogramBucket {
    pub lo: u64,
    pub hi: u64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub query_statistic: QueryStatistic,
    pub per_budget: Vec<BudgetMetrics>,
    /// Query counts of successful attacks.
    pub histogram: Vec<HistogramBucket>,
}

pub fn median(values: &mut [u64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] + values[n / 2]) as f64 / 2.0
    })
}

pub fn evaluate(records: &[AttackRecord], budgets: &[u64], stat: QueryStatistic) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no attack records to evaluate".into()));
    }
    if budgets.is_empty() || budgets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidInput("budgets must be non-empty and strictly ascending".into()));
    }
    let per_budget = budgets
        .iter()
        .map(|&b| {
            let hits: Vec<u64> = records
                .iter()
                .filter(|r| r.success && r.queries_used <= b)
                .map(|r| r.queries_used)
                .collect();
            let mut counted: Vec<u64> = match stat {
                QueryStatistic::SuccessesOnly => hits.clone(),
                QueryStatistic::AllAttempts => records
                    .iter()
                    .map(|r| if r.success && r.queries_used <= b { r.queries_used } else { r.queries_used.min(b) })
                    .collect(),
            };
            let avg = (!counted.is_empty()).then(|| counted.iter().sum::<u64>() as f64 / counted.len() as f64);
            BudgetMetrics {
                budget: b,
                attempts: records.len(),
                successes: hits.len(),
                asr: hits.len() as f64 / records.len() as f64,
                avg_queries: avg,
                median_queries: median(&mut counted),
            }
        })
        .collect();
    let max = *budgets.last().expect("non-empty");
    let mut edges = vec![1u64, 2, 3, 6, 11, 26, 51, 101, 201, 501];
    edges.retain(|&e| e <= max);
    edges.push(max + 1);
    let histogram = edges
        .windows(2)
        .map(|w| HistogramBucket {
            lo: w[0],
            hi: w[1] - 1,
            count: records
                .iter()
                .filter(|r| r.success && r.queries_used >= w[0] && r.queries_used < w[1])
                .count(),
        })
        .collect();
    Ok(MetricsReport {
        query_statistic: stat,
        per_budget,
        histogram,
    })
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// One row per method-free table line: `budget,asr_percent,avg,median`.
    pub fn to_csv(&self, label: &str) -> String {
        let mut s = String::from("method,budget,asr_percent,avg_query,median_query\n");
        for m in &self.per_budget {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();
            s.push_str(&format!(
                "{label},{},{:.2},{},{}\n",
                m.budget,
                100.0 * m.asr,
                f(m.avg_queries),
                f(m.median_queries)
            ));
        }
        s
    }

    pub fn asr_at(&self, budget: u64) -> Option<f64> {
        self.per_budget.iter().find(|m| m.budget == budget).map(|m| m.asr)
    }
}

/// Entry `(i, j)`: among successful adversarials from source `i` whose clean
/// image target `j` classifies correctly, the fraction target `j`
/// misclassifies. A source without successes gets a row of zeros.
pub fn transfer_matrix(sources: &[&[AttackRecord]], examples: &[Example], targets: &[SmallCnn]) -> Result<Vec<Vec<f64>>> {
    if sources.is_empty() || targets.is_empty() {
        return Err(Error::InvalidInput("transfer matrix needs sources and targets".into()));
    }
    if sources.iter().any(|r| r.is_empty()) {
        return Err(Error::InvalidInput("empty record set".into()));
    }
    let mut out = Vec::with_capacity(sources.len());
    for recs in sources {
        let hits: Vec<&AttackRecord> = recs.iter().filter(|r| r.success && r.image.is_some()).collect();
        let mut row = Vec::with_capacity(targets.len());
        for t in targets {
            let mut eligible = 0usize;
            let mut fooled = 0usize;
            for chunk in hits.chunks(64) {
                let clean: Vec<Tensor> = chunk.iter().map(|r| examples[r.id].image.clone()).collect();
                let adv: Vec<Tensor> = chunk.iter().map(|r| r.image.clone().expect("filtered")).collect();
                let pc = t.predict(&Tensor::stack(&clean)?)?;
                let pa = t.predict(&Tensor::stack(&adv)?)?;
                for (k, r) in chunk.iter().enumerate() {
                    let y = examples[r.id].label;
                    if pc[k] == y {
                        eligible += 1;
                        fooled += (pa[k] != y) as usize;
                    }
                }
            }
            row.push(if eligible == 0 { 0.0 } else { fooled as f64 / eligible as f64 });
        }
        out.push(row);
    }
    Ok(out)
}

/// Mean of the off-diagonal entries of a square matrix.
pub fn off_diagonal_mean(m: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i != j {
                sum += v;
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}
