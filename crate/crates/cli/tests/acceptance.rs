//! End-to-end acceptance run. Prints one `[PASS]`/`[FAIL]` line per
//! criterion and a count of failures.
//!
//! `ACCEPTANCE_ONLY=1,5,12` restricts the run to the listed criteria.
//! `ACCEPTANCE_STRICT=1` makes any failed criterion a non-zero exit.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use flowstrike::attack::{
    clip_values, dta_attack, random_noise_baseline, single_condition, GaussianStats, StatsMode,
};
use flowstrike::data::{encode_cifar, gen_synthetic, load_pairs, parse_cifar, save_pairs, Dataset, Example, PairSet};
use flowstrike::flow::{FlowConfig, FlowModel};
use flowstrike::models::{QueryOracle, SmallCnn};
use flowstrike::train::{
    load_checkpoint, mse_loss, nll_loss, save_checkpoint, standard_latent, train_from, TrainConfig, TrainState,
    TrainingSet,
};
use flowstrike_cli::config::Config;
use flowstrike_cli::pipeline::{self, Layout, Models};
use flowstrike_tensor::gradcheck::relative_error;
use flowstrike_tensor::{Prng, Tensor};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Check = fn(&mut Shared) -> Outcome;

/// Artifacts reused by several criteria.
#[derive(Default)]
struct Shared {
    desk: Option<Desk>,
    ablation: Option<Ablation>,
}

fn normal(shape: &[usize], rng: &mut Prng) -> Tensor {
    Tensor::from_vec(rng.normal_vec(shape.iter().product()), shape).unwrap()
}

/// Moves every flow parameter away from its initial value.
fn randomize(flow: &mut FlowModel, seed: u64, spread: f32) {
    let mut rng = Prng::new(seed);
    for step in flow.levels.iter().flatten() {
        step.actnorm
            .scale
            .update_data(|d| d.iter_mut().for_each(|v| *v = rng.uniform_range(0.6, 1.4)))
            .unwrap();
        step.actnorm
            .bias
            .update_data(|d| d.iter_mut().for_each(|v| *v = 0.2 * rng.normal()))
            .unwrap();
        step.invconv
            .weight
            .update_data(|d| d.iter_mut().for_each(|v| *v += 0.1 * rng.normal()))
            .unwrap();
        for (w, b) in &step.coupling.convs {
            w.update_data(|d| d.iter_mut().for_each(|v| *v = spread * rng.normal())).unwrap();
            b.update_data(|d| d.iter_mut().for_each(|v| *v = spread * rng.normal())).unwrap();
        }
    }
    flow.initialized = true;
}

fn invertibility(_: &mut Shared) -> Outcome {
    let start = Instant::now();
    let cfg = FlowConfig {
        levels: 2,
        steps: 2,
        in_shape: [3, 32, 32],
        cond_shape: [64, 8, 8],
        hidden: 16,
    };
    let mut rng = Prng::new(101);
    let mut worst = 0.0f32;
    let mut count = 0;
    for draw in 0..10u64 {
        let mut flow = FlowModel::new(cfg, draw).unwrap();
        randomize(&mut flow, 1000 + draw, 0.05);
        let x = Tensor::from_vec(rng.uniform_vec(10 * 3072, 0.0, 1.0), &[10, 3, 32, 32]).unwrap();
        let c = Tensor::from_vec(rng.uniform_vec(10 * 4096, 0.0, 2.0), &[10, 64, 8, 8]).unwrap();
        let (z, _) = flow.encode_frozen(&x, &c).unwrap();
        let back = flow.decode(&z, &c).unwrap();
        for (a, b) in back.data().iter().zip(x.data().iter()) {
            worst = worst.max((a - b).abs());
        }
        count += 10;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst < 1e-4 && secs < 60.0,
        format!("{count} pairs, max |decode(encode(x)) - x| = {worst:.2e}, {secs:.1} s"),
    )
}

fn log_abs_det(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        for k in 0..n {
            m.swap(col * n + k, piv * n + k);
        }
        let p = m[col * n + col];
        acc += p.abs().ln();
        for r in col + 1..n {
            let f = m[r * n + col] / p;
            for k in col..n {
                m[r * n + k] -= f * m[col * n + k];
            }
        }
    }
    acc
}

fn logdet_exact(_: &mut Shared) -> Outcome {
    let cfg = FlowConfig {
        levels: 1,
        steps: 1,
        in_shape: [2, 4, 4],
        cond_shape: [2, 2, 2],
        hidden: 8,
    };
    let n = 32;
    let mut worst = 0.0f64;
    for draw in 0..10u64 {
        let mut flow = FlowModel::new(cfg, draw).unwrap();
        randomize(&mut flow, 200 + draw, 0.1);
        let mut rng = Prng::new(300 + draw);
        let x = rng.normal_vec(n);
        let c = normal(&[1, 2, 2, 2], &mut rng);
        let enc = |v: &[f64]| -> Vec<f64> {
            let xs: Vec<f32> = v.iter().map(|&a| a as f32).collect();
            let t = Tensor::from_vec(xs, &[1, 2, 4, 4]).unwrap();
            let (z, _) = flow.encode_frozen(&t, &c).unwrap();
            z.flatten().unwrap().data().iter().map(|&a| a as f64).collect()
        };
        // Central differences with one Richardson step, column by column.
        let x64: Vec<f64> = x.iter().map(|&a| a as f64).collect();
        let h = 1e-2;
        let mut jac = vec![0.0f64; n * n];
        for j in 0..n {
            let diff = |h: f64| -> Vec<f64> {
                let mut p = x64.clone();
                let mut m = x64.clone();
                p[j] += h;
                m[j] -= h;
                enc(&p).iter().zip(enc(&m)).map(|(a, b)| (a - b) / (2.0 * h)).collect()
            };
            let (d1, d2) = (diff(h), diff(h / 2.0));
            for i in 0..n {
                jac[i * n + j] = (4.0 * d2[i] - d1[i]) / 3.0;
            }
        }
        let t = Tensor::from_vec(x, &[1, 2, 4, 4]).unwrap();
        let (_, logdet) = flow.encode_frozen(&t, &c).unwrap();
        let err = (logdet.data()[0] as f64 - log_abs_det(&jac, n)).abs();
        worst = worst.max(err);
    }
    outcome(worst < 1e-3, format!("10 draws, max |logdet - log|det J|| = {worst:.2e}"))
}

fn density_normalizes(_: &mut Shared) -> Outcome {
    let cfg = FlowConfig {
        levels: 1,
        steps: 2,
        in_shape: [1, 2, 2],
        cond_shape: [2, 1, 1],
        hidden: 8,
    };
    let mut flow = FlowModel::new(cfg, 41).unwrap();
    let mut rng = Prng::new(42);
    let init = normal(&[256, 1, 2, 2], &mut rng);
    let cinit = normal(&[256, 2, 1, 1], &mut rng);
    flow.initialize(&init, &cinit).unwrap();
    for step in flow.levels.iter().flatten() {
        for (w, b) in &step.coupling.convs {
            w.update_data(|d| d.iter_mut().for_each(|v| *v = 0.2 * rng.normal())).unwrap();
            b.update_data(|d| d.iter_mut().for_each(|v| *v = 0.2 * rng.normal())).unwrap();
        }
    }
    let cond = [0.7f32, -0.4];
    let axis: Vec<f32> = (0..=32).map(|i| -4.0 + 0.25 * i as f32).collect();
    let total_points = axis.len().pow(4);
    let chunk = 33 * 33 * 33;
    let mut mass = 0.0f64;
    for a in &axis {
        let mut xs = Vec::with_capacity(chunk * 4);
        for b in &axis {
            for c in &axis {
                for d in &axis {
                    xs.extend([*a, *b, *c, *d]);
                }
            }
        }
        let x = Tensor::from_vec(xs, &[chunk, 1, 2, 2]).unwrap();
        let c = Tensor::from_vec(cond.repeat(chunk), &[chunk, 2, 1, 1]).unwrap();
        let lp = flow.log_prob(&x, &c).unwrap();
        mass += lp.data().iter().map(|&v| (v as f64).exp()).sum::<f64>();
    }
    mass *= 0.25f64.powi(4);
    outcome(
        (0.95..=1.05).contains(&mass),
        format!("{total_points} grid points, integral = {mass:.4}"),
    )
}

fn gradients(_: &mut Shared) -> Outcome {
    let mut rng = Prng::new(52);
    let eps = 8.0 / 255.0;
    let clean = rng.uniform_vec(2 * 48, 0.2, 0.8);
    let adv: Vec<f32> = clean.iter().map(|&v| v + eps * rng.uniform_range(-1.0, 1.0)).collect();
    let adv = Tensor::from_vec(adv, &[2, 3, 4, 4]).unwrap();
    let cond = Tensor::from_vec(rng.uniform_vec(2 * 32, 0.0, 2.0), &[2, 8, 2, 2]).unwrap();
    let cfg = FlowConfig {
        levels: 2,
        steps: 1,
        in_shape: [3, 4, 4],
        cond_shape: [8, 2, 2],
        hidden: 8,
    };
    let mut flow = FlowModel::new(cfg, 53).unwrap();
    flow.initialize(&adv, &cond).unwrap();
    for step in flow.levels.iter().flatten() {
        step.actnorm
            .scale
            .update_data(|d| d.iter_mut().for_each(|v| *v *= rng.uniform_range(0.8, 1.2)))
            .unwrap();
        for (w, b) in &step.coupling.convs {
            w.update_data(|d| d.iter_mut().for_each(|v| *v += 0.1 * rng.normal())).unwrap();
            b.update_data(|d| d.iter_mut().for_each(|v| *v += 0.1 * rng.normal())).unwrap();
        }
    }
    let z = standard_latent(&flow, 2, &mut rng).unwrap();
    let params = flow.params();
    let mut worst = 0.0f32;
    let mut checked = 0;
    let losses: [(&str, Box<dyn Fn() -> Tensor>); 2] = [
        ("nll", Box::new(|| nll_loss(&flow, &adv, &cond).unwrap())),
        ("mse", Box::new(|| mse_loss(&flow, &adv, &cond, &z).unwrap())),
    ];
    for (_, loss) in &losses {
        flow.set_trainable(true).unwrap();
        params.iter().for_each(Tensor::zero_grad);
        loss().backward().unwrap();
        let grads: Vec<Vec<f32>> = params.iter().map(|p| p.grad().unwrap()).collect();
        flow.set_trainable(false).unwrap();
        // Random coordinates, skipping ones the loss does not touch.
        let mut coords = Vec::new();
        while coords.len() < 6 {
            let p = rng.below(params.len());
            let i = rng.below(params[p].numel());
            if grads[p][i] != 0.0 {
                coords.push((p, i));
            }
        }
        let analytic: Vec<f32> = coords.iter().map(|&(p, i)| grads[p][i]).collect();
        for (&(p, i), &a) in coords.iter().zip(&analytic) {
            let x0 = params[p].data()[i];
            let f = |v: f32| {
                let orig = params[p].data()[i];
                params[p].update_data(|d| d[i] = v).unwrap();
                let out = loss().item() as f64;
                params[p].update_data(|d| d[i] = orig).unwrap();
                out
            };
            let fd = [1e-1, 3e-2, 1e-2]
                .map(|h| ridders(&f, x0, h))
                .into_iter()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap()
                .0;
            worst = worst.max(relative_error(a, fd as f32, 1e-2));
            checked += 1;
        }
    }
    outcome(worst < 1e-2, format!("{checked} parameters (6 per loss), max rel err = {worst:.2e}"))
}

/// Derivative of `f` at `x` by Ridders' extrapolation of central
/// differences, starting from step `h` and keeping the estimate with the
/// smallest error bound. Returns the estimate and that bound.
fn ridders(f: &impl Fn(f32) -> f64, x: f32, h: f64) -> (f64, f64) {
    const SHRINK: f64 = 1.4;
    const N: usize = 10;
    let central = |h: f64| {
        let (up, down) = ((x as f64 + h) as f32, (x as f64 - h) as f32);
        (f(up) - f(down)) / (up as f64 - down as f64)
    };
    let mut table = vec![vec![0.0f64; N]; N];
    let mut h = h;
    table[0][0] = central(h);
    let mut best = table[0][0];
    let mut err = f64::MAX;
    for i in 1..N {
        h /= SHRINK;
        table[0][i] = central(h);
        let mut fac = SHRINK * SHRINK;
        for j in 1..=i {
            table[j][i] = (table[j - 1][i] * fac - table[j - 1][i - 1]) / (fac - 1.0);
            fac *= SHRINK * SHRINK;
            let e = (table[j][i] - table[j - 1][i]).abs().max((table[j][i] - table[j - 1][i - 1]).abs());
            if e <= err {
                err = e;
                best = table[j][i];
            }
        }
        if (table[i][i] - table[i - 1][i - 1]).abs() >= 2.0 * err {
            break;
        }
    }
    (best, err)
}

fn clip_contract(_: &mut Shared) -> Outcome {
    let mut rng = Prng::new(61);
    let n = 100_000;
    let mut violations = 0;
    for i in 0..n {
        let eps = match i % 3 {
            0 => 8.0 / 255.0,
            1 => 16.0 / 255.0,
            _ => rng.uniform_range(0.0, 0.5),
        };
        let x = rng.uniform();
        let g = rng.uniform_range(-2.0, 3.0);
        let out = clip_values(&[g], &[x], eps)[0];
        if (out as f64 - x as f64).abs() > eps as f64 || !(0.0..=1.0).contains(&out) {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{n} triples, {violations} violations"))
}

fn query_accounting(_: &mut Shared) -> Outcome {
    let model = SmallCnn::new([3, 8, 8], 4, 71).unwrap();
    model.freeze().unwrap();
    let cond_net = SmallCnn::new([3, 8, 8], 4, 72).unwrap();
    cond_net.freeze().unwrap();
    let cfg = FlowConfig {
        levels: 2,
        steps: 1,
        in_shape: [3, 8, 8],
        cond_shape: cond_net.feature_shape(),
        hidden: 4,
    };
    let mut flow = FlowModel::new(cfg, 73).unwrap();
    randomize(&mut flow, 74, 0.1);
    let mut stats_rng = Prng::new(75);
    let stats = GaussianStats {
        mu: stats_rng.normal_vec(192),
        sigma: stats_rng.uniform_vec(192, 0.1, 2.0),
    };
    let mut rng = Prng::new(76);
    let mut oracle = QueryOracle::new(model, None);
    let before = oracle.counter();
    let mut spent = 0;
    let mut over = 0;
    let attacks = 1000;
    for id in 0..attacks {
        let q = 1 + rng.below(40) as u64;
        let eps = rng.uniform_range(0.0, 0.5);
        let ex = Example {
            image: Tensor::from_vec(rng.uniform_vec(192, 0.0, 1.0), &[3, 8, 8]).unwrap(),
            label: rng.below(4),
        };
        let stream = Prng::stream(77, id as u64);
        let rec = if id % 2 == 0 {
            random_noise_baseline(&mut oracle, id, &ex, eps, q, stream).unwrap()
        } else {
            dta_attack(&flow, &stats, &cond_net, &mut oracle, id, &ex, eps, q, stream).unwrap()
        };
        spent += rec.queries_used;
        over += (rec.queries_used > q) as usize;
    }
    let delta = oracle.counter() - before;
    outcome(
        delta == spent && over == 0,
        format!("{attacks} attacks, counter delta {delta}, sum of queries_used {spent}, {over} over budget"),
    )
}

struct Desk {
    dir: tempfile::TempDir,
    cfg: Config,
    models: Models,
    test: Dataset,
    elapsed: Duration,
    dta: flowstrike::attack::MetricsReport,
    baseline: flowstrike::attack::MetricsReport,
}

fn desk_config() -> Config {
    Config::default()
}

fn desk(shared: &mut Shared) -> &Desk {
    if shared.desk.is_none() {
        let cfg = desk_config();
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let start = Instant::now();
        let acc = pipeline::cmd_train_classifier(&cfg, &layout).unwrap();
        eprintln!("  desk: classifiers {acc:?} [{:.0?}]", start.elapsed());
        let rep = pipeline::cmd_collect_adv(&cfg, &layout).unwrap();
        eprintln!("  desk: collection {rep:?} [{:.0?}]", start.elapsed());
        pipeline::cmd_train_flow(&cfg, &layout).unwrap();
        eprintln!("  desk: flow trained [{:.0?}]", start.elapsed());
        let out = pipeline::cmd_attack(&cfg, &layout).unwrap().remove(0);
        let elapsed = start.elapsed();
        eprintln!("  desk: attack done [{elapsed:.0?}]");
        let models = Models::load(&cfg, &layout).unwrap();
        let (_, test) = pipeline::load_data(&cfg).unwrap();
        shared.desk = Some(Desk {
            dir,
            cfg,
            models,
            test,
            elapsed,
            dta: out.dta,
            baseline: out.baseline.expect("baseline enabled"),
        });
    }
    shared.desk.as_ref().unwrap()
}

fn desk_experiment(shared: &mut Shared) -> Outcome {
    let d = desk(shared);
    let q = d.cfg.max_budget();
    let dta = d.dta.per_budget.last().unwrap();
    let base = d.baseline.per_budget.last().unwrap();
    let a = dta.asr >= base.asr + 0.15;
    let b = match (dta.median_queries, base.median_queries) {
        (Some(m), Some(mb)) => m <= mb && m <= 5.0,
        (Some(m), None) => m <= 5.0,
        _ => false,
    };
    let curve: Vec<f64> = d.dta.per_budget.iter().map(|m| m.asr).collect();
    let c = curve.windows(2).all(|w| w[0] <= w[1]);
    let time = d.elapsed.as_secs_f64() < 45.0 * 60.0;
    outcome(
        a && b && c && time,
        format!(
            "Q={q}: DTA ASR {:.1}% vs noise {:.1}% (a {}); median {:?} vs {:?} (b {}); ASR over budgets {:?} (c {}); {:.1} min",
            100.0 * dta.asr,
            100.0 * base.asr,
            ok(a),
            dta.median_queries,
            base.median_queries,
            ok(b),
            curve.iter().map(|v| (1000.0 * v).round() / 10.0).collect::<Vec<_>>(),
            ok(c),
            d.elapsed.as_secs_f64() / 60.0
        ),
    )
}

fn ok(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "no"
    }
}

/// Ablation arm: a flow trained under one config and its ASR at the
/// largest budget.
struct Arm {
    asr: f64,
    asr_standard: f64,
}

struct Ablation {
    seeds: Vec<u64>,
    with_mse: Vec<Arm>,
    without_mse: Vec<f64>,
    by_k: Vec<(usize, f64)>,
    /// Arms whose training diverged.
    notes: Vec<String>,
}

impl Ablation {
    fn suffix(&self, labels: &[&str]) -> String {
        let hit: Vec<&String> = self.notes.iter().filter(|n| labels.iter().any(|l| n.starts_with(l))).collect();
        if hit.is_empty() {
            String::new()
        } else {
            format!(" [{}]", hit.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("; "))
        }
    }
}

/// Shared models and pairs for the ablations; the flow and its training
/// seed vary per arm.
struct AblationBase {
    cfg: Config,
    models: Models,
    data: TrainingSet,
    examples: Vec<Example>,
}

fn ablation_base(shared: &mut Shared) -> AblationBase {
    let d = desk(shared);
    let layout = Layout::new(d.dir.path());
    let eps = d.cfg.collect.epsilons[0];
    let pairs = load_pairs(layout.pairs(eps)).unwrap();
    AblationBase {
        cfg: d.cfg.clone(),
        models: d.models.clone(),
        data: TrainingSet::new(&pairs, &d.models.condition).unwrap(),
        examples: pipeline::attack_set(&d.cfg, &d.test),
    }
}

/// Trains one arm. A run that diverges is evaluated at its last checkpoint
/// and the divergence is returned as a note.
fn fit_arm(base: &AblationBase, cfg: &Config) -> (FlowModel, Option<String>) {
    let mut last: Option<(FlowModel, usize)> = None;
    let fit = pipeline::fit_flow(cfg, &base.data, None, |f, s| {
        last = Some((f.deep_clone()?, s.iteration));
        Ok(())
    });
    match fit {
        Ok((flow, _)) => (flow, None),
        Err(e) => {
            let (flow, at) = last.unwrap_or_else(|| panic!("{e} before the first checkpoint"));
            flow.set_trainable(false).unwrap();
            (flow, Some(format!("{e}; evaluated the checkpoint at iteration {at}")))
        }
    }
}

fn arm(base: &AblationBase, cfg: &Config, notes: &mut Vec<String>, label: &str) -> (f64, f64) {
    let (flow, note) = fit_arm(base, cfg);
    if let Some(n) = note {
        eprintln!("  {label}: {n}");
        notes.push(format!("{label} {n}"));
    }
    let eps = cfg.collect.epsilons[0];
    let target = &base.models.zoo[cfg.attack.target];
    let asr_with = |mode: StatsMode| -> f64 {
        let stats = pipeline::latent_stats(&flow, &base.data, mode).unwrap();
        let recs = pipeline::run_dta(cfg, &flow, &stats, &base.models.condition, target, &base.examples, eps).unwrap();
        pipeline::report(cfg, &recs).unwrap().per_budget.last().unwrap().asr
    };
    (asr_with(cfg.attack.stats), asr_with(StatsMode::Standard))
}

fn ablation(shared: &mut Shared) -> &Ablation {
    if shared.ablation.is_none() {
        let base = ablation_base(shared);
        let seeds = vec![0u64, 1, 2];
        let mut with_mse = Vec::new();
        let mut without_mse = Vec::new();
        let mut notes = Vec::new();
        for &s in &seeds {
            let mut cfg = base.cfg.clone();
            cfg.train.seed = s;
            cfg.flow.seed = 100 + s;
            let (asr, asr_standard) = arm(&base, &cfg, &mut notes, &format!("seed {s} with mse"));
            eprintln!("  ablation seed {s}: with mse {asr:.3} (N(0,1) {asr_standard:.3})");
            with_mse.push(Arm { asr, asr_standard });
            cfg.train.mse_enabled = false;
            let (asr, _) = arm(&base, &cfg, &mut notes, &format!("seed {s} without mse"));
            eprintln!("  ablation seed {s}: without mse {asr:.3}");
            without_mse.push(asr);
        }
        let mut by_k = vec![(base.cfg.flow.steps, with_mse[0].asr)];
        for k in [1usize, 2, 4] {
            if k == base.cfg.flow.steps {
                continue;
            }
            let mut cfg = base.cfg.clone();
            cfg.flow.steps = k;
            cfg.train.seed = seeds[0];
            cfg.flow.seed = 100 + seeds[0];
            let (asr, _) = arm(&base, &cfg, &mut notes, &format!("K={k}"));
            eprintln!("  ablation K={k}: {asr:.3}");
            by_k.push((k, asr));
        }
        by_k.sort_by_key(|&(k, _)| k);
        shared.ablation = Some(Ablation {
            seeds,
            with_mse,
            without_mse,
            by_k,
            notes,
        });
    }
    shared.ablation.as_ref().unwrap()
}

fn pct(v: f64) -> String {
    format!("{:.1}%", 100.0 * v)
}

fn mse_ablation(shared: &mut Shared) -> Outcome {
    let a = ablation(shared);
    let wins = a.with_mse.iter().zip(&a.without_mse).filter(|(w, wo)| w.asr >= **wo).count();
    let rows: Vec<String> = a
        .seeds
        .iter()
        .zip(a.with_mse.iter().zip(&a.without_mse))
        .map(|(s, (w, wo))| format!("seed {s}: {} vs {}", pct(w.asr), pct(*wo)))
        .collect();
    outcome(wins * 2 > a.seeds.len(), format!("with vs without MSE, {}; {wins}/3 seeds{}", rows.join(", "), a.suffix(&["seed"])))
}

fn stats_ablation(shared: &mut Shared) -> Outcome {
    let a = ablation(shared);
    let wins = a.with_mse.iter().filter(|w| w.asr >= w.asr_standard + 0.10).count();
    let rows: Vec<String> = a
        .seeds
        .iter()
        .zip(&a.with_mse)
        .map(|(s, w)| format!("seed {s}: {} vs {}", pct(w.asr), pct(w.asr_standard)))
        .collect();
    outcome(
        wins * 2 > a.seeds.len(),
        format!(
            "shifted vs standard latent, {}; {wins}/3 seeds by >= 10 points{}",
            rows.join(", "),
            a.suffix(&["seed 0 with", "seed 1 with", "seed 2 with"])
        ),
    )
}

fn transfer(shared: &mut Shared) -> Outcome {
    let d = desk(shared);
    let layout = Layout::new(d.dir.path());
    let out = pipeline::cmd_eval_transfer(&d.cfg, &layout).unwrap().remove(0);
    let dta = out.dta_mean();
    let base = out.baseline_mean().expect("baseline enabled");
    outcome(
        dta > base,
        format!("{}-model zoo, mean off-diagonal ASR DTA {} vs noise {}", out.dta.len(), pct(dta), pct(base)),
    )
}

fn k_insensitivity(shared: &mut Shared) -> Outcome {
    let a = ablation(shared);
    let vals: Vec<f64> = a.by_k.iter().map(|&(_, v)| v).collect();
    let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
    let rows: Vec<String> = a.by_k.iter().map(|&(k, v)| format!("K={k}: {}", pct(v))).collect();
    outcome(
        spread <= 0.10,
        format!("{}; spread {:.1} points{}", rows.join(", "), 100.0 * spread, a.suffix(&["K=", "seed 0 with"])),
    )
}

fn serialization(_: &mut Shared) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut failures = Vec::new();
    let mut same = |name: &str, a: Vec<u8>, b: Vec<u8>| {
        if a != b {
            failures.push(name.to_string());
        }
    };

    let ds = gen_synthetic(4, 32, 24, 81).unwrap();
    let bytes = encode_cifar(&ds).unwrap();
    same("cifar", encode_cifar(&parse_cifar(&bytes).unwrap()).unwrap(), bytes);

    let net = SmallCnn::new([3, 8, 8], 3, 82).unwrap();
    net.freeze().unwrap();
    let p = dir.path().join("model.tff");
    net.save(&p).unwrap();
    same("model", SmallCnn::load(&p).unwrap().to_bytes().unwrap(), net.to_bytes().unwrap());

    let mut rng = Prng::new(83);
    let eps = 16.0 / 255.0;
    let mut pairs = PairSet::new(eps, 3, [3, 8, 8]);
    for i in 0..24 {
        let clean = rng.uniform_vec(192, 0.1, 0.9);
        let adv: Vec<f32> = clean.iter().map(|&v| v + eps * rng.uniform_range(-1.0, 1.0)).collect();
        let ex = Example {
            image: Tensor::from_vec(clean, &[3, 8, 8]).unwrap(),
            label: i % 3,
        };
        pairs.push(ex, Tensor::from_vec(adv, &[3, 8, 8]).unwrap()).unwrap();
    }
    let p = dir.path().join("pairs.tff");
    save_pairs(&pairs, &p).unwrap();
    same("pairs", load_pairs(&p).unwrap().to_bytes().unwrap(), pairs.to_bytes().unwrap());

    let data = TrainingSet::new(&pairs, &net).unwrap();
    let cfg = FlowConfig {
        levels: 2,
        steps: 1,
        in_shape: [3, 8, 8],
        cond_shape: net.feature_shape(),
        hidden: 8,
    };
    let tc = TrainConfig {
        max_iters: 12,
        batch_size: 8,
        seed: 84,
        checkpoint_every: 5,
        ..Default::default()
    };
    let mut straight = FlowModel::new(cfg, 85).unwrap();
    let mut s_state = TrainState::new(&straight);
    train_from(&mut straight, &mut s_state, &data, &tc, |_, _| Ok(())).unwrap();

    let p = dir.path().join("flow.tff");
    straight.save(&p).unwrap();
    same("flow", FlowModel::load(&p).unwrap().to_bytes().unwrap(), straight.to_bytes().unwrap());

    let stats = pipeline::latent_stats(&straight, &data, StatsMode::PerDimension).unwrap();
    let p = dir.path().join("stats.tff");
    stats.save(&p).unwrap();
    let back = GaussianStats::load(&p).unwrap();
    let p2 = dir.path().join("stats2.tff");
    back.save(&p2).unwrap();
    same("stats", std::fs::read(&p2).unwrap(), std::fs::read(&p).unwrap());

    let ckpt = dir.path().join("ckpt.tff");
    let mut first = FlowModel::new(cfg, 85).unwrap();
    let mut state = TrainState::new(&first);
    let half = TrainConfig { max_iters: 5, ..tc };
    train_from(&mut first, &mut state, &data, &half, |f, s| save_checkpoint(&ckpt, f, s)).unwrap();
    drop(first);
    let (mut resumed, mut state) = load_checkpoint(&ckpt).unwrap();
    let ckpt2 = dir.path().join("ckpt2.tff");
    save_checkpoint(&ckpt2, &resumed, &state).unwrap();
    same("checkpoint", std::fs::read(&ckpt2).unwrap(), std::fs::read(&ckpt).unwrap());
    train_from(&mut resumed, &mut state, &data, &tc, |_, _| Ok(())).unwrap();
    same("resumed training", resumed.to_bytes().unwrap(), straight.to_bytes().unwrap());
    if state.history != s_state.history {
        failures.push("resumed loss history".into());
    }

    let cond = single_condition(&net, &pairs.pairs[0].clean.image).unwrap();
    let z = standard_latent(&resumed, 1, &mut Prng::new(86)).unwrap();
    let a = resumed.decode(&z, &cond).unwrap().to_vec();
    let b = straight.decode(&z, &cond).unwrap().to_vec();
    if a != b {
        failures.push("resumed decode".into());
    }

    outcome(
        failures.is_empty(),
        if failures.is_empty() {
            "cifar, model, pairs, flow, stats, checkpoint round-trip; resumed training identical".to_string()
        } else {
            format!("mismatch: {}", failures.join(", "))
        },
    )
}

fn panic_text(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown payload".into())
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, Check); 12] = [
        (1, "flow invertibility", invertibility),
        (2, "log-determinant vs numerical Jacobian", logdet_exact),
        (3, "density normalization", density_normalizes),
        (4, "NLL and MSE gradients vs finite differences", gradients),
        (5, "clip contract", clip_contract),
        (6, "query accounting", query_accounting),
        (7, "desk experiment", desk_experiment),
        (8, "MSE ablation direction", mse_ablation),
        (9, "shifted latent statistics", stats_ablation),
        (10, "transferability", transfer),
        (11, "K insensitivity", k_insensitivity),
        (12, "serialization and resume", serialization),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let mut shared = Shared::default();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let o = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| check(&mut shared)))
            .unwrap_or_else(|p| outcome(false, format!("panicked: {}", panic_text(&p))));
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] {id:>2} {name}: {} ({:.1} s)", o.detail, start.elapsed().as_secs_f64());
        failed += (!o.pass) as usize;
    }
    if failed == 0 {
        println!("all criteria passed");
        return ExitCode::SUCCESS;
    }
    println!("{failed} criteria failed");
    if std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
