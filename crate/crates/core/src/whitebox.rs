//! White-box collectors used offline to build the adversarial training set.

use flowstrike_tensor::{softmax_cross_entropy, Prng, Tensor};

use crate::data::{Dataset, PairSet};
use crate::error::{Error, Result};
use crate::models::{argmax_rows, SmallCnn};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackParams {
    pub epsilon: f32,
    pub step_size: f32,
    pub iterations: usize,
    pub momentum: f32,
    pub random_start: bool,
}

impl AttackParams {
    /// Step schedule used for collection: step 2/255, with 10 iterations at
    /// 8/255 or below and 20 above.
    pub fn pgd_default(epsilon: f32) -> Self {
        Self {
            epsilon,
            step_size: (2.0 / 255.0f32).min(epsilon),
            iterations: if epsilon <= 8.0 / 255.0 + 1e-6 { 10 } else { 20 },
            momentum: 1.0,
            random_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.epsilon)
            && self.step_size > 0.0
            && self.step_size <= self.epsilon
            && self.iterations >= 1
            && (0.0..=1.0).contains(&self.momentum);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid attack parameters {self:?}")))
        }
    }
}

/// Which white-box method produces the training adversarials.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collector {
    Fgsm,
    Pgd,
    MiFgsm,
}

impl std::str::FromStr for Collector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fgsm" => Ok(Self::Fgsm),
            "pgd" => Ok(Self::Pgd),
            "mifgsm" | "mi-fgsm" => Ok(Self::MiFgsm),
            other => Err(Error::InvalidInput(format!("unknown collector {other:?}"))),
        }
    }
}

/// Logits averaged over the ensemble.
pub fn fused_logits(models: &[SmallCnn], x: &Tensor) -> Result<Tensor> {
    let (first, rest) = models
        .split_first()
        .ok_or_else(|| Error::InvalidInput("empty model ensemble".into()))?;
    let mut sum = first.forward(x)?;
    for m in rest {
        sum = sum.add(&m.forward(x)?)?;
    }
    Ok(sum.mul_scalar(1.0 / models.len() as f32)?)
}

pub fn fused_predict(models: &[SmallCnn], x: &Tensor) -> Result<Vec<usize>> {
    let logits = fused_logits(models, x)?;
    let k = logits.shape()[1];
    let labels = argmax_rows(&logits.data(), k);
    Ok(labels)
}

/// Gradient of the cross-entropy of the fused logits with respect to `x`.
pub fn input_gradient(models: &[SmallCnn], x: &[f32], shape: &[usize], labels: &[usize]) -> Result<Vec<f32>> {
    let xt = Tensor::param(x.to_vec(), shape)?;
    let loss = softmax_cross_entropy(&fused_logits(models, &xt)?, labels)?;
    loss.backward()?;
    let g = xt.grad().unwrap_or_else(|| vec![0.0; x.len()]);
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            iteration: 0,
            what: "input gradient".into(),
        });
    }
    Ok(g)
}

fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projection onto the L-inf ball of radius `epsilon` around `x0`,
/// intersected with `[0, 1]`.
pub fn project(x: &mut [f32], x0: &[f32], epsilon: f32) {
    for (v, &o) in x.iter_mut().zip(x0) {
        *v = v.clamp(o - epsilon, o + epsilon).clamp(0.0, 1.0);
    }
}

fn batch_shape(x: &Tensor) -> Result<Vec<usize>> {
    if x.rank() != 4 {
        return Err(Error::InvalidInput(format!("expected [N, C, H, W], got {:?}", x.shape())));
    }
    Ok(x.shape().to_vec())
}

/// `clamp(x + epsilon * sign(grad), 0, 1)` on a batch.
pub fn fgsm(model: &SmallCnn, x: &Tensor, labels: &[usize], epsilon: f32) -> Result<Tensor> {
    let shape = batch_shape(x)?;
    let x0 = x.to_vec();
    let g = input_gradient(std::slice::from_ref(model), &x0, &shape, labels)?;
    let out: Vec<f32> = x0
        .iter()
        .zip(&g)
        .map(|(&v, &d)| (v + epsilon * sign(d)).clamp(0.0, 1.0))
        .collect();
    Ok(Tensor::from_vec(out, &shape)?)
}

/// Projected sign-gradient ascent, optionally from a uniform random start.
pub fn pgd(models: &[SmallCnn], x: &Tensor, labels: &[usize], params: &AttackParams, rng: &mut Prng) -> Result<Tensor> {
    params.validate()?;
    let shape = batch_shape(x)?;
    let x0 = x.to_vec();
    let mut cur = x0.clone();
    if params.random_start {
        for v in cur.iter_mut() {
            *v += rng.uniform_range(-params.epsilon, params.epsilon);
        }
        project(&mut cur, &x0, params.epsilon);
    }
    for _ in 0..params.iterations {
        let g = input_gradient(models, &cur, &shape, labels)?;
        for (v, d) in cur.iter_mut().zip(&g) {
            *v += params.step_size * sign(*d);
        }
        project(&mut cur, &x0, params.epsilon);
    }
    Ok(Tensor::from_vec(cur, &shape)?)
}

/// Momentum iterative FGSM on the fused ensemble. Each example's gradient
/// is L1-normalized before entering the accumulator; an all-zero gradient
/// only decays the accumulator.
pub fn mifgsm_ensemble(models: &[SmallCnn], x: &Tensor, labels: &[usize], params: &AttackParams, rng: &mut Prng) -> Result<Tensor> {
    params.validate()?;
    let shape = batch_shape(x)?;
    let per = shape[1..].iter().product::<usize>();
    let x0 = x.to_vec();
    let mut cur = x0.clone();
    if params.random_start {
        for v in cur.iter_mut() {
            *v += rng.uniform_range(-params.epsilon, params.epsilon);
        }
        project(&mut cur, &x0, params.epsilon);
    }
    let mut acc = vec![0.0f32; x0.len()];
    for _ in 0..params.iterations {
        let g = input_gradient(models, &cur, &shape, labels)?;
        momentum_update(&mut acc, &g, per, params.momentum);
        for (v, a) in cur.iter_mut().zip(&acc) {
            *v += params.step_size * sign(*a);
        }
        project(&mut cur, &x0, params.epsilon);
    }
    Ok(Tensor::from_vec(cur, &shape)?)
}

/// `acc <- mu * acc + g / |g|_1` per example of `per` values.
pub fn momentum_update(acc: &mut [f32], g: &[f32], per: usize, mu: f32) {
    for (a, gi) in acc.chunks_mut(per).zip(g.chunks(per)) {
        let l1: f64 = gi.iter().map(|v| v.abs() as f64).sum();
        for (av, &gv) in a.iter_mut().zip(gi) {
            *av = mu * *av + if l1 > 0.0 { (gv as f64 / l1) as f32 } else { 0.0 };
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize)]
pub struct CollectionReport {
    pub attempted: usize,
    pub eligible: usize,
    pub successes: usize,
    pub stored: usize,
    pub empty: bool,
}

/// Attacks every example the collector classifies correctly and keeps the
/// successful adversarials.
pub fn collect_pairs(
    dataset: &Dataset,
    models: &[SmallCnn],
    collector: Collector,
    params: &AttackParams,
    seed: u64,
) -> Result<(PairSet, CollectionReport)> {
    collect_pairs_with(dataset, models, collector, params, seed, false)
}

/// As [`collect_pairs`]; with `keep_failures` the perturbed images that
/// still fool no collector are stored too.
pub fn collect_pairs_with(
    dataset: &Dataset,
    models: &[SmallCnn],
    collector: Collector,
    params: &AttackParams,
    seed: u64,
    keep_failures: bool,
) -> Result<(PairSet, CollectionReport)> {
    params.validate()?;
    if models.is_empty() {
        return Err(Error::InvalidInput("collector needs at least one model".into()));
    }
    const BATCH: usize = 64;
    let mut set = PairSet::new(params.epsilon, dataset.num_classes, dataset.shape);
    let mut eligible = 0;
    let mut successes = 0;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for (b, chunk) in idx.chunks(BATCH).enumerate() {
        let (x, y) = dataset.batch(chunk)?;
        let clean_pred = fused_predict(models, &x)?;
        let keep: Vec<usize> = chunk
            .iter()
            .zip(clean_pred.iter().zip(&y))
            .filter(|(_, (p, t))| p == t)
            .map(|(&i, _)| i)
            .collect();
        if keep.is_empty() {
            continue;
        }
        eligible += keep.len();
        let (x, y) = dataset.batch(&keep)?;
        let mut rng = Prng::stream(seed, b as u64);
        let adv = match collector {
            Collector::Fgsm => fgsm(&models[0], &x, &y, params.epsilon)?,
            Collector::Pgd => pgd(models, &x, &y, params, &mut rng)?,
            Collector::MiFgsm => mifgsm_ensemble(models, &x, &y, params, &mut rng)?,
        };
        let adv_pred = fused_predict(models, &adv)?;
        for (j, &i) in keep.iter().enumerate() {
            let fooled = adv_pred[j] != y[j];
            successes += fooled as usize;
            if fooled || keep_failures {
                set.push(dataset.examples[i].clone(), adv.select(j)?.detach())?;
            }
        }
    }
    let report = CollectionReport {
        attempted: dataset.len(),
        eligible,
        successes,
        stored: set.len(),
        empty: set.is_empty(),
    };
    Ok((set, report))
}
