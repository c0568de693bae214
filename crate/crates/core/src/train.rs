//! Alternating likelihood / reconstruction training of the flow.

use std::path::Path;

use flowstrike_tensor::tff::{self, Record};
use flowstrike_tensor::{Prng, Tensor};

use crate::data::PairSet;
use crate::error::{Error, Result};
use crate::flow::{is_numeric_failure, FlowModel, LatentVec};
use crate::models::SmallCnn;
use crate::optim::{adam_step, collect_grads, zero_grads, AdamConfig, AdamState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub max_iters: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mse_enabled: bool,
    /// Snapshot period in iterations; 0 disables periodic snapshots.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            max_iters: 2000,
            batch_size: 32,
            seed: 0,
            mse_enabled: true,
            checkpoint_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Pairs with their condition features precomputed by the frozen network.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub shape: [usize; 3],
    pub cond_shape: [usize; 3],
    pub clean: Vec<f32>,
    pub adversarial: Vec<f32>,
    pub conditions: Vec<f32>,
    pub len: usize,
}

/// Condition features of `[N, C, H, W]` images, computed without gradients.
pub fn condition_features(net: &SmallCnn, images: &Tensor) -> Result<Tensor> {
    let trainable: Vec<bool> = net.params().iter().map(Tensor::requires_grad).collect();
    net.freeze()?;
    let out = net.features(images).map(|f| f.detach());
    for (p, on) in net.params().iter().zip(trainable) {
        p.set_requires_grad(on)?;
    }
    out
}

impl TrainingSet {
    pub fn new(pairs: &PairSet, cond_net: &SmallCnn) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::NoPairs);
        }
        let cond_shape = cond_net.feature_shape();
        let mut set = Self {
            shape: pairs.shape,
            cond_shape,
            clean: Vec::new(),
            adversarial: Vec::new(),
            conditions: Vec::new(),
            len: pairs.len(),
        };
        let idx: Vec<usize> = (0..pairs.len()).collect();
        for chunk in idx.chunks(128) {
            let (clean, adv, _) = pairs.batch(chunk)?;
            set.conditions.extend_from_slice(&condition_features(cond_net, &clean)?.data());
            set.clean.extend_from_slice(&clean.data());
            set.adversarial.extend_from_slice(&adv.data());
        }
        Ok(set)
    }

    fn gather(&self, src: &[f32], per: usize, idx: &[usize], shape: [usize; 3]) -> Result<Tensor> {
        let mut out = Vec::with_capacity(idx.len() * per);
        for &i in idx {
            out.extend_from_slice(&src[i * per..(i + 1) * per]);
        }
        Ok(Tensor::from_vec(out, &[idx.len(), shape[0], shape[1], shape[2]])?)
    }

    /// `(clean, adversarial, condition)` batches for `idx`.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Tensor)> {
        let per: usize = self.shape.iter().product();
        let cper: usize = self.cond_shape.iter().product();
        Ok((
            self.gather(&self.clean, per, idx, self.shape)?,
            self.gather(&self.adversarial, per, idx, self.shape)?,
            self.gather(&self.conditions, cper, idx, self.cond_shape)?,
        ))
    }
}

/// Mean over the batch of `-log N(z; 0, I) - logdet` for `x' -> z`.
pub fn nll_loss(flow: &FlowModel, adv: &Tensor, cond: &Tensor) -> Result<Tensor> {
    let (z, logdet) = flow.encode_frozen(adv, cond)?;
    Ok(z.neg_log_prior()?.sub(&logdet)?.mean()?)
}

/// `n` standard-normal latents in the flow's layout.
pub fn standard_latent(flow: &FlowModel, n: usize, rng: &mut Prng) -> Result<LatentVec> {
    LatentVec::unflatten(&rng.normal_vec(n * flow.config.latent_dim()), n, &flow.config)
}

/// Mean over the batch of the Euclidean distance between `decode(z; c)` and
/// the target adversarial image.
pub fn mse_loss(flow: &FlowModel, adv: &Tensor, cond: &Tensor, z: &LatentVec) -> Result<Tensor> {
    let generated = flow.decode(z, cond)?;
    Ok(generated.sub(adv)?.square()?.sum_per_sample()?.sqrt()?.mean()?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub nll: f32,
    pub mse: Option<f32>,
}

/// Everything besides the flow parameters needed to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: usize,
    pub adam: AdamState,
    pub history: Vec<LossRecord>,
}

impl TrainState {
    pub fn new(flow: &FlowModel) -> Self {
        Self {
            iteration: 0,
            adam: AdamState::new(&flow.params()),
            history: Vec::new(),
        }
    }
}

fn diverged(iteration: usize, what: &str) -> Error {
    Error::Diverged {
        iteration,
        what: what.into(),
    }
}

fn checked(iteration: usize, what: &str, r: Result<Tensor>) -> Result<Tensor> {
    match r {
        Ok(t) if t.item().is_finite() => Ok(t),
        Ok(_) => Err(diverged(iteration, what)),
        Err(e) if is_numeric_failure(&e) => Err(diverged(iteration, what)),
        Err(e) => Err(e),
    }
}

fn step(loss: &Tensor, state: &mut TrainState, adam: &AdamConfig, params: &[Tensor]) -> Result<()> {
    zero_grads(params);
    loss.backward()?;
    let grads = collect_grads(params);
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(diverged(state.iteration, "gradient"));
    }
    adam_step(params, &grads, &mut state.adam, adam)?;
    zero_grads(params);
    Ok(())
}

/// One training iteration: an NLL update, then (if enabled) an MSE update on
/// the same batch with freshly drawn latents. Batch and latents come from a
/// random stream keyed by the iteration number.
pub fn train_iteration(flow: &mut FlowModel, data: &TrainingSet, cfg: &TrainConfig, state: &mut TrainState) -> Result<LossRecord> {
    let t = state.iteration;
    let mut rng = Prng::stream(cfg.seed, t as u64);
    let idx = rng.sample_indices(data.len, cfg.batch_size.min(data.len));
    let (_, adv, cond) = data.batch(&idx)?;
    if !flow.initialized {
        flow.initialize(&adv, &cond)?;
    }
    let params = flow.params();
    let adam = cfg.adam();
    let nll = checked(t, "nll loss", nll_loss(flow, &adv, &cond))?;
    step(&nll, state, &adam, &params)?;
    let mse = if cfg.mse_enabled {
        let z = standard_latent(flow, idx.len(), &mut rng)?;
        let mse = checked(t, "mse loss", mse_loss(flow, &adv, &cond, &z))?;
        step(&mse, state, &adam, &params)?;
        Some(mse.item())
    } else {
        None
    };
    let record = LossRecord {
        iteration: t,
        nll: nll.item(),
        mse,
    };
    state.history.push(record);
    state.iteration += 1;
    Ok(record)
}

/// Runs iterations until `cfg.max_iters`, calling `on_checkpoint` every
/// `cfg.checkpoint_every` iterations and at the end. On divergence the flow
/// and state are rolled back to the last checkpoint and the error returned.
pub fn train_from(
    flow: &mut FlowModel,
    state: &mut TrainState,
    data: &TrainingSet,
    cfg: &TrainConfig,
    mut on_checkpoint: impl FnMut(&FlowModel, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if data.shape != flow.config.in_shape || data.cond_shape != flow.config.cond_shape {
        return Err(Error::InvalidInput("training set does not match the flow config".into()));
    }
    flow.set_trainable(true)?;
    let mut good = (flow.deep_clone()?, state.clone());
    while state.iteration < cfg.max_iters {
        if let Err(e) = train_iteration(flow, data, cfg, state) {
            flow.copy_from(&good.0)?;
            *state = good.1;
            return Err(e);
        }
        let done = state.iteration == cfg.max_iters;
        if done || (cfg.checkpoint_every > 0 && state.iteration.is_multiple_of(cfg.checkpoint_every)) {
            on_checkpoint(flow, state)?;
            good = (flow.deep_clone()?, state.clone());
        }
    }
    Ok(())
}

pub fn train(flow: &mut FlowModel, data: &TrainingSet, cfg: &TrainConfig) -> Result<Vec<LossRecord>> {
    let mut state = TrainState::new(flow);
    train_from(flow, &mut state, data, cfg, |_, _| Ok(()))?;
    Ok(state.history)
}

const STATE_TAG: u32 = 0x7a;

/// Flow parameters followed by the optimizer state and loss history.
pub fn checkpoint_records(flow: &FlowModel, state: &TrainState) -> Result<Vec<Record>> {
    let mut recs = flow.to_records()?;
    recs.push(Record::ints(&[STATE_TAG, state.adam.m.len() as u32])?);
    recs.push(Record::u64_value(state.iteration as u64));
    recs.push(Record::u64_value(state.adam.step));
    for (m, v) in state.adam.m.iter().zip(&state.adam.v) {
        recs.push(Record::new(vec![m.len()], m.clone())?);
        recs.push(Record::new(vec![v.len()], v.clone())?);
    }
    let n = state.history.len();
    let mut hist = Vec::with_capacity(n * 4);
    for r in &state.history {
        let it = r.iteration as u64;
        hist.push((it & 0xffffff) as f32);
        hist.push((it >> 24) as f32);
        hist.push(r.nll);
        hist.push(r.mse.map_or(-1.0, |_| 1.0));
    }
    recs.push(Record::new(vec![n, 4], hist)?);
    let mse: Vec<f32> = state.history.iter().map(|r| r.mse.unwrap_or(0.0)).collect();
    recs.push(Record::new(vec![n], mse)?);
    Ok(recs)
}

pub fn checkpoint_from_records(recs: &[Record]) -> Result<(FlowModel, TrainState)> {
    let pos = recs
        .iter()
        .position(|r| r.as_ints().map(|v| v.len() == 2 && v[0] == STATE_TAG).unwrap_or(false))
        .ok_or_else(|| Error::Format("checkpoint has no optimizer state".into()))?;
    let flow = FlowModel::from_records(&recs[..pos])?;
    let slots = recs[pos].as_ints()?[1] as usize;
    let rest = &recs[pos + 1..];
    if rest.len() != 2 + 2 * slots + 2 || slots != flow.params().len() {
        return Err(Error::Format("checkpoint optimizer state is malformed".into()));
    }
    let iteration = rest[0].as_u64()? as usize;
    let step = rest[1].as_u64()?;
    let mut m = Vec::with_capacity(slots);
    let mut v = Vec::with_capacity(slots);
    for (i, p) in flow.params().iter().enumerate() {
        let (mr, vr) = (&rest[2 + 2 * i], &rest[3 + 2 * i]);
        if mr.data.len() != p.numel() || vr.data.len() != p.numel() {
            return Err(Error::Format(format!("moment size mismatch at parameter {i}")));
        }
        m.push(mr.data.clone());
        v.push(vr.data.clone());
    }
    let hist = &rest[2 + 2 * slots];
    let mse = &rest[3 + 2 * slots];
    let n = mse.data.len();
    if hist.data.len() != n * 4 {
        return Err(Error::Format("loss history is malformed".into()));
    }
    let history = (0..n)
        .map(|i| {
            let h = &hist.data[i * 4..i * 4 + 4];
            LossRecord {
                iteration: (h[0] as u64 | (h[1] as u64) << 24) as usize,
                nll: h[2],
                mse: (h[3] > 0.0).then_some(mse.data[i]),
            }
        })
        .collect();
    Ok((
        flow,
        TrainState {
            iteration,
            adam: AdamState { step, m, v },
            history,
        },
    ))
}

pub fn save_checkpoint(path: impl AsRef<Path>, flow: &FlowModel, state: &TrainState) -> Result<()> {
    Ok(tff::write_records(path, &checkpoint_records(flow, state)?)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(FlowModel, TrainState)> {
    checkpoint_from_records(&tff::read_records(path)?)
}

/// `iteration,nll,mse` lines; `mse` is empty when disabled.
pub fn history_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("iteration,nll,mse\n");
    for r in history {
        let mse = r.mse.map(|v| v.to_string()).unwrap_or_default();
        s.push_str(&format!("{},{},{}\n", r.iteration, r.nll, mse));
    }
    s
}
