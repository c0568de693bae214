//! Target classifiers, the frozen condition network and the hard-label oracle.

use std::path::Path;

use flowstrike_tensor::tff::{self, Record};
use flowstrike_tensor::{avg_pool2x2, conv2d, matmul, softmax_cross_entropy, Prng, Tensor};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{adam_step, collect_grads, zero_grads, AdamConfig, AdamState};

pub const CONV_WIDTHS: [usize; 3] = [16, 32, 64];

const ARCH_TAG: u32 = 0x5c;

/// Three conv(3x3) + ReLU + 2x2 average-pool stages and a linear head.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    pub in_shape: [usize; 3],
    pub num_classes: usize,
    convs: Vec<(Tensor, Tensor)>,
    head_w: Tensor,
    head_b: Tensor,
}

impl SmallCnn {
    /// He-initialized weights, zero biases.
    pub fn new(in_shape: [usize; 3], num_classes: usize, seed: u64) -> Result<Self> {
        let [c, h, w] = in_shape;
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput(format!("spatial size {h}x{w} must be a multiple of 8")));
        }
        if num_classes < 2 {
            return Err(Error::InvalidInput("need at least two classes".into()));
        }
        let mut rng = Prng::new(seed);
        let mut convs = Vec::new();
        let mut cin = c;
        for &cout in &CONV_WIDTHS {
            let fan_in = cin * 9;
            let std = (2.0 / fan_in as f32).sqrt();
            let w: Vec<f32> = rng.normal_vec(cout * fan_in).into_iter().map(|v| v * std).collect();
            convs.push((
                Tensor::param(w, &[cout, cin, 3, 3])?,
                Tensor::param(vec![0.0; cout], &[cout])?,
            ));
            cin = cout;
        }
        let features = Self::flat_features(in_shape);
        let std = (2.0 / features as f32).sqrt();
        let hw: Vec<f32> = rng.normal_vec(features * num_classes).into_iter().map(|v| v * std).collect();
        Ok(Self {
            in_shape,
            num_classes,
            convs,
            head_w: Tensor::param(hw, &[features, num_classes])?,
            head_b: Tensor::param(vec![0.0; num_classes], &[num_classes])?,
        })
    }

    fn flat_features(in_shape: [usize; 3]) -> usize {
        CONV_WIDTHS[2] * (in_shape[1] / 8) * (in_shape[2] / 8)
    }

    /// Shape of [`SmallCnn::features`] for one image.
    pub fn feature_shape(&self) -> [usize; 3] {
        [CONV_WIDTHS[2], self.in_shape[1] / 4, self.in_shape[2] / 4]
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for (w, b) in &self.convs {
            out.push(w.clone());
            out.push(b.clone());
        }
        out.push(self.head_w.clone());
        out.push(self.head_b.clone());
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    /// Stops gradient collection into the parameters.
    pub fn freeze(&self) -> Result<()> {
        for p in self.params() {
            p.set_requires_grad(false)?;
        }
        Ok(())
    }

    pub fn unfreeze(&self) -> Result<()> {
        for p in self.params() {
            p.set_requires_grad(true)?;
        }
        Ok(())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.in_shape {
            return Err(Error::InvalidInput(format!(
                "model expects [N, {:?}], got {s:?}",
                self.in_shape
            )));
        }
        Ok(())
    }

    fn stage(&self, i: usize, x: &Tensor) -> Result<Tensor> {
        let (w, b) = &self.convs[i];
        Ok(conv2d(x, w, Some(b), 1, 1)?.relu()?)
    }

    /// Activation of the last conv layer before pooling: `[N, 64, H/4, W/4]`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let h = avg_pool2x2(&self.stage(0, x)?)?;
        let h = avg_pool2x2(&self.stage(1, &h)?)?;
        self.stage(2, &h)
    }

    /// Logits `[N, num_classes]`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = avg_pool2x2(&self.features(x)?)?;
        let n = f.shape()[0];
        let flat = f.reshape(&[n, Self::flat_features(self.in_shape)])?;
        let logits = matmul(&flat, &self.head_w)?;
        Ok(logits.add(&self.head_b.expand_channels(&[n, self.num_classes])?)?)
    }

    /// Predicted classes for a batch, argmax with ties to the lowest index.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.forward(x)?;
        let labels = argmax_rows(&logits.data(), self.num_classes);
        Ok(labels)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(tff::write_records(path, &self.to_records()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(&tff::read_records(path)?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(tff::encode(&self.to_records()?)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_records(&tff::decode(bytes)?)
    }

    fn header(&self) -> Vec<u32> {
        let [c, h, w] = self.in_shape;
        let mut v = vec![ARCH_TAG, c as u32, h as u32, w as u32, self.num_classes as u32];
        v.extend(CONV_WIDTHS.iter().map(|&x| x as u32));
        v
    }

    fn to_records(&self) -> Result<Vec<Record>> {
        let mut recs = vec![Record::ints(&self.header())?];
        recs.extend(self.params().iter().map(Record::from_tensor));
        Ok(recs)
    }

    /// Rebuilds a model from its records; the result is frozen.
    fn from_records(recs: &[Record]) -> Result<Self> {
        let header = recs
            .first()
            .ok_or_else(|| Error::Format("empty model file".into()))?
            .as_ints()?;
        if header.len() != 8 || header[0] != ARCH_TAG || header[5..] != [16, 32, 64] {
            return Err(Error::Format(format!("unrecognised model header {header:?}")));
        }
        let in_shape = [header[1] as usize, header[2] as usize, header[3] as usize];
        let model = Self::new(in_shape, header[4] as usize, 0)?;
        let params = model.params();
        if recs.len() != params.len() + 1 {
            return Err(Error::Format(format!(
                "model file has {} parameter records, expected {}",
                recs.len() - 1,
                params.len()
            )));
        }
        for (p, r) in params.iter().zip(&recs[1..]) {
            if r.shape != p.shape() {
                return Err(Error::Format(format!(
                    "parameter shape {:?} does not match {:?}",
                    r.shape,
                    p.shape()
                )));
            }
            p.assign(&r.data)?;
        }
        model.freeze()?;
        Ok(model)
    }
}

pub fn argmax_rows(data: &[f32], k: usize) -> Vec<usize> {
    data.chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 2e-3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Trains a fresh model with softmax cross-entropy and Adam. Returns the
/// frozen model and the per-step training losses.
pub fn train_classifier(dataset: &Dataset, cfg: &ClassifierConfig) -> Result<(SmallCnn, Vec<f32>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty dataset".into()));
    }
    let model = SmallCnn::new(dataset.shape, dataset.num_classes, cfg.seed)?;
    let params = model.params();
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new(&params);
    let mut rng = Prng::stream(cfg.seed, 1);
    let mut losses = Vec::new();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    for _ in 0..cfg.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let (x, y) = dataset.batch(chunk)?;
            let loss = softmax_cross_entropy(&model.forward(&x)?, &y)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Diverged {
                    iteration: losses.len(),
                    what: "classifier loss".into(),
                });
            }
            zero_grads(&params);
            loss.backward()?;
            adam_step(&params, &collect_grads(&params), &mut state, &adam)?;
            losses.push(value);
        }
    }
    zero_grads(&params);
    model.freeze()?;
    Ok((model, losses))
}

pub fn accuracy(model: &SmallCnn, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("accuracy of an empty dataset".into()));
    }
    let mut correct = 0;
    let idx: Vec<usize> = (0..dataset.len()).collect();
    for chunk in idx.chunks(128) {
        let (x, y) = dataset.batch(chunk)?;
        correct += model
            .predict(&x)?
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Label-only access to a model with an exact query counter.
///
/// Clones share the model but carry independent counters.
#[derive(Debug, Clone)]
pub struct QueryOracle {
    model: SmallCnn,
    counter: u64,
    budget: Option<u64>,
}

impl QueryOracle {
    pub fn new(model: SmallCnn, budget: Option<u64>) -> Self {
        Self {
            model,
            counter: 0,
            budget,
        }
    }

    pub fn counter(&self) -> u64 {
        self.counter
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn set_budget(&mut self, budget: Option<u64>) {
        self.budget = budget;
    }

    pub fn remaining(&self) -> Option<u64> {
        self.budget.map(|b| b.saturating_sub(self.counter))
    }

    pub fn model(&self) -> &SmallCnn {
        &self.model
    }

    /// One counted hard-label decision for a single `[C, H, W]` image.
    pub fn hard_label(&mut self, image: &Tensor) -> Result<usize> {
        if let Some(b) = self.budget {
            if self.counter >= b {
                return Err(Error::BudgetExceeded(b));
            }
        }
        let label = self.classify_uncounted(image)?;
        self.counter += 1;
        Ok(label)
    }

    /// The same decision without touching the counter (eligibility checks
    /// that are configured to sit outside the budget).
    pub fn classify_uncounted(&self, image: &Tensor) -> Result<usize> {
        if image.shape() != self.model.in_shape {
            return Err(Error::InvalidInput(format!(
                "oracle expects {:?}, got {:?}",
                self.model.in_shape,
                image.shape()
            )));
        }
        let x = image.reshape(&[1, image.shape()[0], image.shape()[1], image.shape()[2]])?;
        Ok(self.model.predict(&x)?[0])
    }
}
