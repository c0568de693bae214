//! Conditional multi-scale normalizing flow.
//!
//! Encoding runs `L - 1` blocks of squeeze, `K` steps and split, then a
//! final squeeze and `K` steps. A step is actnorm, an invertible 1x1
//! convolution and an affine coupling whose network also sees the
//! condition features, resized to the step's resolution.

use std::f64::consts::PI;
use std::path::Path;

use flowstrike_tensor::tff::{self, Record};
use flowstrike_tensor::{conv2d, inverse, log_abs_det, Prng, Tensor, TensorError};

use crate::error::{Error, Result};

const FLOW_TAG: u32 = 0xf1;

/// Bias added to the raw coupling scale before the sigmoid.
pub const SCALE_SHIFT: f32 = 2.0;

/// Lower bound on the coupling scale, applied identically in both
/// directions so the layer stays a bijection.
pub const SCALE_FLOOR: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FlowConfig {
    pub levels: usize,
    pub steps: usize,
    pub in_shape: [usize; 3],
    pub cond_shape: [usize; 3],
    pub hidden: usize,
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.in_shape;
        let div = 1usize << self.levels.min(30);
        if self.levels == 0 || self.steps == 0 || self.hidden == 0 {
            return Err(Error::InvalidInput("levels, steps and hidden width must be positive".into()));
        }
        if c == 0 || h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(Error::InvalidInput(format!(
                "input {h}x{w} is not divisible by 2^{} (levels)",
                self.levels
            )));
        }
        if self.cond_shape.contains(&0) {
            return Err(Error::InvalidInput("condition shape has a zero dimension".into()));
        }
        Ok(())
    }

    /// `[channels, h, w]` of the tensor the steps of each level act on.
    pub fn level_shapes(&self) -> Vec<[usize; 3]> {
        let [mut c, mut h, mut w] = self.in_shape;
        let mut out = Vec::with_capacity(self.levels);
        for l in 0..self.levels {
            c *= 4;
            h /= 2;
            w /= 2;
            out.push([c, h, w]);
            if l + 1 < self.levels {
                c /= 2;
            }
        }
        out
    }

    /// Per-example shapes of the latent parts: one split-off half per
    /// non-final level, then the final tensor.
    pub fn latent_shapes(&self) -> Vec<[usize; 3]> {
        let levels = self.level_shapes();
        levels
            .iter()
            .enumerate()
            .map(|(l, &[c, h, w])| if l + 1 < self.levels { [c - c / 2, h, w] } else { [c, h, w] })
            .collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.in_shape.iter().product()
    }
}

/// Per-channel affine map `y = scale * (x + bias)`.
#[derive(Debug, Clone)]
pub struct ActNorm {
    pub scale: Tensor,
    pub bias: Tensor,
}

impl ActNorm {
    fn new(c: usize) -> Result<Self> {
        Ok(Self {
            scale: Tensor::param(vec![1.0; c], &[c])?,
            bias: Tensor::param(vec![0.0; c], &[c])?,
        })
    }

    /// Sets bias and scale so that `x` comes out with zero mean and unit
    /// standard deviation per channel.
    fn init_from(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let d = x.data();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for b in 0..n {
            for ch in 0..c {
                let plane = &d[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                mean[ch] += plane.iter().map(|&v| v as f64).sum::<f64>();
            }
        }
        let count = (n * hw) as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for ch in 0..c {
                let plane = &d[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                var[ch] += plane.iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
            }
        }
        let bias: Vec<f32> = mean.iter().map(|m| -m as f32).collect();
        let scale: Vec<f32> = var.iter().map(|v| (1.0 / ((v / count).sqrt() + 1e-6)) as f32).collect();
        self.bias.assign(&bias)?;
        self.scale.assign(&scale)?;
        Ok(())
    }

    fn check(&self) -> Result<()> {
        if self.scale.data().contains(&0.0) {
            return Err(Error::InvalidInput("actnorm scale has a zero entry".into()));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check()?;
        let s = x.shape();
        let y = x
            .add(&self.bias.expand_channels(s)?)?
            .mul(&self.scale.expand_channels(s)?)?;
        let hw = (s[2] * s[3]) as f32;
        let logdet = self.scale.abs()?.log()?.sum()?.mul_scalar(hw)?;
        Ok((y, logdet))
    }

    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        self.check()?;
        let s = y.shape();
        Ok(y.div(&self.scale.expand_channels(s)?)?.sub(&self.bias.expand_channels(s)?)?)
    }
}

/// Channel mixing by a dense invertible matrix at every pixel.
#[derive(Debug, Clone)]
pub struct InvConv {
    pub weight: Tensor,
}

/// Random orthogonal `n x n` matrix (Gram-Schmidt on Gaussian columns).
pub fn random_orthogonal(n: usize, rng: &mut Prng) -> Vec<f32> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    while q.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal() as f64).collect();
        for u in &q {
            let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    // rows of q are orthonormal
    q.into_iter().flatten().map(|v| v as f32).collect()
}

impl InvConv {
    fn new(c: usize, rng: &mut Prng) -> Result<Self> {
        Ok(Self {
            weight: Tensor::param(random_orthogonal(c, rng), &[c, c])?,
        })
    }

    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = x.shape();
        let c = s[1];
        let logdet = log_abs_det(&self.weight)?.mul_scalar((s[2] * s[3]) as f32)?;
        let y = conv2d(x, &self.weight.reshape(&[c, c, 1, 1])?, None, 1, 0)?;
        Ok((y, logdet))
    }

    pub fn decode(&self, y: &Tensor) -> Result<Tensor> {
        let c = y.shape()[1];
        let inv = inverse(&self.weight)?;
        Ok(conv2d(y, &inv.reshape(&[c, c, 1, 1])?, None, 1, 0)?)
    }
}

/// Affine coupling: the second channel half is scaled and shifted by a
/// network of the first half and the condition.
#[derive(Debug, Clone)]
pub struct Coupling {
    pub convs: [(Tensor, Tensor); 3],
}

fn he_conv(cout: usize, cin: usize, rng: &mut Prng) -> Result<(Tensor, Tensor)> {
    let fan_in = cin * 9;
    let std = (2.0 / fan_in as f32).sqrt();
    let w = rng.normal_vec(cout * fan_in).into_iter().map(|v| v * std).collect();
    Ok((
        Tensor::param(w, &[cout, cin, 3, 3])?,
        Tensor::param(vec![0.0; cout], &[cout])?,
    ))
}

impl Coupling {
    fn new(c: usize, cond_c: usize, hidden: usize, rng: &mut Prng) -> Result<Self> {
        let ca = c / 2;
        let cb = c - ca;
        Ok(Self {
            convs: [
                he_conv(hidden, ca + cond_c, rng)?,
                he_conv(hidden, hidden, rng)?,
                (
                    Tensor::param(vec![0.0; 2 * cb * hidden * 9], &[2 * cb, hidden, 3, 3])?,
                    Tensor::param(vec![0.0; 2 * cb], &[2 * cb])?,
                ),
            ],
        })
    }

    /// `(scale, shift)` for the second half, each `[N, Cb, H, W]`.
    fn scale_shift(&self, xa: &Tensor, cond: &Tensor, cb: usize) -> Result<(Tensor, Tensor)> {
        let h = Tensor::concat_channels(&[xa.clone(), cond.clone()])?;
        let [(w1, b1), (w2, b2), (w3, b3)] = &self.convs;
        let h = conv2d(&h, w1, Some(b1), 1, 1)?.relu()?;
        let h = conv2d(&h, w2, Some(b2), 1, 1)?.relu()?;
        let out = conv2d(&h, w3, Some(b3), 1, 1)?;
        let scale = out
            .narrow_channels(0, cb)?
            .add_scalar(SCALE_SHIFT)?
            .sigmoid()?
            .clamp(SCALE_FLOOR, 1.0)?;
        let shift = out.narrow_channels(cb, cb)?;
        Ok((scale, shift))
    }

    fn halves(x: &Tensor) -> Result<(Tensor, Tensor, usize)> {
        let c = x.shape()[1];
        if !c.is_multiple_of(2) {
            return Err(Error::InvalidInput(format!("coupling needs an even channel count, got {c}")));
        }
        let ca = c / 2;
        Ok((x.narrow_channels(0, ca)?, x.narrow_channels(ca, c - ca)?, c - ca))
    }

    /// `cond` must already be resized to `x`'s spatial size.
    pub fn encode(&self, x: &Tensor, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let (xa, xb, cb) = Self::halves(x)?;
        let (scale, shift) = self.scale_shift(&xa, cond, cb)?;
        let yb = xb.mul(&scale)?.add(&shift)?;
        let logdet = scale.log()?.sum_per_sample()?;
        Ok((Tensor::concat_channels(&[xa, yb])?, logdet))
    }

    pub fn decode(&self, y: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let (ya, yb, cb) = Self::halves(y)?;
        let (scale, shift) = self.scale_shift(&ya, cond, cb)?;
        let xb = yb.sub(&shift)?.div(&scale)?;
        Ok(Tensor::concat_channels(&[ya, xb])?)
    }
}

#[derive(Debug, Clone)]
pub struct FlowStep {
    pub actnorm: ActNorm,
    pub invconv: InvConv,
    pub coupling: Coupling,
}

impl FlowStep {
    fn params(&self) -> Vec<Tensor> {
        let mut v = vec![
            self.actnorm.scale.clone(),
            self.actnorm.bias.clone(),
            self.invconv.weight.clone(),
        ];
        for (w, b) in &self.coupling.convs {
            v.push(w.clone());
            v.push(b.clone());
        }
        v
    }
}

/// Latent code: one tensor per split level plus the final one, each
/// `[N, c, h, w]`.
#[derive(Debug, Clone)]
pub struct LatentVec {
    pub parts: Vec<Tensor>,
}

impl LatentVec {
    pub fn batch_size(&self) -> usize {
        self.parts[0].shape()[0]
    }

    /// Concatenates the parts into `[N, D]`.
    pub fn flatten(&self) -> Result<Tensor> {
        let n = self.batch_size();
        let d: usize = self.parts.iter().map(|p| p.numel() / n).sum();
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for p in &self.parts {
                let per = p.numel() / n;
                out.extend_from_slice(&p.data()[i * per..(i + 1) * per]);
            }
        }
        Ok(Tensor::from_vec(out, &[n, d])?)
    }

    /// Inverse of [`LatentVec::flatten`] for the layout of `config`.
    pub fn unflatten(flat: &[f32], n: usize, config: &FlowConfig) -> Result<Self> {
        let shapes = config.latent_shapes();
        let d = config.latent_dim();
        if flat.len() != n * d {
            return Err(Error::InvalidInput(format!(
                "flat latent has {} values, expected {n} x {d}",
                flat.len()
            )));
        }
        let mut parts = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for s in &shapes {
            let per: usize = s.iter().product();
            let mut buf = Vec::with_capacity(n * per);
            for i in 0..n {
                buf.extend_from_slice(&flat[i * d + offset..i * d + offset + per]);
            }
            parts.push(Tensor::from_vec(buf, &[n, s[0], s[1], s[2]])?);
            offset += per;
        }
        Ok(Self { parts })
    }

    /// `sum(0.5 z^2 + 0.5 log 2pi)` per example: `[N]`.
    pub fn neg_log_prior(&self) -> Result<Tensor> {
        let mut total: Option<Tensor> = None;
        for p in &self.parts {
            let per = (p.numel() / self.batch_size()) as f64;
            let term = p.square()?.sum_per_sample()?.affine(0.5, (0.5 * (2.0 * PI).ln() * per) as f32)?;
            total = Some(match total {
                None => term,
                Some(t) => t.add(&term)?,
            });
        }
        total.ok_or_else(|| Error::InvalidInput("empty latent".into()))
    }
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    pub config: FlowConfig,
    /// `levels[l][k]`
    pub levels: Vec<Vec<FlowStep>>,
    pub initialized: bool,
}

impl FlowModel {
    pub fn new(config: FlowConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Prng::new(seed);
        let mut levels = Vec::with_capacity(config.levels);
        for &[c, _, _] in &config.level_shapes() {
            let mut steps = Vec::with_capacity(config.steps);
            for _ in 0..config.steps {
                steps.push(FlowStep {
                    actnorm: ActNorm::new(c)?,
                    invconv: InvConv::new(c, &mut rng)?,
                    coupling: Coupling::new(c, config.cond_shape[0], config.hidden, &mut rng)?,
                });
            }
            levels.push(steps);
        }
        Ok(Self {
            config,
            levels,
            initialized: false,
        })
    }

    /// All trainable tensors in checkpoint order.
    pub fn params(&self) -> Vec<Tensor> {
        self.levels.iter().flatten().flat_map(FlowStep::params).collect()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(Tensor::numel).sum()
    }

    /// Turns gradient tracking of every parameter on or off.
    pub fn set_trainable(&self, on: bool) -> Result<()> {
        for p in self.params() {
            p.set_requires_grad(on)?;
        }
        Ok(())
    }

    fn check_inputs(&self, x_shape: &[usize], c: &Tensor) -> Result<usize> {
        let [ci, hi, wi] = self.config.in_shape;
        if x_shape.len() != 4 || x_shape[1..] != [ci, hi, wi] {
            return Err(Error::InvalidInput(format!(
                "flow expects [N, {ci}, {hi}, {wi}], got {x_shape:?}"
            )));
        }
        let n = x_shape[0];
        if c.shape().len() != 4 || c.shape()[0] != n || c.shape()[1..] != self.config.cond_shape {
            return Err(Error::InvalidInput(format!(
                "condition must be [{n}, {:?}], got {:?}",
                self.config.cond_shape,
                c.shape()
            )));
        }
        Ok(n)
    }

    fn resized_conditions(&self, c: &Tensor) -> Result<Vec<Tensor>> {
        self.config
            .level_shapes()
            .iter()
            .map(|&[_, h, w]| Ok(c.resize_nearest(h, w)?))
            .collect()
    }

    /// Data-dependent actnorm initialization from one batch, then marks the
    /// model initialized.
    pub fn initialize(&mut self, x: &Tensor, c: &Tensor) -> Result<()> {
        self.run_encode(x, c, true)?;
        self.initialized = true;
        Ok(())
    }

    /// `x -> z` with the log-determinant of that direction, `[N]`.
    /// An uninitialized model initializes its actnorm layers from this batch.
    pub fn encode(&mut self, x: &Tensor, c: &Tensor) -> Result<(LatentVec, Tensor)> {
        if !self.initialized {
            self.initialize(x, c)?;
        }
        self.encode_frozen(x, c)
    }

    /// Encoding that never touches the actnorm initialization.
    pub fn encode_frozen(&self, x: &Tensor, c: &Tensor) -> Result<(LatentVec, Tensor)> {
        self.run_encode(x, c, false)
    }

    fn run_encode(&self, x: &Tensor, c: &Tensor, init: bool) -> Result<(LatentVec, Tensor)> {
        let n = self.check_inputs(x.shape(), c)?;
        let conds = self.resized_conditions(c)?;
        let mut logdet = Tensor::zeros(&[n]);
        let mut parts = Vec::with_capacity(self.config.levels);
        let mut h = x.clone();
        for (l, steps) in self.levels.iter().enumerate() {
            h = h.squeeze2x2()?;
            for step in steps {
                if init {
                    step.actnorm.init_from(&h)?;
                }
                let (y, ld) = step.actnorm.encode(&h)?;
                logdet = logdet.add(&ld)?;
                let (y, ld) = step.invconv.encode(&y)?;
                logdet = logdet.add(&ld)?;
                let (y, ld) = step.coupling.encode(&y, &conds[l])?;
                logdet = logdet.add(&ld)?;
                h = y;
            }
            if l + 1 < self.levels.len() {
                let ch = h.shape()[1];
                parts.push(h.narrow_channels(ch / 2, ch - ch / 2)?);
                h = h.narrow_channels(0, ch / 2)?;
            }
        }
        parts.push(h);
        Ok((LatentVec { parts }, logdet))
    }

    /// `z -> x`, the exact inverse of [`FlowModel::encode_frozen`].
    pub fn decode(&self, z: &LatentVec, c: &Tensor) -> Result<Tensor> {
        let shapes = self.config.latent_shapes();
        if z.parts.len() != shapes.len() {
            return Err(Error::InvalidInput(format!(
                "latent has {} parts, expected {}",
                z.parts.len(),
                shapes.len()
            )));
        }
        let n = z.batch_size();
        for (p, s) in z.parts.iter().zip(&shapes) {
            if p.shape() != [n, s[0], s[1], s[2]] {
                return Err(Error::InvalidInput(format!(
                    "latent part {:?} does not match {s:?}",
                    p.shape()
                )));
            }
        }
        let [ci, hi, wi] = self.config.in_shape;
        self.check_inputs(&[n, ci, hi, wi], c)?;
        let conds = self.resized_conditions(c)?;
        let last = self.levels.len() - 1;
        let mut h = z.parts[last].clone();
        for l in (0..self.levels.len()).rev() {
            if l < last {
                h = Tensor::concat_channels(&[h, z.parts[l].clone()])?;
            }
            for step in self.levels[l].iter().rev() {
                h = step.coupling.decode(&h, &conds[l])?;
                h = step.invconv.decode(&h)?;
                h = step.actnorm.decode(&h)?;
            }
            h = h.unsqueeze2x2()?;
        }
        Ok(h)
    }

    /// `log p(x | c)` under the standard-normal base density, `[N]`.
    pub fn log_prob(&self, x: &Tensor, c: &Tensor) -> Result<Tensor> {
        let (z, logdet) = self.encode_frozen(x, c)?;
        Ok(logdet.sub(&z.neg_log_prior()?)?)
    }

    fn header(&self) -> Vec<u32> {
        let c = &self.config;
        let mut v = vec![FLOW_TAG, c.levels as u32, c.steps as u32];
        v.extend(c.in_shape.iter().map(|&d| d as u32));
        v.extend(c.cond_shape.iter().map(|&d| d as u32));
        v.push(c.hidden as u32);
        v.push(self.initialized as u32);
        v
    }

    pub fn to_records(&self) -> Result<Vec<Record>> {
        let mut recs = vec![Record::ints(&self.header())?];
        recs.extend(self.params().iter().map(Record::from_tensor));
        Ok(recs)
    }

    pub fn from_records(recs: &[Record]) -> Result<Self> {
        let h = recs
            .first()
            .ok_or_else(|| Error::Format("empty flow file".into()))?
            .as_ints()?;
        if h.len() != 11 || h[0] != FLOW_TAG || h[10] > 1 {
            return Err(Error::Format(format!("unrecognised flow header {h:?}")));
        }
        let u = |i: usize| h[i] as usize;
        let config = FlowConfig {
            levels: u(1),
            steps: u(2),
            in_shape: [u(3), u(4), u(5)],
            cond_shape: [u(6), u(7), u(8)],
            hidden: u(9),
        };
        let mut model = Self::new(config, 0)?;
        model.initialized = h[10] == 1;
        let params = model.params();
        if recs.len() != params.len() + 1 {
            return Err(Error::Format(format!(
                "flow file has {} parameter records, expected {}",
                recs.len() - 1,
                params.len()
            )));
        }
        for (p, r) in params.iter().zip(&recs[1..]) {
            if r.shape != p.shape() {
                return Err(Error::Format(format!(
                    "flow parameter shape {:?} does not match {:?}",
                    r.shape,
                    p.shape()
                )));
            }
            p.assign(&r.data)?;
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(tff::encode(&self.to_records()?)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_records(&tff::decode(bytes)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(tff::write_records(path, &self.to_records()?)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_records(&tff::read_records(path)?)
    }

    /// Copies every parameter value and the init flag from `other`.
    pub fn copy_from(&mut self, other: &FlowModel) -> Result<()> {
        if self.config != other.config {
            return Err(Error::InvalidInput("flow configs differ".into()));
        }
        for (a, b) in self.params().iter().zip(other.params()) {
            a.assign(&b.data())?;
        }
        self.initialized = other.initialized;
        Ok(())
    }

    /// Independent copy with fresh parameter storage.
    pub fn deep_clone(&self) -> Result<FlowModel> {
        let mut copy = FlowModel::new(self.config, 0)?;
        copy.copy_from(self)?;
        Ok(copy)
    }
}

/// Whether a tensor error means the numbers blew up rather than misuse.
pub fn is_numeric_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::Tensor(TensorError::NonFinite { .. } | TensorError::Domain { .. } | TensorError::Singular(_))
    )
}
