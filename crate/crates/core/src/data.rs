//! Datasets: CIFAR-10 binary batches, the synthetic pattern dataset, splits,
//! and storage of (clean, adversarial) pairs.

use std::path::Path;

use flowstrike_tensor::tff::{self, Record};
use flowstrike_tensor::{Prng, Tensor};

use crate::error::{Error, Result};

/// An image in `[0, 1]^{C x H x W}` with its class.
#[derive(Debug, Clone)]
pub struct Example {
    pub image: Tensor,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    /// `[C, H, W]`
    pub shape: [usize; 3],
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(num_classes: usize, shape: [usize; 3], examples: Vec<Example>) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.image.shape() != shape {
                return Err(Error::InvalidInput(format!(
                    "example {i} has shape {:?}, expected {shape:?}",
                    ex.image.shape()
                )));
            }
            if ex.label >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "example {i} label {} >= {num_classes}",
                    ex.label
                )));
            }
            if ex.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!("example {i} has pixels outside [0, 1]")));
            }
        }
        Ok(Self {
            num_classes,
            shape,
            examples,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Images at `indices` stacked into `[N, C, H, W]`, with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images: Vec<Tensor> = indices.iter().map(|&i| self.examples[i].image.clone()).collect();
        let labels = indices.iter().map(|&i| self.examples[i].label).collect();
        Ok((Tensor::stack(&images)?, labels))
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for e in &self.examples {
            counts[e.label] += 1;
        }
        counts
    }

    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            shape: self.shape,
            examples: self.examples.iter().take(n).cloned().collect(),
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            num_classes: self.num_classes,
            shape: self.shape,
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
        }
    }
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Parses CIFAR-10 binary records: one label byte, then 1024 bytes each of
/// the R, G and B planes (row-major 32x32). Pixels are scaled by 1/255.
pub fn parse_cifar(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "CIFAR batch length {} is not a multiple of {CIFAR_RECORD} (truncated file?)",
            bytes.len()
        )));
    }
    let mut examples = Vec::with_capacity(bytes.len() / CIFAR_RECORD);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Format(format!("record {i}: label byte {label} > 9")));
        }
        let pixels = rec[1..].iter().map(|&b| b as f32 / 255.0).collect();
        examples.push(Example {
            image: Tensor::from_vec(pixels, &[3, 32, 32])?,
            label,
        });
    }
    Dataset::new(10, [3, 32, 32], examples)
}

pub fn load_cifar_batch(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar(&std::fs::read(path)?)
}

/// Inverse of [`parse_cifar`] for images whose pixels are multiples of 1/255.
pub fn encode_cifar(dataset: &Dataset) -> Result<Vec<u8>> {
    if dataset.shape != [3, 32, 32] {
        return Err(Error::InvalidInput("CIFAR records are 3x32x32".into()));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR_RECORD);
    for ex in &dataset.examples {
        out.push(ex.label as u8);
        out.extend(ex.image.data().iter().map(|&v| (v * 255.0).round() as u8));
    }
    Ok(out)
}

/// Which family of shapes the synthetic generator draws from. `Secondary`
/// shares no shape with `Primary` and is used for cross-dataset checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Vocabulary {
    Primary,
    Secondary,
}

struct Jitter {
    cx: f32,
    cy: f32,
    radius: f32,
    thickness: f32,
    period: f32,
    phase: f32,
}

fn inside(vocab: Vocabulary, class: usize, u: f32, v: f32, j: &Jitter) -> bool {
    let (du, dv) = (u - j.cx, v - j.cy);
    let dist = (du * du + dv * dv).sqrt();
    let r = j.radius;
    let t = j.thickness;
    let stripe = |s: f32| ((s + j.phase) / j.period).rem_euclid(1.0) < 0.5;
    match (vocab, class) {
        // filled square
        (Vocabulary::Primary, 0) => du.abs() < r && dv.abs() < r,
        // disk
        (Vocabulary::Primary, 1) => dist < r,
        // plus-shaped cross
        (Vocabulary::Primary, 2) => {
            (du.abs() < t && dv.abs() < r) || (dv.abs() < t && du.abs() < r)
        }
        (Vocabulary::Primary, 3) => stripe(v),
        (Vocabulary::Primary, 4) => stripe(u),
        (Vocabulary::Primary, 5) => stripe(u + v),
        (Vocabulary::Primary, 6) => stripe(u - v),
        // ring
        (Vocabulary::Primary, 7) => (dist - r).abs() < t * 0.6,
        // diagonal cross
        (Vocabulary::Primary, 8) => {
            ((du - dv).abs() < t || (du + dv).abs() < t) && du.abs() < r && dv.abs() < r
        }
        // square frame
        (Vocabulary::Primary, _) => {
            let m = du.abs().max(dv.abs());
            m < r && m > r - t
        }
        // triangle pointing up
        (Vocabulary::Secondary, 0) => dv.abs() < r && du.abs() < (dv + r) * 0.5,
        // checkerboard
        (Vocabulary::Secondary, 1) => stripe(u) ^ stripe(v),
        // diamond
        (Vocabulary::Secondary, 2) => du.abs() + dv.abs() < r,
        // concentric rings
        (Vocabulary::Secondary, 3) => (dist / j.period).rem_euclid(1.0) < 0.5,
        // left half-plane
        (Vocabulary::Secondary, 4) => du < 0.0,
        // dot grid
        (Vocabulary::Secondary, 5) => {
            let fu = ((u + j.phase) / j.period).rem_euclid(1.0) - 0.5;
            let fv = ((v + j.phase) / j.period).rem_euclid(1.0) - 0.5;
            fu * fu + fv * fv < 0.08
        }
        // L shape
        (Vocabulary::Secondary, 6) => {
            (du.abs() < t && dv.abs() < r) || (dv > r - 2.0 * t && dv < r && du > -t && du < r)
        }
        // two small disks
        (Vocabulary::Secondary, 7) => {
            let d1 = ((du - r * 0.6).powi(2) + dv * dv).sqrt();
            let d2 = ((du + r * 0.6).powi(2) + dv * dv).sqrt();
            d1 < r * 0.4 || d2 < r * 0.4
        }
        // horizontal bar
        (Vocabulary::Secondary, 8) => dv.abs() < t && du.abs() < r * 1.3,
        // upper half-plane
        (Vocabulary::Secondary, _) => dv < 0.0,
    }
}

/// Balanced class-conditional pattern images (`label = i % num_classes`).
///
/// Every example gets its own random stream derived from `seed`, so the
/// first `k` examples do not depend on `count`. Colours keep foreground and
/// background away from 0 and 1; noise is uniform with amplitude 0.05.
pub fn gen_synthetic(num_classes: usize, size: usize, count: usize, seed: u64) -> Result<Dataset> {
    gen_synthetic_vocab(num_classes, size, count, seed, Vocabulary::Primary)
}

pub fn gen_synthetic_vocab(
    num_classes: usize,
    size: usize,
    count: usize,
    seed: u64,
    vocab: Vocabulary,
) -> Result<Dataset> {
    let style = SyntheticStyle {
        vocab,
        ..SyntheticStyle::default()
    };
    gen_synthetic_styled(num_classes, size, count, seed, &style)
}

/// Colour ranges and noise of the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticStyle {
    pub vocab: Vocabulary,
    pub background: (f32, f32),
    pub foreground: (f32, f32),
    pub noise: f32,
}

impl Default for SyntheticStyle {
    fn default() -> Self {
        Self {
            vocab: Vocabulary::Primary,
            background: (0.15, 0.35),
            foreground: (0.6, 0.85),
            noise: 0.05,
        }
    }
}

pub fn gen_synthetic_styled(
    num_classes: usize,
    size: usize,
    count: usize,
    seed: u64,
    style: &SyntheticStyle,
) -> Result<Dataset> {
    let vocab = style.vocab;
    if size != 16 && size != 32 {
        return Err(Error::InvalidInput(format!("synthetic size must be 16 or 32, got {size}")));
    }
    if num_classes == 0 || num_classes > 10 {
        return Err(Error::InvalidInput(format!("num_classes must be in 1..=10, got {num_classes}")));
    }
    let mut examples = Vec::with_capacity(count);
    for i in 0..count {
        let mut p = Prng::stream(seed, i as u64);
        let label = i % num_classes;
        let j = Jitter {
            cx: p.uniform_range(0.38, 0.62),
            cy: p.uniform_range(0.38, 0.62),
            radius: p.uniform_range(0.2, 0.3),
            thickness: p.uniform_range(0.07, 0.1),
            period: p.uniform_range(0.2, 0.3),
            phase: p.uniform(),
        };
        let bg: Vec<f32> = (0..3).map(|_| p.uniform_range(style.background.0, style.background.1)).collect();
        let fg: Vec<f32> = (0..3).map(|_| p.uniform_range(style.foreground.0, style.foreground.1)).collect();
        let mut pixels = vec![0.0f32; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let u = (x as f32 + 0.5) / size as f32;
                let v = (y as f32 + 0.5) / size as f32;
                let on = inside(vocab, label, u, v, &j);
                for c in 0..3 {
                    let base = if on { fg[c] } else { bg[c] };
                    let noise = p.uniform_range(-style.noise, style.noise);
                    pixels[(c * size + y) * size + x] = (base + noise).clamp(0.0, 1.0);
                }
            }
        }
        examples.push(Example {
            image: Tensor::from_vec(pixels, &[3, size, size])?,
            label,
        });
    }
    Dataset::new(num_classes, [3, size, size], examples)
}

/// Deterministic shuffled partition, stratified by class: each class is
/// split in proportion `train_fraction` (largest-remainder rounding so the
/// train total is `round(n * train_fraction)`), then both parts are shuffled.
pub fn split(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty dataset".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidInput(format!(
            "train fraction {train_fraction} must be in (0, 1)"
        )));
    }
    let mut rng = Prng::new(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, e) in dataset.examples.iter().enumerate() {
        by_class[e.label].push(i);
    }
    let target = (dataset.len() as f64 * train_fraction).round() as usize;
    let ideal: Vec<f64> = by_class.iter().map(|c| c.len() as f64 * train_fraction).collect();
    let mut take: Vec<usize> = ideal.iter().map(|v| v.floor() as usize).collect();
    let mut order: Vec<usize> = (0..by_class.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = ideal[a] - ideal[a].floor();
        let rb = ideal[b] - ideal[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut missing = target.saturating_sub(take.iter().sum());
    for &c in order.iter().cycle().take(order.len() * 2) {
        if missing == 0 {
            break;
        }
        if take[c] < by_class[c].len() {
            take[c] += 1;
            missing -= 1;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (c, members) in by_class.iter_mut().enumerate() {
        rng.shuffle(members);
        train.extend_from_slice(&members[..take[c]]);
        test.extend_from_slice(&members[take[c]..]);
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut test);
    Ok((dataset.subset(&train), dataset.subset(&test)))
}

/// One clean example and its adversarial counterpart.
#[derive(Debug, Clone)]
pub struct Pair {
    pub clean: Example,
    pub adversarial: Tensor,
}

/// Pairs collected under a single L-inf budget.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub epsilon: f32,
    pub num_classes: usize,
    pub shape: [usize; 3],
    pub pairs: Vec<Pair>,
}

pub const PAIR_TOLERANCE: f32 = 1e-6;

fn linf(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

impl PairSet {
    pub fn new(epsilon: f32, num_classes: usize, shape: [usize; 3]) -> Self {
        Self {
            epsilon,
            num_classes,
            shape,
            pairs: Vec::new(),
        }
    }

    /// Adds a pair after checking the L-inf bound and pixel range.
    pub fn push(&mut self, clean: Example, adversarial: Tensor) -> Result<()> {
        let index = self.pairs.len();
        if clean.image.shape() != self.shape || adversarial.shape() != self.shape {
            return Err(Error::InvalidInput(format!("pair {index} has the wrong shape")));
        }
        if clean.label >= self.num_classes {
            return Err(Error::InvalidInput(format!("pair {index} label out of range")));
        }
        let distance = linf(&clean.image.data(), &adversarial.data());
        if distance > self.epsilon + PAIR_TOLERANCE {
            return Err(Error::PairBound {
                index,
                distance,
                epsilon: self.epsilon,
            });
        }
        if adversarial.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidInput(format!("pair {index} has pixels outside [0, 1]")));
        }
        self.pairs.push(Pair { clean, adversarial });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// `(clean [N,C,H,W], adversarial [N,C,H,W], labels)` for `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor, Vec<usize>)> {
        let clean: Vec<Tensor> = indices.iter().map(|&i| self.pairs[i].clean.image.clone()).collect();
        let adv: Vec<Tensor> = indices.iter().map(|&i| self.pairs[i].adversarial.clone()).collect();
        let labels = indices.iter().map(|&i| self.pairs[i].clean.label).collect();
        Ok((Tensor::stack(&clean)?, Tensor::stack(&adv)?, labels))
    }

    fn to_records(&self) -> Result<Vec<Record>> {
        let [c, h, w] = self.shape;
        let n = self.len();
        let mut clean = Vec::with_capacity(n * c * h * w);
        let mut adv = Vec::with_capacity(n * c * h * w);
        for p in &self.pairs {
            clean.extend_from_slice(&p.clean.image.data());
            adv.extend_from_slice(&p.adversarial.data());
        }
        let labels = self.pairs.iter().map(|p| p.clean.label as f32).collect();
        let header = [n, self.num_classes, c, h, w]
            .iter()
            .map(|&v| u32::try_from(v).map_err(|_| Error::Format("header value too large".into())))
            .collect::<Result<Vec<u32>>>()?;
        Ok(vec![
            Record::ints(&header)?,
            Record::new(vec![1], vec![self.epsilon])?,
            Record::new(vec![n, c, h, w], clean)?,
            Record::new(vec![n, c, h, w], adv)?,
            Record::new(vec![n], labels)?,
        ])
    }

    fn from_records(records: &[Record]) -> Result<Self> {
        let [header, eps, clean, adv, labels] = records else {
            return Err(Error::Format(format!("pair file has {} records, expected 5", records.len())));
        };
        let hv = header.as_ints()?;
        let &[n, num_classes, c, h, w] = hv.as_slice() else {
            return Err(Error::Format("pair header must have 5 fields".into()));
        };
        let (n, c, h, w) = (n as usize, c as usize, h as usize, w as usize);
        let each = c * h * w;
        if eps.data.len() != 1
            || clean.data.len() != n * each
            || adv.data.len() != n * each
            || labels.data.len() != n
        {
            return Err(Error::Format("pair record sizes disagree with header".into()));
        }
        let mut set = PairSet::new(eps.data[0], num_classes as usize, [c, h, w]);
        let label_ints = labels.as_ints()?;
        for i in 0..n {
            let image = Tensor::from_vec(clean.data[i * each..(i + 1) * each].to_vec(), &[c, h, w])?;
            let a = Tensor::from_vec(adv.data[i * each..(i + 1) * each].to_vec(), &[c, h, w])?;
            set.push(
                Example {
                    image,
                    label: label_ints[i] as usize,
                },
                a,
            )?;
        }
        Ok(set)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        Ok(tff::encode(&self.to_records()?)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_records(&tff::decode(bytes)?)
    }
}

pub fn save_pairs(pairs: &PairSet, path: impl AsRef<Path>) -> Result<()> {
    Ok(tff::write_records(path, &pairs.to_records()?)?)
}

/// Loads a pair file, re-checking the L-inf invariant for every pair.
pub fn load_pairs(path: impl AsRef<Path>) -> Result<PairSet> {
    PairSet::from_records(&tff::read_records(path)?)
}
