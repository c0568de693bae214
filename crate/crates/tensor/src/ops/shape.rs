//! Reductions and layout operations.

use crate::error::{Result, TensorError};
use crate::tensor::{numel, Tensor};

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument {
        op,
        msg: msg.into(),
    }
}

impl Tensor {
    pub fn sum(&self) -> Result<Tensor> {
        let n = self.numel();
        let s: f32 = self.data().iter().sum();
        Tensor::from_op(
            "sum",
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Result<Tensor> {
        let n = self.numel();
        self.sum()?.mul_scalar(1.0 / n as f32)
    }

    /// Sum over every axis except the leading one: `[N, ...] -> [N]`.
    pub fn sum_per_sample(&self) -> Result<Tensor> {
        if self.rank() < 1 {
            return Err(invalid("sum_per_sample", "needs rank >= 1"));
        }
        let n = self.shape()[0];
        let inner = self.numel() / n;
        let out: Vec<f32> = self.data().chunks(inner).map(|c| c.iter().sum()).collect();
        Tensor::from_op(
            "sum_per_sample",
            vec![n],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = Vec::with_capacity(n * inner);
                for &v in g {
                    gi.extend(std::iter::repeat_n(v, inner));
                }
                vec![Some(gi)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _| vec![Some(g.to_vec())]),
        )
    }

    /// Slice `[start, start+len)` along axis 1.
    pub fn narrow_channels(&self, start: usize, len: usize) -> Result<Tensor> {
        if self.rank() < 2 || len == 0 || start + len > self.shape()[1] {
            return Err(invalid(
                "narrow_channels",
                format!("range {start}+{len} invalid for {:?}", self.shape()),
            ));
        }
        let shape = self.shape().to_vec();
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut out = Vec::with_capacity(n * len * inner);
        {
            let d = self.data();
            for b in 0..n {
                let base = (b * c + start) * inner;
                out.extend_from_slice(&d[base..base + len * inner]);
            }
        }
        let mut oshape = shape.clone();
        oshape[1] = len;
        Tensor::from_op(
            "narrow_channels",
            oshape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![0.0; n * c * inner];
                for b in 0..n {
                    let dst = (b * c + start) * inner;
                    let src = b * len * inner;
                    gi[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                vec![Some(gi)]
            }),
        )
    }

    /// Concatenate along axis 1. All other axes must agree.
    pub fn concat_channels(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| invalid("concat_channels", "no inputs"))?;
        if first.rank() < 2 {
            return Err(invalid("concat_channels", "needs rank >= 2"));
        }
        let n = first.shape()[0];
        let rest = first.shape()[2..].to_vec();
        for p in parts {
            if p.rank() != first.rank() || p.shape()[0] != n || p.shape()[2..] != rest[..] {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let inner: usize = rest.iter().product();
        let chans: Vec<usize> = parts.iter().map(|p| p.shape()[1]).collect();
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(n * total * inner);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for b in 0..n {
            for (d, &c) in datas.iter().zip(&chans) {
                out.extend_from_slice(&d[b * c * inner..(b + 1) * c * inner]);
            }
        }
        drop(datas);
        let mut shape = first.shape().to_vec();
        shape[1] = total;
        Tensor::from_op(
            "concat_channels",
            shape,
            out,
            parts.to_vec(),
            Box::new(move |g, needs| {
                let mut offset = 0;
                chans
                    .iter()
                    .zip(needs)
                    .map(|(&c, &need)| {
                        let start = offset;
                        offset += c;
                        need.then(|| {
                            let mut gi = Vec::with_capacity(n * c * inner);
                            for b in 0..n {
                                let base = (b * total + start) * inner;
                                gi.extend_from_slice(&g[base..base + c * inner]);
                            }
                            gi
                        })
                    })
                    .collect()
            }),
        )
    }

    /// Broadcast a per-channel vector `[C]` to `shape` (`[N, C, ...]`).
    pub fn expand_channels(&self, shape: &[usize]) -> Result<Tensor> {
        if self.rank() != 1 || shape.len() < 2 || shape[1] != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "expand_channels",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut out = Vec::with_capacity(numel(shape));
        {
            let v = self.data();
            for _ in 0..n {
                for &x in v.iter() {
                    out.extend(std::iter::repeat_n(x, inner));
                }
            }
        }
        Tensor::from_op(
            "expand_channels",
            shape.to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gv = vec![0.0f32; c];
                for (i, chunk) in g.chunks(inner).enumerate() {
                    gv[i % c] += chunk.iter().sum::<f32>();
                }
                vec![Some(gv)]
            }),
        )
    }

    /// Space-to-depth on `[N, C, H, W]`: each 2x2 block becomes four channels
    /// ordered top-left, top-right, bottom-left, bottom-right, giving
    /// `[N, 4C, H/2, W/2]` with output channel `4c + 2dy + dx`.
    pub fn squeeze2x2(&self) -> Result<Tensor> {
        let [n, c, h, w] = dims4("squeeze2x2", self)?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(invalid("squeeze2x2", format!("odd spatial dims {h}x{w}")));
        }
        let map = squeeze_map(n, c, h, w);
        let out = {
            let d = self.data();
            map.iter().map(|&src| d[src]).collect()
        };
        Tensor::from_op(
            "squeeze2x2",
            vec![n, 4 * c, h / 2, w / 2],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![0.0; g.len()];
                for (o, &src) in map.iter().enumerate() {
                    gi[src] = g[o];
                }
                vec![Some(gi)]
            }),
        )
    }

    /// Inverse of [`Tensor::squeeze2x2`].
    pub fn unsqueeze2x2(&self) -> Result<Tensor> {
        let [n, c4, h2, w2] = dims4("unsqueeze2x2", self)?;
        if c4 % 4 != 0 {
            return Err(invalid("unsqueeze2x2", format!("{c4} channels not divisible by 4")));
        }
        let map = squeeze_map(n, c4 / 4, h2 * 2, w2 * 2);
        let out = {
            let d = self.data();
            let mut out = vec![0.0; d.len()];
            for (o, &dst) in map.iter().enumerate() {
                out[dst] = d[o];
            }
            out
        };
        Tensor::from_op(
            "unsqueeze2x2",
            vec![n, c4 / 4, h2 * 2, w2 * 2],
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(map.iter().map(|&src| g[src]).collect())]),
        )
    }

    /// Nearest-neighbour resize of `[N, C, H, W]` to `[N, C, oh, ow]`.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Result<Tensor> {
        let [n, c, h, w] = dims4("resize_nearest", self)?;
        if oh == 0 || ow == 0 {
            return Err(invalid("resize_nearest", "empty target size"));
        }
        if (oh, ow) == (h, w) {
            return Ok(self.clone());
        }
        let mut map = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for y in 0..oh {
                let sy = y * h / oh;
                for x in 0..ow {
                    let sx = x * w / ow;
                    map.push(plane * h * w + sy * w + sx);
                }
            }
        }
        let out = {
            let d = self.data();
            map.iter().map(|&s| d[s]).collect()
        };
        let len = self.numel();
        Tensor::from_op(
            "resize_nearest",
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![0.0; len];
                for (o, &s) in map.iter().enumerate() {
                    gi[s] += g[o];
                }
                vec![Some(gi)]
            }),
        )
    }

    /// Stack equally-shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| invalid("stack", "no inputs"))?;
        let each = first.numel();
        for t in items {
            if t.shape() != first.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "stack",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let mut out = Vec::with_capacity(each * items.len());
        for t in items {
            out.extend_from_slice(&t.data());
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(first.shape());
        Tensor::from_op(
            "stack",
            shape,
            out,
            items.to_vec(),
            Box::new(move |g, needs| {
                needs
                    .iter()
                    .enumerate()
                    .map(|(i, &need)| need.then(|| g[i * each..(i + 1) * each].to_vec()))
                    .collect()
            }),
        )
    }

    /// Item `i` along the leading axis.
    pub fn select(&self, i: usize) -> Result<Tensor> {
        if self.rank() < 1 || i >= self.shape()[0] {
            return Err(invalid("select", format!("index {i} out of range for {:?}", self.shape())));
        }
        let rows = self.shape()[0];
        let each = self.numel() / rows;
        let out = self.data()[i * each..(i + 1) * each].to_vec();
        let mut shape = self.shape()[1..].to_vec();
        if shape.is_empty() {
            shape = vec![];
        }
        Tensor::from_op(
            "select",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let mut gi = vec![0.0; rows * each];
                gi[i * each..(i + 1) * each].copy_from_slice(g);
                vec![Some(gi)]
            }),
        )
    }
}

pub(crate) fn dims4(op: &'static str, t: &Tensor) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, c, h, w] => Ok([n, c, h, w]),
        s => Err(invalid(op, format!("expected [N, C, H, W], got {s:?}"))),
    }
}

/// `map[o]` = source offset (in the unsqueezed layout) of squeezed element `o`.
fn squeeze_map(n: usize, c: usize, h: usize, w: usize) -> Vec<usize> {
    let (h2, w2) = (h / 2, w / 2);
    let mut map = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..2 {
                for dx in 0..2 {
                    for y in 0..h2 {
                        for x in 0..w2 {
                            map.push(((b * c + ch) * h + 2 * y + dy) * w + 2 * x + dx);
                        }
                    }
                }
            }
        }
    }
    map
}
