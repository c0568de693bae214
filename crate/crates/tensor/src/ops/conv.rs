//! 2-D cross-correlation (im2col + GEMM) and 2x2 average pooling.

use crate::error::{Result, TensorError};
use crate::ops::linalg::gemm;
use crate::ops::shape::dims4;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
struct Geometry {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox + kx - pad` is in range
/// (stride 1 only).
fn valid_cols(g: &Geometry, kx: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).min(g.wo);
    let hi = (g.w + g.pad).saturating_sub(kx).min(g.wo).max(lo);
    (lo, hi)
}

fn im2col(g: &Geometry, img: &[f32], col: &mut [f32]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.ho {
                    let dst = &mut col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kx);
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if lo < hi {
                            let off = lo + kx - g.pad;
                            dst[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &Geometry, col: &[f32], img: &mut [f32]) {
    let p = g.p();
    for ci in 0..g.cin {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((ci * g.kh + ky) * g.kw + kx) * p;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = valid_cols(g, kx);
                        if lo < hi {
                            let off = lo + kx - g.pad;
                            dst[off..off + hi - lo]
                                .iter_mut()
                                .zip(&src[lo..hi])
                                .for_each(|(d, v)| *d += v);
                        }
                        continue;
                    }
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input [N, Cin, H, W]` with `kernel [Cout, Cin, kh, kw]`,
/// plus an optional per-output-channel `bias [Cout]`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let [n, cin, h, w] = dims4("conv2d", input)?;
    let [cout, kcin, kh, kw] = dims4("conv2d", kernel)?;
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: input.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if stride == 0 || kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(TensorError::InvalidArgument {
            op: "conv2d",
            msg: format!("kernel {kh}x{kw} / stride {stride} does not fit {h}x{w} padded by {pad}"),
        });
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d bias",
                lhs: vec![cout],
                rhs: b.shape().to_vec(),
            });
        }
    }
    let geo = Geometry {
        cin,
        h,
        w,
        kh,
        kw,
        stride,
        pad,
        ho: (h + 2 * pad - kh) / stride + 1,
        wo: (w + 2 * pad - kw) / stride + 1,
    };
    let (k, p) = (geo.k(), geo.p());
    let mut out = vec![0.0f32; n * cout * p];
    {
        let x = input.data();
        let wt = kernel.data();
        let mut col = if geo.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
        for b in 0..n {
            let img = &x[b * cin * h * w..(b + 1) * cin * h * w];
            let colref: &[f32] = if geo.is_pointwise() {
                img
            } else {
                im2col(&geo, img, &mut col);
                &col
            };
            gemm(cout, k, p, &wt, false, colref, false, &mut out[b * cout * p..(b + 1) * cout * p], false);
        }
        if let Some(bias) = bias {
            let bv = bias.data();
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let bb = bv[i % cout];
                chunk.iter_mut().for_each(|v| *v += bb);
            }
        }
    }
    let mut parents = vec![input.clone(), kernel.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let (xin, ker) = (input.clone(), kernel.clone());
    let has_bias = bias.is_some();
    Tensor::from_op(
        "conv2d",
        vec![n, cout, geo.ho, geo.wo],
        out,
        parents,
        Box::new(move |g, needs| {
            let x = xin.data();
            let wt = ker.data();
            let img_len = cin * h * w;
            let mut gx = needs[0].then(|| vec![0.0f32; n * img_len]);
            let mut gw = needs[1].then(|| vec![0.0f32; cout * k]);
            let mut col = if geo.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
            let mut gcol = if geo.is_pointwise() { Vec::new() } else { vec![0.0; k * p] };
            for b in 0..n {
                let gout = &g[b * cout * p..(b + 1) * cout * p];
                if let Some(gw) = gw.as_mut() {
                    let img = &x[b * img_len..(b + 1) * img_len];
                    let colref: &[f32] = if geo.is_pointwise() {
                        img
                    } else {
                        im2col(&geo, img, &mut col);
                        &col
                    };
                    gemm(cout, p, k, gout, false, colref, true, gw, true);
                }
                if let Some(gx) = gx.as_mut() {
                    let dst = &mut gx[b * img_len..(b + 1) * img_len];
                    if geo.is_pointwise() {
                        gemm(k, cout, p, &wt, true, gout, false, dst, true);
                    } else {
                        gemm(k, cout, p, &wt, true, gout, false, &mut gcol, false);
                        col2im_add(&geo, &gcol, dst);
                    }
                }
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![0.0f32; cout];
                    for (i, chunk) in g.chunks(p).enumerate() {
                        gb[i % cout] += chunk.iter().sum::<f32>();
                    }
                    gb
                }));
            }
            grads
        }),
    )
}

/// Non-overlapping 2x2 mean pooling; spatial dims must be even.
pub fn avg_pool2x2(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = dims4("avg_pool2x2", input)?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(TensorError::InvalidArgument {
            op: "avg_pool2x2",
            msg: format!("odd spatial dims {h}x{w}"),
        });
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * ho * wo];
    {
        let x = input.data();
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
            for y in 0..ho {
                for xo in 0..wo {
                    let i = 2 * y * w + 2 * xo;
                    dst[y * wo + xo] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
    }
    Tensor::from_op(
        "avg_pool2x2",
        vec![n, c, ho, wo],
        out,
        vec![input.clone()],
        Box::new(move |g, _| {
            let mut gi = vec![0.0f32; n * c * h * w];
            for plane in 0..n * c {
                let src = &g[plane * ho * wo..(plane + 1) * ho * wo];
                let dst = &mut gi[plane * h * w..(plane + 1) * h * w];
                for y in 0..ho {
                    for xo in 0..wo {
                        let v = 0.25 * src[y * wo + xo];
                        let i = 2 * y * w + 2 * xo;
                        dst[i] = v;
                        dst[i + 1] = v;
                        dst[i + w] = v;
                        dst[i + w + 1] = v;
                    }
                }
            }
            vec![Some(gi)]
        }),
    )
}
