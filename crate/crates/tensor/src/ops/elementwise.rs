//! Pointwise arithmetic. Binary operations accept equal shapes or a
//! single-element operand on either side.

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Abs,
    Sign,
    Relu,
    Sqrt,
    Square,
}

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sign with `sign(0) = 0`.
pub fn sign(x: f32) -> f32 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

enum Layout {
    Same,
    LhsScalar,
    RhsScalar,
}

fn layout(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Layout> {
    if a.shape() == b.shape() {
        Ok(Layout::Same)
    } else if b.numel() == 1 {
        Ok(Layout::RhsScalar)
    } else if a.numel() == 1 {
        Ok(Layout::LhsScalar)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn reduce_to(grad: Vec<f32>, scalar: bool) -> Vec<f32> {
    if scalar {
        vec![grad.iter().sum()]
    } else {
        grad
    }
}

impl Tensor {
    pub fn binary(&self, op: BinaryOp, rhs: &Tensor) -> Result<Tensor> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        };
        let lay = layout(name, self, rhs)?;
        let (shape, n) = match lay {
            Layout::LhsScalar => (rhs.shape().to_vec(), rhs.numel()),
            _ => (self.shape().to_vec(), self.numel()),
        };
        let a = self.data();
        let b = rhs.data();
        let ai = |i: usize| if matches!(lay, Layout::LhsScalar) { a[0] } else { a[i] };
        let bi = |i: usize| if matches!(lay, Layout::RhsScalar) { b[0] } else { b[i] };
        if op == BinaryOp::Div && (0..b.len()).any(|i| b[i] == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                msg: "division by zero".into(),
            });
        }
        let out: Vec<f32> = (0..n)
            .map(|i| match op {
                BinaryOp::Add => ai(i) + bi(i),
                BinaryOp::Sub => ai(i) - bi(i),
                BinaryOp::Mul => ai(i) * bi(i),
                BinaryOp::Div => ai(i) / bi(i),
            })
            .collect();
        drop((a, b));
        let (pa, pb) = (self.clone(), rhs.clone());
        let lhs_scalar = matches!(lay, Layout::LhsScalar);
        let rhs_scalar = matches!(lay, Layout::RhsScalar);
        Tensor::from_op(
            name,
            shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g, needs| {
                let a = pa.data();
                let b = pb.data();
                let ai = |i: usize| if lhs_scalar { a[0] } else { a[i] };
                let bi = |i: usize| if rhs_scalar { b[0] } else { b[i] };
                let n = g.len();
                let ga = needs[0].then(|| {
                    let v: Vec<f32> = match op {
                        BinaryOp::Add | BinaryOp::Sub => g.to_vec(),
                        BinaryOp::Mul => (0..n).map(|i| g[i] * bi(i)).collect(),
                        BinaryOp::Div => (0..n).map(|i| g[i] / bi(i)).collect(),
                    };
                    reduce_to(v, lhs_scalar)
                });
                let gb = needs[1].then(|| {
                    let v: Vec<f32> = match op {
                        BinaryOp::Add => g.to_vec(),
                        BinaryOp::Sub => g.iter().map(|x| -x).collect(),
                        BinaryOp::Mul => (0..n).map(|i| g[i] * ai(i)).collect(),
                        BinaryOp::Div => (0..n)
                            .map(|i| -g[i] * ai(i) / (bi(i) * bi(i)))
                            .collect(),
                    };
                    reduce_to(v, rhs_scalar)
                });
                vec![ga, gb]
            }),
        )
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Add, rhs)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Sub, rhs)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Mul, rhs)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(BinaryOp::Div, rhs)
    }

    pub fn add_scalar(&self, s: f32) -> Result<Tensor> {
        self.affine(1.0, s)
    }

    pub fn mul_scalar(&self, s: f32) -> Result<Tensor> {
        self.affine(s, 0.0)
    }

    /// `scale * x + shift` with constant coefficients.
    pub fn affine(&self, scale: f32, shift: f32) -> Result<Tensor> {
        let out = self.data().iter().map(|&x| scale * x + shift).collect();
        Tensor::from_op(
            "affine",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| vec![Some(g.iter().map(|v| v * scale).collect())]),
        )
    }

    pub fn unary(&self, op: UnaryOp) -> Result<Tensor> {
        let (name, f): (&'static str, fn(f32) -> f32) = match op {
            UnaryOp::Neg => ("neg", |x| -x),
            UnaryOp::Exp => ("exp", f32::exp),
            UnaryOp::Log => ("log", f32::ln),
            UnaryOp::Tanh => ("tanh", f32::tanh),
            UnaryOp::Sigmoid => ("sigmoid", sigmoid),
            UnaryOp::Abs => ("abs", f32::abs),
            UnaryOp::Sign => ("sign", sign),
            UnaryOp::Relu => ("relu", |x| x.max(0.0)),
            UnaryOp::Sqrt => ("sqrt", f32::sqrt),
            UnaryOp::Square => ("square", |x| x * x),
        };
        {
            let d = self.data();
            match op {
                UnaryOp::Log if d.iter().any(|&x| x <= 0.0) => {
                    return Err(TensorError::Domain {
                        op: name,
                        msg: "log of a non-positive value".into(),
                    })
                }
                UnaryOp::Sqrt if d.iter().any(|&x| x < 0.0) => {
                    return Err(TensorError::Domain {
                        op: name,
                        msg: "sqrt of a negative value".into(),
                    })
                }
                _ => {}
            }
        }
        let out: Vec<f32> = self.data().iter().map(|&x| f(x)).collect();
        let src = self.clone();
        Tensor::from_op(
            name,
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let x = src.data();
                let grad = g
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &x)| {
                        g * match op {
                            UnaryOp::Neg => -1.0,
                            UnaryOp::Exp => x.exp(),
                            UnaryOp::Log => 1.0 / x,
                            UnaryOp::Tanh => 1.0 - x.tanh().powi(2),
                            UnaryOp::Sigmoid => {
                                let s = sigmoid(x);
                                s * (1.0 - s)
                            }
                            UnaryOp::Abs => sign(x),
                            UnaryOp::Sign => 0.0,
                            UnaryOp::Relu => {
                                if x > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            // subgradient 0 at the origin
                            UnaryOp::Sqrt => {
                                if x > 0.0 {
                                    0.5 / x.sqrt()
                                } else {
                                    0.0
                                }
                            }
                            UnaryOp::Square => 2.0 * x,
                        }
                    })
                    .collect();
                vec![Some(grad)]
            }),
        )
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Neg)
    }

    pub fn exp(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Exp)
    }

    pub fn log(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Log)
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Tanh)
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Sigmoid)
    }

    pub fn abs(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Abs)
    }

    pub fn sign(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Sign)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Relu)
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Sqrt)
    }

    pub fn square(&self) -> Result<Tensor> {
        self.unary(UnaryOp::Square)
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, lo: f32, hi: f32) -> Result<Tensor> {
        if lo > hi {
            return Err(TensorError::InvalidArgument {
                op: "clamp",
                msg: format!("lo {lo} > hi {hi}"),
            });
        }
        let out = self.data().iter().map(|&x| x.clamp(lo, hi)).collect();
        let src = self.clone();
        Tensor::from_op(
            "clamp",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let x = src.data();
                vec![Some(
                    g.iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| if x > lo && x < hi { g } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }

    /// Elementwise clamp against per-element bounds (constants).
    pub fn clamp_between(&self, lo: &[f32], hi: &[f32]) -> Result<Tensor> {
        let n = self.numel();
        if lo.len() != n || hi.len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "clamp_between",
                lhs: self.shape().to_vec(),
                rhs: vec![lo.len(), hi.len()],
            });
        }
        let out = self
            .data()
            .iter()
            .zip(lo.iter().zip(hi))
            .map(|(&x, (&l, &h))| x.max(l).min(h))
            .collect();
        let src = self.clone();
        let (lo, hi) = (lo.to_vec(), hi.to_vec());
        Tensor::from_op(
            "clamp_between",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, _| {
                let x = src.data();
                vec![Some(
                    (0..g.len())
                        .map(|i| if x[i] > lo[i] && x[i] < hi[i] { g[i] } else { 0.0 })
                        .collect(),
                )]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_equal_shapes() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        assert_eq!(a.add(&b).unwrap().to_vec(), vec![4.0, 6.0]);
    }

    #[test]
    fn sign_of_zero_is_zero() {
        let a = Tensor::from_vec(vec![0.0, -2.0, 3.0], &[3]).unwrap();
        assert_eq!(a.sign().unwrap().to_vec(), vec![0.0, -1.0, 1.0]);
    }

    #[test]
    fn scalar_broadcast_grad_is_summed() {
        let a = Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let s = Tensor::param(vec![2.0], &[]).unwrap();
        a.mul(&s).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(s.grad().unwrap(), vec![6.0]);
        assert_eq!(a.grad().unwrap(), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn log_and_div_domain_errors() {
        let a = Tensor::from_vec(vec![1.0, 0.0], &[2]).unwrap();
        assert!(matches!(a.log(), Err(TensorError::Domain { .. })));
        let one = Tensor::ones(&[2]);
        assert!(matches!(one.div(&a), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn overflow_is_reported() {
        let a = Tensor::from_vec(vec![1000.0], &[1]).unwrap();
        assert!(matches!(a.exp(), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn clamp_blocks_gradient_outside() {
        let a = Tensor::param(vec![-1.0, 0.5, 2.0], &[3]).unwrap();
        a.clamp(0.0, 1.0).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }
}
