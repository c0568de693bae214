#![allow(dead_code)]

use flowstrike::flow::{FlowConfig, FlowModel};
use flowstrike_tensor::{Prng, Tensor};

pub fn tiny_config(levels: usize, steps: usize, in_shape: [usize; 3], cond_shape: [usize; 3]) -> FlowConfig {
    FlowConfig {
        levels,
        steps,
        in_shape,
        cond_shape,
        hidden: 8,
    }
}

/// Flow with every parameter moved away from its initial value so that no
/// layer is the identity.
pub fn randomized_flow(config: FlowConfig, seed: u64, spread: f32) -> FlowModel {
    let mut flow = FlowModel::new(config, seed).unwrap();
    let mut rng = Prng::new(seed ^ 0x5eed);
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
    flow
}

pub fn normal_tensor(shape: &[usize], rng: &mut Prng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(rng.normal_vec(n), shape).unwrap()
}

pub fn uniform_tensor(shape: &[usize], rng: &mut Prng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(rng.uniform_vec(n, 0.0, 1.0), shape).unwrap()
}

/// `log |det A|` of a row-major `n x n` matrix by partial-pivot Gaussian
/// elimination in f64.
pub fn log_abs_det_f64(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut acc = 0.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[i * n + col].abs().total_cmp(&m[j * n + col].abs()))
            .unwrap();
        if piv != col {
            for k in 0..n {
                m.swap(col * n + k, piv * n + k);
            }
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

/// Dense Jacobian (row-major, outputs by inputs) of `f` at `x`, one
/// reverse pass per output coordinate.
pub fn autograd_jacobian(x: &[f32], shape: &[usize], f: impl Fn(&Tensor) -> Tensor) -> Vec<f64> {
    let n = x.len();
    let mut jac = Vec::with_capacity(n * n);
    for i in 0..n {
        let xt = Tensor::param(x.to_vec(), shape).unwrap();
        let y = f(&xt);
        assert_eq!(y.numel(), n);
        let mut pick = vec![0.0f32; n];
        pick[i] = 1.0;
        let w = Tensor::from_vec(pick, y.shape()).unwrap();
        y.mul(&w).unwrap().sum().unwrap().backward().unwrap();
        jac.extend(xt.grad().unwrap().iter().map(|&v| v as f64));
    }
    jac
}
