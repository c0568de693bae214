use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (n, k) = match logits.shape() {
        &[n, k] if n == labels.len() => (n, k),
        s => {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: s.to_vec(),
                rhs: vec![labels.len()],
            })
        }
    };
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(TensorError::InvalidArgument {
            op: "softmax_cross_entropy",
            msg: format!("label {bad} out of range for {k} classes"),
        });
    }
    let mut probs = Vec::with_capacity(n * k);
    let mut loss = 0.0f64;
    {
        let d = logits.data();
        for (row, &y) in d.chunks(k).zip(labels) {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let lse = m + row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln();
            loss += lse - row[y] as f64;
            probs.extend(softmax_row(row));
        }
    }
    let labels = labels.to_vec();
    Tensor::from_op(
        "softmax_cross_entropy",
        vec![],
        vec![(loss / n as f64) as f32],
        vec![logits.clone()],
        Box::new(move |g, _| {
            let scale = g[0] as f64 / n as f64;
            let mut gl: Vec<f32> = probs.iter().map(|&p| (p * scale) as f32).collect();
            for (i, &y) in labels.iter().enumerate() {
                gl[i * k + y] -= scale as f32;
            }
            vec![Some(gl)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let l = Tensor::zeros(&[3, 4]);
        let loss = softmax_cross_entropy(&l, &[0, 1, 3]).unwrap().item();
        assert!((loss - 4f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn large_margin_goes_to_zero() {
        let mut prev = f32::INFINITY;
        for margin in [1.0, 5.0, 10.0, 30.0] {
            let l = Tensor::from_vec(vec![margin, 0.0, 0.0], &[1, 3]).unwrap();
            let v = softmax_cross_entropy(&l, &[0]).unwrap().item();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn label_out_of_range() {
        let l = Tensor::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&l, &[3]).is_err());
    }

    #[test]
    fn gradient_is_softmax_minus_onehot() {
        let l = Tensor::param(vec![0.0, 0.0], &[1, 2]).unwrap();
        softmax_cross_entropy(&l, &[1]).unwrap().backward().unwrap();
        assert_eq!(l.grad().unwrap(), vec![0.5, -0.5]);
    }
}
