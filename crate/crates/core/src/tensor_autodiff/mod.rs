//! Dense tensors, a recorded computation graph with reverse-mode
//! differentiation, and the AdamW optimizer.

mod graph;
pub mod gradcheck;
mod ops;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{fd_gradient_oracle, relative_error, FD_STEP, FD_TOLERANCE};
pub use graph::{CustomBackward, Graph, Var};
pub use ops::LAYER_NORM_EPS;
pub use optim::AdamW;
pub use params::{Bound, ParamSet};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_mismatched_length() {
        assert!(matches!(Tensor::new(vec![2, 2], vec![1.0; 3]), Err(Error::Dimension(_))));
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let eye = g.leaf(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.leaf(&t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let a = g.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let z = g.leaf(&Tensor::zeros(&[2, 2]));
        let id = g.matmul(eye, b).unwrap();
        assert_eq!(g.value(id), &[5.0, 6.0, 7.0, 8.0]);
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab), &[19.0, 22.0, 43.0, 50.0]);
        let zb = g.matmul(z, b).unwrap();
        assert_eq!(g.value(zb), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::zeros(&[2, 3]));
        let b = g.leaf(&Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[0.0, 0.0, 0.0]));
        let y = g.softmax_lastdim(x).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let big = g.leaf(&t(&[2], &[1000.0, 0.0]));
        let y = g.softmax_lastdim(big).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
        assert!((g.value(y)[0] - 1.0).abs() < 1e-12);
        let l2 = g.leaf(&t(&[2], &[2f64.ln(), 0.0]));
        let y = g.softmax_lastdim(l2).unwrap();
        assert!((g.value(y)[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((g.value(y)[1] - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.leaf(&Tensor::full(&[3], 1.0));
        let zeros = g.leaf(&Tensor::zeros(&[3]));
        let c = g.leaf(&Tensor::full(&[3], 4.2));
        let y = g.layer_norm(c, ones, zeros).unwrap();
        assert_eq!(g.value(y), &[0.0; 3]);

        let x = g.leaf(&t(&[3], &[1.0, 2.0, 3.0]));
        let y = g.layer_norm(x, ones, zeros).unwrap();
        let v = g.value(y);
        let mean: f64 = v.iter().sum::<f64>() / 3.0;
        let var: f64 = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-12);
        // epsilon inside the square root shrinks the variance by var/(var+eps)
        assert!((var - 1.0).abs() < 1e-4);
        let expected = 1.0 / (2.0 / 3.0 + LAYER_NORM_EPS).sqrt();
        assert!((v[2] - expected).abs() < 1e-12);

        let beta = g.leaf(&t(&[3], &[0.5, -1.0, 2.0]));
        let y = g.layer_norm(x, zeros, beta).unwrap();
        assert_eq!(g.value(y), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn layer_norm_rejects_bad_affine_shape() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[2, 3]));
        let gamma = g.leaf(&Tensor::zeros(&[2]));
        assert!(g.layer_norm(x, gamma, gamma).is_err());
    }

    #[test]
    fn relu_examples() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[3], &[-1.0, 0.0, 2.0]).requiring_grad());
        let y = g.relu(x);
        assert_eq!(g.value(y), &[0.0, 0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(&t(&[2], &[3.0, -3.0]).requiring_grad());
        let y = g.relu(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn conv2d_examples() {
        let mut g = Graph::new();
        let x = g.leaf(&t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let one = g.leaf(&t(&[1, 1, 1, 1], &[1.0]));
        let y = g.conv2d(x, one, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let ones = g.leaf(&Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.conv2d(x, ones, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y), &[10.0]);
        let z = g.leaf(&Tensor::zeros(&[1, 2, 2]));
        let y = g.conv2d(z, ones, 1, 1).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        let big = g.leaf(&Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(g.conv2d(x, big, 1, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn conv2d_output_size() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::zeros(&[1, 32, 32]));
        let k = g.leaf(&Tensor::zeros(&[8, 1, 3, 3]));
        let y = g.conv2d(x, k, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[8, 16, 16]);
    }

    #[test]
    fn shape_op_examples() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(f64::from).collect();
        let x = g.leaf(&t(&[2, 2, 3], &data));
        let flat = g.flatten_spatial(x).unwrap();
        assert_eq!(g.shape(flat), &[4, 3]);
        assert_eq!(g.value(flat), data.as_slice());
        let cat = g.concat(&[flat, flat], 0).unwrap();
        assert_eq!(g.shape(cat), &[8, 3]);
        let v = g.leaf(&t(&[2], &[2.0, 4.0]));
        let m = g.mean_axis(v, 0).unwrap();
        assert_eq!(g.value(m), &[3.0]);
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[3, 2, 2]);
        assert_eq!(g.value(p)[..4], [0.0, 3.0, 6.0, 9.0]);
        let bad = g.leaf(&Tensor::zeros(&[4, 2]));
        assert!(g.concat(&[flat, bad], 0).is_err());
        assert!(g.add(flat, bad).is_err());
    }

    #[test]
    fn concat_gradient_splits() {
        let mut g = Graph::new();
        let a = g.leaf(&Tensor::full(&[2, 2], 1.0).requiring_grad());
        let b = g.leaf(&Tensor::full(&[2, 1], 1.0).requiring_grad());
        let c = g.concat(&[a, b], 1).unwrap();
        let w = g.leaf(&t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 2.0, 4.0, 5.0]);
        assert_eq!(g.grad(b).unwrap(), &[3.0, 6.0]);
    }

    #[test]
    fn backward_product_rule() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::scalar(3.0).requiring_grad());
        let y = g.leaf(&Tensor::scalar(5.0).requiring_grad());
        let p = g.mul(x, y).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[5.0]);
        assert_eq!(g.grad(y).unwrap(), &[3.0]);
    }

    #[test]
    fn backward_of_softmax_sum_is_zero() {
        let mut g = Graph::new();
        let v = g.leaf(&t(&[4], &[0.3, -1.2, 2.0, 0.7]).requiring_grad());
        let s = g.softmax_lastdim(v).unwrap();
        let total = g.sum(s);
        g.backward(total).unwrap();
        assert!(g.grad(v).unwrap().iter().all(|d| d.abs() < 1e-15));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::full(&[2], 1.0).requiring_grad());
        let y = g.scale(x, 2.0);
        assert!(matches!(g.backward(y), Err(Error::Contract(_))));
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::State(_))));
        g.reset_grads();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn unreachable_leaf_has_no_grad() {
        let mut g = Graph::new();
        let x = g.leaf(&Tensor::full(&[2], 1.0).requiring_grad());
        let unused = g.leaf(&Tensor::full(&[2], 1.0).requiring_grad());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn inference_graph_records_nothing() {
        let mut g = Graph::inference();
        let x = g.leaf(&Tensor::full(&[2], 1.0).requiring_grad());
        let s = g.sum(x);
        assert!(!g.requires_grad(s));
        assert!(matches!(g.backward(s), Err(Error::State(_))));
    }

    #[test]
    fn adamw_decay_only_step() {
        let mut p = ParamSet::new();
        p.push("w", t(&[2], &[1.0, -2.0]).requiring_grad());
        p.tensor_mut(0).accumulate_grad(&[0.0, 0.0]).unwrap();
        let mut opt = AdamW::new(0.1, 0.5);
        assert_eq!(opt.step_count(), 0);
        opt.step(&mut p).unwrap();
        assert_eq!(opt.step_count(), 1);
        assert!((p.tensor(0).data()[0] - 0.95).abs() < 1e-15);
        assert!((p.tensor(0).data()[1] + 1.9).abs() < 1e-15);
    }

    #[test]
    fn adamw_first_step_closed_form() {
        let mut p = ParamSet::new();
        p.push("w", t(&[3], &[1.0, 1.0, 1.0]).requiring_grad());
        let grad = [0.5, -2.0, 1e-3];
        p.tensor_mut(0).accumulate_grad(&grad).unwrap();
        let mut opt = AdamW::new(0.01, 0.0);
        opt.step(&mut p).unwrap();
        for (w, gv) in p.tensor(0).data().iter().zip(grad) {
            let expected = 1.0 - 0.01 * gv / (gv.abs() + 1e-8);
            assert!((w - expected).abs() < 1e-12);
        }
        let (m, v) = opt.moments();
        assert_eq!(m[0].len(), 3);
        assert_eq!(v[0].len(), 3);
    }

    #[test]
    fn adamw_missing_grad_names_parameter() {
        let mut p = ParamSet::new();
        p.push("encoder.weight", Tensor::zeros(&[2]).requiring_grad());
        let err = AdamW::new(0.1, 0.0).step(&mut p).unwrap_err();
        assert!(matches!(&err, Error::Contract(m) if m.contains("encoder.weight")));
    }
}
