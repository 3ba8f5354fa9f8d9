use crlnet_core::conditional::{conv4d_oracle, conv4d_query, conv4d_support, Side};
use crlnet_core::rng::rng;
use crlnet_core::tensor_autodiff::{Graph, Tensor};
use crlnet_core::verify::{conv4d_suite, CONV4D_TOLERANCE};
use rand::Rng as _;

#[test]
fn fast_path_agrees_with_nested_loops() {
    let report = conv4d_suite(21, 20).unwrap();
    assert!(report.passed(), "{report:?}");
    assert!(report.worst <= CONV4D_TOLERANCE);
}

#[test]
fn effective_centre_slice_kernel_case() {
    let mut r = rng(5);
    let rel = Tensor::from_fn(&[3, 3, 3, 3, 2], |_| r.random_range(-1.0..1.0));
    let mut kernel = Tensor::zeros(&[3, 3, 1, 1]);
    kernel.data_mut().iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
    for side in [Side::Support, Side::Query] {
        let mut g = Graph::inference();
        let (rv, kv, bv) = (g.leaf(&rel), g.leaf(&kernel), g.leaf(&Tensor::full(&[1], 0.2)));
        let y = match side {
            Side::Support => conv4d_support(&mut g, rv, kv, bv).unwrap(),
            Side::Query => conv4d_query(&mut g, rv, kv, bv).unwrap(),
        };
        let oracle = conv4d_oracle(&rel, &kernel, 0.2, side);
        for (a, b) in g.value(y).iter().zip(oracle.data()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }
}

#[test]
fn swapped_relation_gives_mirrored_matrices() {
    let mut r = rng(9);
    let (w, h, c) = (3, 2, 2);
    let mut rel = Tensor::zeros(&[w, h, w, h, c]);
    for a in 0..w {
        for b in 0..h {
            for p in 0..w {
                for q in 0..h {
                    for ch in 0..c {
                        if (a, b) <= (p, q) {
                            let v = r.random_range(-1.0..1.0);
                            let i = rel.offset(&[a, b, p, q, ch]);
                            let j = rel.offset(&[p, q, a, b, ch]);
                            rel.data_mut()[i] = v;
                            rel.data_mut()[j] = v;
                        }
                    }
                }
            }
        }
    }
    let kernel = Tensor::from_fn(&[3, 3, 3, 3], |_| r.random_range(-1.0..1.0));
    let mut g = Graph::inference();
    let (rv, kv, bv) = (g.leaf(&rel), g.leaf(&kernel), g.leaf(&Tensor::full(&[1], 0.1)));
    let s = conv4d_support(&mut g, rv, kv, bv).unwrap();
    let q = conv4d_query(&mut g, rv, kv, bv).unwrap();
    assert_eq!(g.value(s), g.value(q));
}
