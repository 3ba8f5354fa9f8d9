//! Re-representation learner: fuses a conditional matrix with its prototype,
//! compresses, self-attends over positions and pools to a `C`-vector.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::rng::{derive_seed, rng};
use crate::tensor_autodiff::{Bound, Graph, ParamSet, Tensor, Var};

/// Appends `w` (`W x H`) as an extra channel of `f` (`W x H x C`).
pub fn fuse_conditional(g: &mut Graph, f: Var, w: Var) -> Result<Var> {
    let (fs, ws) = (g.shape(f).to_vec(), g.shape(w).to_vec());
    if fs.len() != 3 || ws.len() != 2 || fs[..2] != ws[..] {
        return dim_err(format!("cannot fuse matrix {ws:?} with prototype {fs:?}"));
    }
    let w3 = g.reshape(w, &[ws[0], ws[1], 1])?;
    g.concat(&[f, w3], 2)
}

/// Per-position affine map followed by relu; `x` is `W x H x C_in`, output `(W*H) x C`.
pub fn mlp_compress(g: &mut Graph, x: Var, weight: Var, bias: Var) -> Result<Var> {
    let (xs, ws) = (g.shape(x).to_vec(), g.shape(weight).to_vec());
    if xs.len() != 3 || ws.len() != 2 || ws[0] != xs[2] {
        return dim_err(format!("compress weight {ws:?} does not fit input {xs:?}"));
    }
    let flat = g.flatten_spatial(x)?;
    let y = g.affine(flat, weight, bias)?;
    Ok(g.relu(y))
}

/// Single-head scaled dot-product self-attention over the rows of `x`.
pub fn self_attend(g: &mut Graph, x: Var, wq: Var, wk: Var, wv: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return dim_err(format!("self attention expects (W*H) x C, got {shape:?}"));
    }
    let c = shape[1];
    for w in [wq, wk, wv] {
        if g.shape(w) != [c, c] {
            return dim_err(format!("attention projection {:?}, expected [{c}, {c}]", g.shape(w)));
        }
    }
    let q = g.matmul(x, wq)?;
    let k = g.matmul(x, wk)?;
    let v = g.matmul(x, wv)?;
    let kt = g.transpose(k)?;
    let logits = g.matmul(q, kt)?;
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt());
    let attn = g.softmax_lastdim(logits)?;
    g.matmul(attn, v)
}

/// Parameters of the output head `MLP(LN(f' + f_hat))`.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub gamma: Var,
    pub beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
}

/// Residual add, layer norm, two-layer MLP and mean over positions.
///
/// The second layer has no bias: a shared output offset cancels in the
/// pair distance and would never receive a gradient.
pub fn finalize_vector(g: &mut Graph, f_prime: Var, f_hat: Var, head: &HeadVars) -> Result<Var> {
    let x = g.add(f_prime, f_hat)?;
    let x = g.layer_norm(x, head.gamma, head.beta)?;
    let h = g.affine(x, head.w1, head.b1)?;
    let h = g.relu(h);
    let y = g.matmul(h, head.w2)?;
    g.mean_axis(y, 0)
}

/// Parameter positions of one re-representation learner.
#[derive(Clone, Copy, Debug)]
pub struct RerepSlots {
    compress_w: usize,
    compress_b: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    ln_gamma: usize,
    ln_beta: usize,
    mlp1_w: usize,
    mlp1_b: usize,
    mlp2_w: usize,
    /// `true` when only the conditional matrix is fed forward.
    matrix_only: bool,
}

const NAMES: [&str; 10] = [
    "compress.weight",
    "compress.bias",
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "ln.gamma",
    "ln.beta",
    "mlp1.weight",
    "mlp1.bias",
    "mlp2.weight",
];

fn shapes(c: usize, c_in: usize) -> [Vec<usize>; 10] {
    [
        vec![c_in, c],
        vec![c],
        vec![c, c],
        vec![c, c],
        vec![c, c],
        vec![c],
        vec![c],
        vec![c, c],
        vec![c],
        vec![c, c],
    ]
}

/// Adds a fresh learner under `prefix`. With `matrix_only` the compress
/// layer maps `1 -> C` instead of `C+1 -> C`.
pub fn init_re_representation(params: &mut ParamSet, prefix: &str, channels: usize, matrix_only: bool, seed: u64) -> Result<()> {
    if channels == 0 {
        return Err(Error::Config("re-representation needs at least one channel".into()));
    }
    let c_in = if matrix_only { 1 } else { channels + 1 };
    let mut r = rng(derive_seed(seed, &[0xE7]));
    for (name, shape) in NAMES.iter().zip(shapes(channels, c_in)) {
        let t = match *name {
            "ln.gamma" => Tensor::full(&shape, 1.0),
            // a zero bias makes relu(x w) homogeneous in x, and the layer
            // norm downstream would then cancel the scale of a 1-channel input
            "compress.bias" => {
                let bound = 1.0 / (c_in as f64).sqrt();
                Tensor::from_fn(&shape, |_| r.random_range(-bound..bound))
            }
            n if n.ends_with("bias") || n == "ln.beta" => Tensor::zeros(&shape),
            n => {
                let fan_in = shape[0] as f64;
                let gain = if n.starts_with("attn") || n == "mlp2.weight" { 1.0 } else { 2.0 };
                let normal = Normal::new(0.0, (gain / fan_in).sqrt()).expect("positive std");
                Tensor::from_fn(&shape, |_| normal.sample(&mut r))
            }
        };
        params.push(format!("{prefix}.{name}"), t.requiring_grad());
    }
    Ok(())
}

impl RerepSlots {
    pub fn locate(params: &ParamSet, prefix: &str, channels: usize, matrix_only: bool) -> Result<Self> {
        let c_in = if matrix_only { 1 } else { channels + 1 };
        let mut idx = [0usize; 10];
        for (slot, (name, shape)) in idx.iter_mut().zip(NAMES.iter().zip(shapes(channels, c_in))) {
            let full = format!("{prefix}.{name}");
            let i = params.index_of(&full).ok_or_else(|| Error::Config(format!("missing parameter {full}")))?;
            if params.tensor(i).shape() != shape.as_slice() {
                return dim_err(format!("{full} has shape {:?}, expected {shape:?}", params.tensor(i).shape()));
            }
            *slot = i;
        }
        let [compress_w, compress_b, wq, wk, wv, ln_gamma, ln_beta, mlp1_w, mlp1_b, mlp2_w] = idx;
        Ok(Self { compress_w, compress_b, wq, wk, wv, ln_gamma, ln_beta, mlp1_w, mlp1_b, mlp2_w, matrix_only })
    }

    pub fn head(&self, bound: &Bound) -> HeadVars {
        HeadVars {
            gamma: bound.var(self.ln_gamma),
            beta: bound.var(self.ln_beta),
            w1: bound.var(self.mlp1_w),
            b1: bound.var(self.mlp1_b),
            w2: bound.var(self.mlp2_w),
        }
    }

    /// Full learner for one side: prototype `f` and its conditional matrix `w` to a `C`-vector.
    pub fn forward(&self, g: &mut Graph, bound: &Bound, f: Var, w: Var) -> Result<Var> {
        let input = if self.matrix_only {
            let ws = g.shape(w).to_vec();
            if ws.len() != 2 || g.shape(f)[..2] != ws[..] {
                return dim_err(format!("conditional matrix {ws:?} does not match prototype {:?}", g.shape(f)));
            }
            g.reshape(w, &[ws[0], ws[1], 1])?
        } else {
            fuse_conditional(g, f, w)?
        };
        let f_prime = mlp_compress(g, input, bound.var(self.compress_w), bound.var(self.compress_b))?;
        let f_hat = self_attend(g, f_prime, bound.var(self.wq), bound.var(self.wk), bound.var(self.wv))?;
        finalize_vector(g, f_prime, f_hat, &self.head(bound))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = rng(seed);
        Tensor::from_fn(shape, |_| r.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
            }
        }
        out
    }

    fn naive_softmax_rows(x: &mut [f64], cols: usize) {
        for row in x.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
    }

    fn naive_attention(x: &[f64], wq: &[f64], wk: &[f64], wv: &[f64], n: usize, c: usize) -> Vec<f64> {
        let q = naive_matmul(x, wq, n, c, c);
        let k = naive_matmul(x, wk, n, c, c);
        let v = naive_matmul(x, wv, n, c, c);
        let mut logits = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                logits[i * n + j] = (0..c).map(|t| q[i * c + t] * k[j * c + t]).sum::<f64>() / (c as f64).sqrt();
            }
        }
        naive_softmax_rows(&mut logits, n);
        naive_matmul(&logits, &v, n, n, c)
    }

    #[test]
    fn fuse_examples() {
        let mut g = Graph::new();
        let ft = random(&[4, 4, 32], 1);
        let wt = random(&[4, 4], 2);
        let (f, w) = (g.leaf(&ft), g.leaf(&wt));
        let fused = fuse_conditional(&mut g, f, w).unwrap();
        assert_eq!(g.shape(fused), &[4, 4, 33]);
        let v = g.value(fused);
        for p in 0..16 {
            assert_eq!(v[p * 33 + 32], wt.data()[p]);
            assert_eq!(&v[p * 33..p * 33 + 32], &ft.data()[p * 32..(p + 1) * 32]);
        }
        let bad = g.leaf(&Tensor::zeros(&[3, 4]));
        assert!(matches!(fuse_conditional(&mut g, f, bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn compress_identity_and_zero() {
        let c = 3;
        let ft = Tensor::from_fn(&[2, 2, c], |i| i as f64 * 0.1);
        let mut g = Graph::new();
        let f = g.leaf(&ft);
        let w = g.leaf(&Tensor::zeros(&[2, 2]));
        let fused = fuse_conditional(&mut g, f, w).unwrap();
        let ident = Tensor::from_fn(&[c + 1, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let (wi, b0) = (g.leaf(&ident), g.leaf(&Tensor::zeros(&[c])));
        let y = mlp_compress(&mut g, fused, wi, b0).unwrap();
        assert_eq!(g.value(y), ft.data());
        let wz = g.leaf(&Tensor::zeros(&[c + 1, c]));
        let y = mlp_compress(&mut g, fused, wz, b0).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));
        let wrong = g.leaf(&Tensor::zeros(&[c, c]));
        assert!(mlp_compress(&mut g, fused, wrong, b0).is_err());
    }

    #[test]
    fn compress_matches_oracle() {
        let (xt, wt, bt) = (random(&[2, 3, 5], 3), random(&[5, 4], 4), random(&[4], 5));
        let mut g = Graph::new();
        let (x, w, b) = (g.leaf(&xt), g.leaf(&wt), g.leaf(&bt));
        let y = mlp_compress(&mut g, x, w, b).unwrap();
        let mut expected = naive_matmul(xt.data(), wt.data(), 6, 5, 4);
        for (i, v) in expected.iter_mut().enumerate() {
            *v = (*v + bt.data()[i % 4]).max(0.0);
        }
        for (a, e) in g.value(y).iter().zip(&expected) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_examples() {
        let mut g = Graph::new();
        let c = 4;
        let eye = Tensor::from_fn(&[c, c], |i| if i / c == i % c { 1.0 } else { 0.0 });
        let xt = random(&[1, c], 6);
        let x = g.leaf(&xt);
        let (wq, wk, wi) = (g.leaf(&random(&[c, c], 7)), g.leaf(&random(&[c, c], 8)), g.leaf(&eye));
        let y = self_attend(&mut g, x, wq, wk, wi).unwrap();
        assert_eq!(g.value(y), xt.data());

        let xt = random(&[4, c], 9);
        let wvt = random(&[c, c], 10);
        let x = g.leaf(&xt);
        let zero = g.leaf(&Tensor::zeros(&[c, c]));
        let wv = g.leaf(&wvt);
        let y = self_attend(&mut g, x, zero, zero, wv).unwrap();
        let v = naive_matmul(xt.data(), wvt.data(), 4, c, c);
        for j in 0..c {
            let mean = (0..4).map(|i| v[i * c + j]).sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!((g.value(y)[i * c + j] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_matches_oracle() {
        let (n, c) = (4, 8);
        let (xt, q, k, v) = (random(&[n, c], 11), random(&[c, c], 12), random(&[c, c], 13), random(&[c, c], 14));
        let mut g = Graph::new();
        let vars: Vec<Var> = [&xt, &q, &k, &v].iter().map(|t| g.leaf(t)).collect();
        let y = self_attend(&mut g, vars[0], vars[1], vars[2], vars[3]).unwrap();
        let expected = naive_attention(xt.data(), q.data(), k.data(), v.data(), n, c);
        for (a, e) in g.value(y).iter().zip(&expected) {
            assert!((a - e).abs() < 1e-9);
        }
    }

    fn head_params(c: usize, seed: u64) -> ParamSet {
        let mut p = ParamSet::new();
        init_re_representation(&mut p, "r", c, false, seed).unwrap();
        p
    }

    #[test]
    fn finalize_examples() {
        let c = 4;
        let params = head_params(c, 15);
        let slots = RerepSlots::locate(&params, "r", c, false).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let head = slots.head(&bound);
        let ft = random(&[3, c], 16);
        let f = g.leaf(&ft);
        let zero = g.leaf(&Tensor::zeros(&[3, c]));
        let pooled = finalize_vector(&mut g, f, zero, &head).unwrap();
        assert_eq!(g.shape(pooled), &[c]);

        // composed oracle
        let get = |n: &str| params.get(&format!("r.{n}")).unwrap().data().to_vec();
        let mut x = ft.data().to_vec();
        for row in x.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let (gm, bt) = (get("ln.gamma"), get("ln.beta"));
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) / (var + crate::tensor_autodiff::LAYER_NORM_EPS).sqrt() * gm[j] + bt[j];
            }
        }
        let mut h = naive_matmul(&x, &get("mlp1.weight"), 3, c, c);
        let b1 = get("mlp1.bias");
        h.iter_mut().enumerate().for_each(|(i, v)| *v = (*v + b1[i % c]).max(0.0));
        let y = naive_matmul(&h, &get("mlp2.weight"), 3, c, c);
        for j in 0..c {
            let m = (0..3).map(|i| y[i * c + j]).sum::<f64>() / 3.0;
            assert!((g.value(pooled)[j] - m).abs() < 1e-9);
        }

        // constant rows pool to the per-position output
        let row = random(&[1, c], 17);
        let constant = g.leaf(&Tensor::from_fn(&[5, c], |i| row.data()[i % c]));
        let single = g.leaf(&row);
        let z1 = g.leaf(&Tensor::zeros(&[1, c]));
        let z5 = g.leaf(&Tensor::zeros(&[5, c]));
        let a = finalize_vector(&mut g, constant, z5, &head).unwrap();
        let b = finalize_vector(&mut g, single, z1, &head).unwrap();
        for (x, y) in g.value(a).iter().zip(g.value(b)) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn finalize_is_row_permutation_invariant() {
        let c = 4;
        let params = head_params(c, 18);
        let slots = RerepSlots::locate(&params, "r", c, false).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let xt = random(&[5, c], 19);
        let perm = [3, 0, 4, 1, 2];
        let pt = Tensor::from_fn(&[5, c], |i| xt.data()[perm[i / c] * c + i % c]);
        let mut out = Vec::new();
        for t in [&xt, &pt] {
            let x = g.leaf(t);
            let fh = self_attend(&mut g, x, bound.var(slots.wq), bound.var(slots.wk), bound.var(slots.wv)).unwrap();
            let v = finalize_vector(&mut g, x, fh, &slots.head(&bound)).unwrap();
            out.push(g.value(v).to_vec());
        }
        for (a, b) in out[0].iter().zip(&out[1]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matrix_only_learner_keeps_dimension() {
        let c = 6;
        let mut params = ParamSet::new();
        init_re_representation(&mut params, "r", c, true, 20).unwrap();
        let slots = RerepSlots::locate(&params, "r", c, true).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g);
        let f = g.leaf(&random(&[2, 2, c], 21));
        let w = g.leaf(&random(&[2, 2], 22));
        let v = slots.forward(&mut g, &bound, f, w).unwrap();
        assert_eq!(g.shape(v), &[c]);
        assert!(RerepSlots::locate(&params, "r", c, false).is_err());
    }
}
