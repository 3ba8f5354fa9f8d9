//! Differentiable forward operations recorded on a [`Graph`].

use super::graph::{conv2d_forward, permute_data, Graph, Op, Var};
use crate::error::{dim_err, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err(format!("matmul of {sa:?} and {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            for t in 0..k {
                let x = av[r * k + t];
                if x == 0.0 {
                    continue;
                }
                let brow = &bv[t * n..(t + 1) * n];
                row.iter_mut().zip(brow).for_each(|(o, b)| *o += x * b);
            }
        }
        Ok(self.push(vec![m, n], out, &[a, b], Op::MatMul { a, b, m, k, n }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = match shape.last() {
            Some(&c) if c > 0 => c,
            _ => return dim_err(format!("softmax over empty last dimension, shape {shape:?}")),
        };
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.push(shape, out, &[x], Op::Softmax { x, cols }))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = match shape.last() {
            Some(&d) if d > 0 => d,
            _ => return dim_err(format!("layer norm over empty axis, shape {shape:?}")),
        };
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err(format!(
                "layer norm gamma {:?} / beta {:?} for axis length {d}",
                self.shape(gamma),
                self.shape(beta)
            ));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let s = &xv[r * d..(r + 1) * d];
            let mean = s.iter().sum::<f64>() / d as f64;
            let var = s.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for j in 0..d {
                let h = (s[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        Ok(self.push(shape, out, &[x, gamma, beta], Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, &[x], Op::Relu { x })
    }

    /// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xs, ks) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if xs.len() != 3 || ks.len() != 4 || ks[1] != xs[0] {
            return dim_err(format!("conv2d input {xs:?} with kernel {ks:?}"));
        }
        if stride == 0 {
            return dim_err("conv2d stride must be positive");
        }
        if ks[2] > xs[1] + 2 * padding || ks[3] > xs[2] + 2 * padding {
            return dim_err(format!("conv2d kernel {ks:?} larger than padded input {xs:?} (padding {padding})"));
        }
        let (shape, out) = conv2d_forward(self.value(x), &xs, self.value(kernel), &ks, stride, padding);
        Ok(self.push(shape, out, &[x, kernel], Op::Conv2d { x, kernel, stride, padding }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(x).len() || shape.contains(&0) {
            return dim_err(format!("reshape {:?} into {shape:?}", self.shape(x)));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), out, &[x], Op::Reshape { x }))
    }

    /// Merges every axis but the last: `[d0, .., dk, C] -> [d0*..*dk, C]`.
    pub fn flatten_spatial(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return dim_err(format!("flatten spatial needs rank >= 2, got {shape:?}"));
        }
        let c = shape[shape.len() - 1];
        let rows = shape[..shape.len() - 1].iter().product::<usize>();
        self.reshape(x, &[rows, c])
    }

    /// Output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return dim_err(format!("permute {shape:?} with axes {axes:?}"));
        }
        let out = permute_data(self.value(x), &shape, axes);
        let out_shape = axes.iter().map(|&a| shape[a]).collect();
        Ok(self.push(out_shape, out, &[x], Op::Permute { x, axes: axes.to_vec() }))
    }

    /// 2-D transpose.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return dim_err("concatenate of zero tensors");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err(format!("concatenate along axis {axis} of {base:?}"));
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return dim_err(format!("concatenate along axis {axis}: {base:?} vs {s:?}"));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &v in inputs {
                let width = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * width..(o + 1) * width]);
            }
        }
        Ok(self.push(out_shape, out, inputs, Op::Concat { inputs: inputs.to_vec(), axis }))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return dim_err(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b)));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "elementwise add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(shape, out, &[a, b], Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "elementwise subtract")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        Ok(self.push(shape, out, &[a, b], Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape(a, b, "elementwise multiply")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(shape, out, &[a, b], Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, &[x], Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, &[x], Op::AddScalar { x })
    }

    /// `[n, d] + [d]`, the bias broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if xs.len() != 2 || bs.len() != 1 || xs[1] != bs[0] {
            return dim_err(format!("row bias {bs:?} for matrix {xs:?}"));
        }
        let b = self.value(bias);
        let out = self.value(x).chunks(xs[1]).flat_map(|row| row.iter().zip(b).map(|(r, b)| r + b)).collect();
        Ok(self.push(xs, out, &[x, bias], Op::AddRowBias { x, bias }))
    }

    /// `x W + b` on a `[n, d_in]` matrix.
    pub fn affine(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, weight)?;
        self.add_row_bias(y, bias)
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return dim_err(format!("mean over axis {axis} of {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * len + a) * inner + i];
                }
            }
        }
        let n = len as f64;
        out.iter_mut().for_each(|v| *v /= n);
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out_shape, out, &[x], Op::MeanAxis { x, axis }))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(Vec::new(), vec![s], &[x], Op::Sum { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v < 0.0) {
            return Err(crate::Error::Contract("sqrt of a negative value".into()));
        }
        let out = self.value(x).iter().map(|v| v.sqrt()).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, &[x], Op::Sqrt { x }))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).iter().any(|&v| v <= 0.0) {
            return Err(crate::Error::Contract("log of a non-positive value".into()));
        }
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, &[x], Op::Ln { x }))
    }

    /// Sum of squares, a scalar.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let sq = self.mul(x, x).expect("same var has equal shapes");
        self.sum(sq)
    }
}
