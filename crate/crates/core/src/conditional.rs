//! Conditional learner: cross-attention of each prototype against the
//! aggregated support/query feature, an uncompressed 5-D relation tensor,
//! and a bidirectional 4-D convolution that yields one `W x H` conditional
//! matrix per side.
//!
//! Every step is written so that swapping the support and query inputs
//! swaps the outputs bit-for-bit: each side attends over the aggregate with
//! its own rows first, and both convolution directions share one reduction
//! routine fed with transposed indices.

use rand_distr::{Distribution, Normal};

use crate::error::{dim_err, Error, Result};
use crate::rng::{derive_seed, rng};
use crate::tensor_autodiff::{Bound, CustomBackward, Graph, ParamSet, Tensor, Var};

/// Which grid a conditional matrix lives on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Support,
    Query,
}

/// Sinusoidal encoding for `t in 0..len` over `channels` (must be even).
pub fn positional_encoding(len: usize, channels: usize) -> Result<Vec<f64>> {
    if !channels.is_multiple_of(2) || channels == 0 {
        return Err(Error::Config(format!("positional encoding needs an even channel count, got {channels}")));
    }
    let mut pe = vec![0.0; len * channels];
    for t in 0..len {
        for i in 0..channels / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / channels as f64);
            let angle = t as f64 / freq;
            pe[t * channels + 2 * i] = angle.sin();
            pe[t * channels + 2 * i + 1] = angle.cos();
        }
    }
    Ok(pe)
}

/// Adds the sinusoidal encoding to a `[T, C]` node.
pub fn positional_encode(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return dim_err(format!("positional encoding expects [T, C], got {shape:?}"));
    }
    let pe = positional_encoding(shape[0], shape[1])?;
    let pe = g.constant(&shape, pe)?;
    g.add(x, pe)
}

fn check_prototype(g: &Graph, f: Var, what: &str) -> Result<[usize; 3]> {
    match *g.shape(f) {
        [w, h, c] => Ok([w, h, c]),
        ref s => dim_err(format!("{what} must be W x H x C, got {s:?}")),
    }
}

/// Flattens both prototypes to `(W*H) x C`, stacks `first` above `second`
/// and adds the positional encoding over the `2*W*H` rows.
pub fn aggregate_prototypes(g: &mut Graph, first: Var, second: Var) -> Result<Var> {
    let a = check_prototype(g, first, "support prototype")?;
    let b = check_prototype(g, second, "query prototype")?;
    if a != b {
        return dim_err(format!("prototype shapes differ: {a:?} vs {b:?}"));
    }
    let fa = g.flatten_spatial(first)?;
    let fb = g.flatten_spatial(second)?;
    let m = g.concat(&[fa, fb], 0)?;
    positional_encode(g, m)
}

/// `softmax(f fm^T / sqrt(C)) fm`, reshaped back to `W x H x C`.
///
/// `f` is a `(W*H) x C` query matrix, `fm` the `(2*W*H) x C` aggregate.
pub fn cross_correlate(g: &mut Graph, f: Var, fm: Var, grid: [usize; 2]) -> Result<Var> {
    let (fs, ms) = (g.shape(f).to_vec(), g.shape(fm).to_vec());
    if fs.len() != 2 || ms.len() != 2 || fs[1] != ms[1] {
        return dim_err(format!("cross correlation of {fs:?} with aggregate {ms:?}"));
    }
    if fs[0] != grid[0] * grid[1] {
        return dim_err(format!("{} rows do not fill a {grid:?} grid", fs[0]));
    }
    let c = fs[1];
    let kt = g.transpose(fm)?;
    let logits = g.matmul(f, kt)?;
    let logits = g.scale(logits, 1.0 / (c as f64).sqrt());
    let attn = g.softmax_lastdim(logits)?;
    let out = g.matmul(attn, fm)?;
    g.reshape(out, &[grid[0], grid[1], c])
}

struct RelationRule {
    support_positions: usize,
    query_positions: usize,
    channels: usize,
}

impl CustomBackward for RelationRule {
    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let (ns, nq, c) = (self.support_positions, self.query_positions, self.channels);
        let mut da = vec![0.0; a.len()];
        let mut db = vec![0.0; b.len()];
        for i in 0..ns {
            for p in 0..nq {
                let base = (i * nq + p) * c;
                for ch in 0..c {
                    let gv = grad[base + ch];
                    da[i * c + ch] += gv * b[p * c + ch];
                    db[p * c + ch] += gv * a[i * c + ch];
                }
            }
        }
        vec![Some(da), Some(db)]
    }
}

/// `rel[ws, hs, wq, hq, c] = support[ws, hs, c] * query[wq, hq, c]`.
pub fn build_relation_tensor(g: &mut Graph, support_corr: Var, query_corr: Var) -> Result<Var> {
    let [ws, hs, cs] = check_prototype(g, support_corr, "support correlated feature")?;
    let [wq, hq, cq] = check_prototype(g, query_corr, "query correlated feature")?;
    if cs != cq {
        return dim_err(format!("relation tensor channel mismatch: {cs} vs {cq}"));
    }
    let (a, b) = (g.value(support_corr), g.value(query_corr));
    let (ns, nq) = (ws * hs, wq * hq);
    let mut out = Vec::with_capacity(ns * nq * cs);
    for i in 0..ns {
        for p in 0..nq {
            for ch in 0..cs {
                out.push(a[i * cs + ch] * b[p * cs + ch]);
            }
        }
    }
    let rule = RelationRule { support_positions: ns, query_positions: nq, channels: cs };
    g.custom(&[support_corr, query_corr], vec![ws, hs, wq, hq, cs], out, Box::new(rule))
}

/// Geometry of a 4-D convolution over a relation tensor in one direction.
#[derive(Clone, Copy, Debug)]
struct Conv4dPlan {
    direction: Side,
    /// Grid the output lives on.
    out_grid: [usize; 2],
    /// Grid the kernel slides over and that is summed out.
    other_grid: [usize; 2],
    /// Full relation tensor spatial dims `[ws, hs, wq, hq]`.
    rel_dims: [usize; 4],
    channels: usize,
    /// Kernel dims `[K, L, M, N]`.
    kernel: [usize; 4],
}

impl Conv4dPlan {
    fn new(rel_shape: &[usize], kernel_shape: &[usize], direction: Side) -> Result<Self> {
        let rel_dims: [usize; 4] = match *rel_shape {
            [a, b, c, d, _] => [a, b, c, d],
            _ => return dim_err(format!("relation tensor must be 5-D, got {rel_shape:?}")),
        };
        let kernel: [usize; 4] = match *kernel_shape {
            [a, b, c, d] => [a, b, c, d],
            _ => return dim_err(format!("4-D kernel expected, got {kernel_shape:?}")),
        };
        if kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return dim_err(format!("kernel dims {kernel:?} must be odd and positive"));
        }
        let (out_grid, other_grid) = match direction {
            Side::Support => ([rel_dims[0], rel_dims[1]], [rel_dims[2], rel_dims[3]]),
            Side::Query => ([rel_dims[2], rel_dims[3]], [rel_dims[0], rel_dims[1]]),
        };
        for (k, n) in [(kernel[0], other_grid[0]), (kernel[1], other_grid[1])] {
            let pad = (k - 1) / 2;
            if k > n + 2 * pad {
                return dim_err(format!("kernel {kernel:?} larger than padded grid {other_grid:?}"));
            }
        }
        Ok(Self { direction, out_grid, other_grid, rel_dims, channels: rel_shape[4], kernel })
    }

    /// Index of the effective `K x L` weight `(k, l)` in the flat 4-D kernel.
    /// Both directions read the slice at the centre of the fixed `M x N` pair;
    /// the query direction reads it through the transposed kernel, which is
    /// the same slice.
    fn weight_index(&self, k: usize, l: usize) -> usize {
        let [_, kl, km, kn] = self.kernel;
        ((k * kl + l) * km + km / 2) * kn + kn / 2
    }

    /// Channel sums laid out as `[out position][other position]`.
    fn channel_sums(&self, rel: &[f64]) -> Vec<f64> {
        let ns = self.rel_dims[0] * self.rel_dims[1];
        let nq = self.rel_dims[2] * self.rel_dims[3];
        let c = self.channels;
        let mut s = vec![0.0; ns * nq];
        for i in 0..ns {
            for p in 0..nq {
                let base = (i * nq + p) * c;
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += rel[base + ch];
                }
                let idx = match self.direction {
                    Side::Support => i * nq + p,
                    Side::Query => p * ns + i,
                };
                s[idx] = acc;
            }
        }
        s
    }

    fn n_out(&self) -> usize {
        self.out_grid[0] * self.out_grid[1]
    }

    fn n_other(&self) -> usize {
        self.other_grid[0] * self.other_grid[1]
    }

    /// Calls `visit(out, other_neighbor, weight_index)` for every term of the sum.
    fn for_each_term(&self, mut visit: impl FnMut(usize, usize, usize)) {
        let [ow, oh] = self.other_grid;
        let (kk, kl) = (self.kernel[0], self.kernel[1]);
        let (ck, cl) = ((kk / 2) as isize, (kl / 2) as isize);
        for o in 0..self.n_out() {
            for pw in 0..ow {
                for ph in 0..oh {
                    for k in 0..kk {
                        let nw = pw as isize + k as isize - ck;
                        if nw < 0 || nw >= ow as isize {
                            continue;
                        }
                        for l in 0..kl {
                            let nh = ph as isize + l as isize - cl;
                            if nh < 0 || nh >= oh as isize {
                                continue;
                            }
                            visit(o, nw as usize * oh + nh as usize, self.weight_index(k, l));
                        }
                    }
                }
            }
        }
    }

    fn forward(&self, rel: &[f64], kernel: &[f64], bias: f64) -> Vec<f64> {
        let sums = self.channel_sums(rel);
        let n_other = self.n_other();
        let mut acc = vec![0.0; self.n_out()];
        self.for_each_term(|o, q, w| acc[o] += kernel[w] * sums[o * n_other + q]);
        acc.iter_mut().for_each(|v| *v += bias);
        acc
    }
}

struct Conv4dRule {
    plan: Conv4dPlan,
}

impl CustomBackward for Conv4dRule {
    fn backward(&self, inputs: &[&[f64]], _output: &[f64], grad: &[f64]) -> Vec<Option<Vec<f64>>> {
        let plan = &self.plan;
        let (rel, kernel) = (inputs[0], inputs[1]);
        let sums = plan.channel_sums(rel);
        let n_other = plan.n_other();
        let mut dsums = vec![0.0; sums.len()];
        let mut dkernel = vec![0.0; kernel.len()];
        plan.for_each_term(|o, q, w| {
            dkernel[w] += grad[o] * sums[o * n_other + q];
            dsums[o * n_other + q] += grad[o] * kernel[w];
        });
        let ns = plan.rel_dims[0] * plan.rel_dims[1];
        let nq = plan.rel_dims[2] * plan.rel_dims[3];
        let c = plan.channels;
        let mut drel = vec![0.0; rel.len()];
        for i in 0..ns {
            for p in 0..nq {
                let d = match plan.direction {
                    Side::Support => dsums[i * nq + p],
                    Side::Query => dsums[p * ns + i],
                };
                drel[(i * nq + p) * c..(i * nq + p + 1) * c].iter_mut().for_each(|v| *v = d);
            }
        }
        let dbias = vec![grad.iter().sum()];
        vec![Some(drel), Some(dkernel), Some(dbias)]
    }
}

/// Pre-activation 4-D convolution in one direction, `[W, H]` on the output side's grid.
pub fn conv4d_linear(g: &mut Graph, rel: Var, kernel: Var, bias: Var, direction: Side) -> Result<Var> {
    let plan = Conv4dPlan::new(g.shape(rel), g.shape(kernel), direction)?;
    if g.value(bias).len() != 1 {
        return dim_err(format!("4-D convolution bias must be a scalar, got {:?}", g.shape(bias)));
    }
    let out = plan.forward(g.value(rel), g.value(kernel), g.value(bias)[0]);
    g.custom(&[rel, kernel, bias], plan.out_grid.to_vec(), out, Box::new(Conv4dRule { plan }))
}

/// Conditional matrix on the support grid: reduce over channels and the
/// query grid with the kernel sliding over query positions, then relu.
pub fn conv4d_support(g: &mut Graph, rel: Var, kernel: Var, bias: Var) -> Result<Var> {
    let y = conv4d_linear(g, rel, kernel, bias, Side::Support)?;
    Ok(g.relu(y))
}

/// Mirror of [`conv4d_support`] producing the matrix on the query grid.
pub fn conv4d_query(g: &mut Graph, rel: Var, kernel: Var, bias: Var) -> Result<Var> {
    let y = conv4d_linear(g, rel, kernel, bias, Side::Query)?;
    Ok(g.relu(y))
}

/// Brute-force nested-loop 4-D convolution used to check [`conv4d_support`]
/// and [`conv4d_query`]. Works on plain tensors and never vectorizes.
pub fn conv4d_oracle(rel: &Tensor, kernel: &Tensor, bias: f64, direction: Side) -> Tensor {
    let [ws, hs, wq, hq, c] = <[usize; 5]>::try_from(rel.shape()).expect("5-D relation tensor");
    let [kk, kl, km, kn] = <[usize; 4]>::try_from(kernel.shape()).expect("4-D kernel");
    let (ck, cl, cm, cn) = ((kk / 2) as isize, (kl / 2) as isize, km / 2, kn / 2);
    let at = |a: isize, b: isize, p: isize, q: isize, ch: usize| -> f64 {
        if a < 0 || b < 0 || p < 0 || q < 0 || a >= ws as isize || b >= hs as isize || p >= wq as isize || q >= hq as isize {
            0.0
        } else {
            rel.get(&[a as usize, b as usize, p as usize, q as usize, ch])
        }
    };
    let relu = |v: f64| if v > 0.0 { v } else { 0.0 };
    match direction {
        Side::Support => {
            let mut out = Tensor::zeros(&[ws, hs]);
            for a in 0..ws {
                for b in 0..hs {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for p in 0..wq {
                            for q in 0..hq {
                                for k in 0..kk {
                                    for l in 0..kl {
                                        let w = kernel.get(&[k, l, cm, cn]);
                                        let x = at(a as isize, b as isize, p as isize + k as isize - ck, q as isize + l as isize - cl, ch);
                                        acc += w * x;
                                    }
                                }
                            }
                        }
                    }
                    out.data_mut()[a * hs + b] = relu(acc + bias);
                }
            }
            out
        }
        Side::Query => {
            // transposed kernel: W^T[m, n, k, l] = W[k, l, m, n], with the
            // query pair fixed at the centre of its (M, N) dims
            let mut out = Tensor::zeros(&[wq, hq]);
            for p in 0..wq {
                for q in 0..hq {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for a in 0..ws {
                            for b in 0..hs {
                                for m in 0..kk {
                                    for n in 0..kl {
                                        let w = kernel.get(&[m, n, cm, cn]);
                                        let x = at(a as isize + m as isize - ck, b as isize + n as isize - cl, p as isize, q as isize, ch);
                                        acc += w * x;
                                    }
                                }
                            }
                        }
                    }
                    out.data_mut()[p * hq + q] = relu(acc + bias);
                }
            }
            out
        }
    }
}

/// Kernel and bias positions of one conditional learner in a [`ParamSet`].
#[derive(Clone, Copy, Debug)]
pub struct ConditionalSlots {
    pub kernel: usize,
    pub bias: usize,
}

impl ConditionalSlots {
    pub fn locate(params: &ParamSet, prefix: &str) -> Result<Self> {
        let find = |n: &str| {
            let name = format!("{prefix}.{n}");
            params.index_of(&name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let slots = Self { kernel: find("kernel")?, bias: find("bias")? };
        if params.tensor(slots.kernel).shape().len() != 4 {
            return dim_err(format!("{prefix}.kernel must be 4-D"));
        }
        Ok(slots)
    }
}

/// Kernel std relative to `1 / fan_in`.
pub const KERNEL_INIT_SCALE: f64 = 1e-3;

/// Near-zero 4-D kernel and positive bias under `prefix`.
///
/// The relation tensor of rectified features is mostly one-signed, so a
/// kernel at the usual fan-in scale puts every position on the same side of
/// the relu and half of all seeds start with a dead matrix.
pub fn init_conditional(params: &mut ParamSet, prefix: &str, kernel_dims: [usize; 4], channels: usize, seed: u64) -> Result<()> {
    if kernel_dims.iter().any(|&k| k == 0 || k % 2 == 0) {
        return Err(Error::Config(format!("4-D kernel dims {kernel_dims:?} must be odd")));
    }
    let fan_in = (kernel_dims[0] * kernel_dims[1] * channels) as f64;
    let normal = Normal::new(0.0, KERNEL_INIT_SCALE / fan_in).expect("positive std");
    let mut r = rng(derive_seed(seed, &[0xC4]));
    let kernel = Tensor::from_fn(&kernel_dims, |_| normal.sample(&mut r));
    params.push(format!("{prefix}.kernel"), kernel.requiring_grad());
    params.push(format!("{prefix}.bias"), Tensor::full(&[1], 0.1).requiring_grad());
    Ok(())
}

/// Output of [`conditional_forward`].
#[derive(Clone, Copy, Debug)]
pub struct ConditionalOutput {
    pub support_matrix: Var,
    pub query_matrix: Var,
    pub support_corr: Var,
    pub query_corr: Var,
    pub relation: Var,
}

/// Correlated feature of `own` against the aggregate of `[own; other]`.
fn correlate_side(g: &mut Graph, own: Var, other: Var) -> Result<Var> {
    let [w, h, _] = check_prototype(g, own, "prototype")?;
    let fm = aggregate_prototypes(g, own, other)?;
    let flat = g.flatten_spatial(own)?;
    let q = positional_encode(g, flat)?;
    cross_correlate(g, q, fm, [w, h])
}

/// Support and query conditional matrices for a prototype pair.
///
/// `support_slots` drives the support-grid reduction and `query_slots` the
/// query-grid one; pass the same slots for the shared (Siamese) learner.
pub fn conditional_forward(
    g: &mut Graph,
    bound: &Bound,
    fs: Var,
    fq: Var,
    support_slots: ConditionalSlots,
    query_slots: ConditionalSlots,
) -> Result<ConditionalOutput> {
    let a = check_prototype(g, fs, "support prototype")?;
    let b = check_prototype(g, fq, "query prototype")?;
    if a != b {
        return dim_err(format!("prototype shapes differ: {a:?} vs {b:?}"));
    }
    let support_corr = correlate_side(g, fs, fq)?;
    let query_corr = correlate_side(g, fq, fs)?;
    let relation = build_relation_tensor(g, support_corr, query_corr)?;
    let support_matrix = conv4d_support(g, relation, bound.var(support_slots.kernel), bound.var(support_slots.bias))?;
    let query_matrix = conv4d_query(g, relation, bound.var(query_slots.kernel), bound.var(query_slots.bias))?;
    Ok(ConditionalOutput { support_matrix, query_matrix, support_corr, query_corr, relation })
}
