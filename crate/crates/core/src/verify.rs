//! Self-check suites shared by the integration tests and the acceptance
//! gate: finite-difference gradients for every differentiable operation and
//! the full network, the nested-loop 4-D convolution oracle, and Siamese
//! swap symmetry.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::backbone::BackboneConfig;
use crate::conditional::{
    aggregate_prototypes, build_relation_tensor, conv4d_linear, conv4d_oracle, conv4d_query,
    conv4d_support, cross_correlate, positional_encode, Side,
};
use crate::data::Dataset;
use crate::error::Result;
use crate::eval::{classify_episode, sample_episode, EpisodeTask, EvalConfig, EvalReport, FeatureCache, Strategy};
use crate::model::{init_model, CrlNet, ModelConfig, PairEncoder, PairOutput, Structure};
use crate::re_representation::{finalize_vector, fuse_conditional, mlp_compress, self_attend, HeadVars};
use crate::rng::{derive_seed, rng, Rng};
use crate::synthetic::{generate_base_image, Difficulty, SyntheticDataset};
use crate::tensor_autodiff::{fd_gradient_oracle, relative_error, Bound, Graph, Tensor, Var, FD_STEP, FD_TOLERANCE};
use crate::training::{pair_distance_var, LossConfig, LossVariant};

/// Worst error of one suite entry against its tolerance.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub cases: usize,
    pub worst: f64,
    pub tolerance: f64,
    /// Where the worst error occurred, when the suite tracks it.
    pub worst_at: Option<String>,
}

impl CheckReport {
    /// False for NaN errors as well as for errors above tolerance.
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Inputs and forward rule of one gradient case.
pub struct GradCase {
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn nan_max(a: f64, b: f64) -> f64 {
    if a.is_nan() || b.is_nan() {
        f64::NAN
    } else {
        a.max(b)
    }
}

/// Worst relative error between the recorded backward pass and central
/// differences of `sum(build(inputs) * P)` for a fixed random projection `P`,
/// over every coordinate of every input.
pub fn check_gradients(case: &GradCase, seed: u64, step: f64) -> Result<f64> {
    Ok(input_errors(case, seed, step)?.into_iter().fold(0.0, nan_max))
}

/// Like [`check_gradients`], one worst error per input tensor.
pub fn input_errors(case: &GradCase, seed: u64, step: f64) -> Result<Vec<f64>> {
    let projection = {
        let mut g = Graph::inference();
        let leaves: Vec<Var> = case.inputs.iter().map(|t| g.leaf(t)).collect();
        let out = (case.build)(&mut g, &leaves)?;
        let mut r = rng(seed);
        Tensor::from_fn(g.shape(out), |_| r.random_range(-1.0..1.0))
    };
    let loss = |g: &mut Graph, leaves: &[Var]| -> Result<Var> {
        let out = (case.build)(g, leaves)?;
        let p = g.constant(projection.shape(), projection.data().to_vec())?;
        let prod = g.mul(out, p)?;
        Ok(g.sum(prod))
    };

    let mut g = Graph::new();
    let leaves: Vec<Var> = case.inputs.iter().map(|t| g.leaf(&t.clone().requiring_grad())).collect();
    let l = loss(&mut g, &leaves)?;
    g.backward(l)?;

    let mut errors = Vec::with_capacity(case.inputs.len());
    for (i, x) in case.inputs.iter().enumerate() {
        let analytic = g.grad(leaves[i]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        let numeric = fd_gradient_oracle(
            |probe| {
                let mut h = Graph::inference();
                let vs: Vec<Var> =
                    case.inputs.iter().enumerate().map(|(j, t)| h.leaf(if j == i { probe } else { t })).collect();
                loss(&mut h, &vs).map(|v| h.scalar(v)).unwrap_or(f64::NAN)
            },
            x,
            step,
        );
        errors.push(relative_error(&analytic, numeric.data()));
    }
    Ok(errors)
}

fn dim(r: &mut Rng, lo: usize, hi: usize) -> usize {
    r.random_range(lo..=hi)
}

fn uniform(r: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    Tensor::from_fn(shape, |_| r.random_range(lo..hi))
}

fn signed(r: &mut Rng, shape: &[usize]) -> Tensor {
    uniform(r, shape, -1.0, 1.0)
}

/// Values with magnitude in `[0.1, 1)` and random sign, clear of relu's kink.
fn off_kink(r: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = r.random_range(0.1..1.0);
        if r.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Smallest `|v|` over the output of `f` evaluated on `inputs`.
fn min_abs(inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::inference();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vs)?;
    Ok(g.value(out).iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min))
}

/// Resamples until every relu input sits at least `KINK_MARGIN` from zero.
const KINK_MARGIN: f64 = 0.02;
const MAX_RESAMPLES: usize = 200;

fn guarded(
    r: &mut Rng,
    mut sample: impl FnMut(&mut Rng) -> Vec<Tensor>,
    pre: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<Vec<Tensor>> {
    let mut last = sample(r);
    for _ in 0..MAX_RESAMPLES {
        if min_abs(&last, &pre)? >= KINK_MARGIN {
            break;
        }
        last = sample(r);
    }
    Ok(last)
}

fn case(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> GradCase {
    GradCase { inputs, build: Box::new(build) }
}

/// A named generator of seeded gradient cases.
pub struct OpSpec {
    pub name: &'static str,
    pub generate: fn(&mut Rng) -> Result<GradCase>,
}

fn random_shape(r: &mut Rng) -> Vec<usize> {
    let rank = dim(r, 1, 3);
    (0..rank).map(|_| dim(r, 1, 4)).collect()
}

fn binary(r: &mut Rng, f: fn(&mut Graph, Var, Var) -> Result<Var>) -> GradCase {
    let s = random_shape(r);
    case(vec![signed(r, &s), signed(r, &s)], move |g, v| f(g, v[0], v[1]))
}

fn conv4d_case(r: &mut Rng, side: Side) -> Result<GradCase> {
    let dims = [dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 3)];
    let kd: Vec<usize> = (0..4).map(|_| if r.random_bool(0.5) { 3 } else { 1 }).collect();
    let inputs = guarded(
        r,
        |r| vec![signed(r, &dims), signed(r, &kd), uniform(r, &[1], -0.5, 0.5)],
        move |g, v| conv4d_linear(g, v[0], v[1], v[2], side),
    )?;
    Ok(match side {
        Side::Support => case(inputs, |g, v| conv4d_support(g, v[0], v[1], v[2])),
        Side::Query => case(inputs, |g, v| conv4d_query(g, v[0], v[1], v[2])),
    })
}

/// Rows holding a shuffled even grid over `[-1.5, 1.5]`. Layer norm of a
/// near-constant row has third derivatives large enough to swamp central
/// differences at the default step.
fn spread_rows(r: &mut Rng, rows: usize, c: usize) -> Tensor {
    let mut data = Vec::with_capacity(rows * c);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..c).map(|i| -1.5 + 3.0 * i as f64 / (c - 1) as f64).collect();
        row.shuffle(r);
        data.extend(row);
    }
    Tensor::new(vec![rows, c], data).expect("rows x c values")
}

fn head_pre(g: &mut Graph, v: &[Var]) -> Result<Var> {
    let x = g.add(v[0], v[1])?;
    let x = g.layer_norm(x, v[2], v[3])?;
    g.affine(x, v[4], v[5])
}

/// Every differentiable operation exposed by the crate.
pub fn op_specs() -> Vec<OpSpec> {
    vec![
        OpSpec {
            name: "matmul",
            generate: |r| {
                let (m, k, n) = (dim(r, 1, 5), dim(r, 1, 5), dim(r, 1, 5));
                Ok(case(vec![signed(r, &[m, k]), signed(r, &[k, n])], |g, v| g.matmul(v[0], v[1])))
            },
        },
        OpSpec {
            name: "softmax_lastdim",
            generate: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 6)];
                Ok(case(vec![uniform(r, &s, -3.0, 3.0)], |g, v| g.softmax_lastdim(v[0])))
            },
        },
        OpSpec {
            name: "layer_norm",
            generate: |r| {
                let (rows, c) = (dim(r, 1, 4), dim(r, 2, 6));
                let inputs = vec![uniform(r, &[rows, c], -2.0, 2.0), signed(r, &[c]), signed(r, &[c])];
                Ok(case(inputs, |g, v| g.layer_norm(v[0], v[1], v[2])))
            },
        },
        OpSpec {
            name: "relu",
            generate: |r| {
                let s = random_shape(r);
                Ok(case(vec![off_kink(r, &s)], |g, v| Ok(g.relu(v[0]))))
            },
        },
        OpSpec {
            name: "conv2d",
            generate: |r| {
                let (ci, co) = (dim(r, 1, 3), dim(r, 1, 3));
                let k = if r.random_bool(0.5) { 3 } else { 1 };
                let (stride, padding) = (dim(r, 1, 2), dim(r, 0, 1));
                let (h, w) = (dim(r, k, k + 4), dim(r, k, k + 4));
                let inputs = vec![signed(r, &[ci, h, w]), signed(r, &[co, ci, k, k])];
                Ok(case(inputs, move |g, v| g.conv2d(v[0], v[1], stride, padding)))
            },
        },
        OpSpec {
            name: "reshape",
            generate: |r| {
                let (a, b, c) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                Ok(case(vec![signed(r, &[a, b, c])], move |g, v| g.reshape(v[0], &[c, a * b])))
            },
        },
        OpSpec {
            name: "flatten_spatial",
            generate: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4)];
                Ok(case(vec![signed(r, &s)], |g, v| g.flatten_spatial(v[0])))
            },
        },
        OpSpec {
            name: "permute",
            generate: |r| {
                let s = [dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4)];
                let mut axes = vec![0, 1, 2];
                axes.shuffle(r);
                Ok(case(vec![signed(r, &s)], move |g, v| g.permute(v[0], &axes)))
            },
        },
        OpSpec {
            name: "transpose",
            generate: |r| {
                let s = [dim(r, 1, 5), dim(r, 1, 5)];
                Ok(case(vec![signed(r, &s)], |g, v| g.transpose(v[0])))
            },
        },
        OpSpec {
            name: "concat",
            generate: |r| {
                let a = [dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4)];
                let axis = dim(r, 0, 2);
                let mut b = a;
                b[axis] = dim(r, 1, 4);
                Ok(case(vec![signed(r, &a), signed(r, &b)], move |g, v| g.concat(&[v[0], v[1]], axis)))
            },
        },
        OpSpec { name: "add", generate: |r| Ok(binary(r, |g, a, b| g.add(a, b))) },
        OpSpec { name: "sub", generate: |r| Ok(binary(r, |g, a, b| g.sub(a, b))) },
        OpSpec { name: "mul", generate: |r| Ok(binary(r, |g, a, b| g.mul(a, b))) },
        OpSpec {
            name: "scale",
            generate: |r| {
                let s = random_shape(r);
                let factor = r.random_range(-2.0..2.0);
                Ok(case(vec![signed(r, &s)], move |g, v| Ok(g.scale(v[0], factor))))
            },
        },
        OpSpec {
            name: "add_scalar",
            generate: |r| {
                let s = random_shape(r);
                let c = r.random_range(-2.0..2.0);
                Ok(case(vec![signed(r, &s)], move |g, v| Ok(g.add_scalar(v[0], c))))
            },
        },
        OpSpec {
            name: "add_row_bias",
            generate: |r| {
                let (rows, c) = (dim(r, 1, 4), dim(r, 1, 5));
                Ok(case(vec![signed(r, &[rows, c]), signed(r, &[c])], |g, v| g.add_row_bias(v[0], v[1])))
            },
        },
        OpSpec {
            name: "affine",
            generate: |r| {
                let (m, k, n) = (dim(r, 1, 4), dim(r, 1, 5), dim(r, 1, 5));
                let inputs = vec![signed(r, &[m, k]), signed(r, &[k, n]), signed(r, &[n])];
                Ok(case(inputs, |g, v| g.affine(v[0], v[1], v[2])))
            },
        },
        OpSpec {
            name: "mean_axis",
            generate: |r| {
                let s = random_shape(r);
                let axis = dim(r, 0, s.len() - 1);
                Ok(case(vec![signed(r, &s)], move |g, v| g.mean_axis(v[0], axis)))
            },
        },
        OpSpec {
            name: "sum",
            generate: |r| {
                let s = random_shape(r);
                Ok(case(vec![signed(r, &s)], |g, v| Ok(g.sum(v[0]))))
            },
        },
        OpSpec {
            name: "sqrt",
            generate: |r| {
                let s = random_shape(r);
                Ok(case(vec![uniform(r, &s, 0.5, 2.0)], |g, v| g.sqrt(v[0])))
            },
        },
        OpSpec {
            name: "ln",
            generate: |r| {
                let s = random_shape(r);
                Ok(case(vec![uniform(r, &s, 0.5, 2.0)], |g, v| g.ln(v[0])))
            },
        },
        OpSpec {
            name: "sum_squares",
            generate: |r| {
                let s = random_shape(r);
                Ok(case(vec![signed(r, &s)], |g, v| Ok(g.sum_squares(v[0]))))
            },
        },
        OpSpec {
            name: "positional_encode",
            generate: |r| {
                let s = [dim(r, 1, 6), 2 * dim(r, 1, 3)];
                Ok(case(vec![signed(r, &s)], |g, v| positional_encode(g, v[0])))
            },
        },
        OpSpec {
            name: "aggregate_prototypes",
            generate: |r| {
                let s = [dim(r, 1, 3), dim(r, 1, 3), 2 * dim(r, 1, 2)];
                Ok(case(vec![signed(r, &s), signed(r, &s)], |g, v| aggregate_prototypes(g, v[0], v[1])))
            },
        },
        OpSpec {
            name: "cross_correlate",
            generate: |r| {
                let (w, h, c) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4));
                let inputs = vec![signed(r, &[w * h, c]), signed(r, &[2 * w * h, c])];
                Ok(case(inputs, move |g, v| cross_correlate(g, v[0], v[1], [w, h])))
            },
        },
        OpSpec {
            name: "relation_tensor",
            generate: |r| {
                let c = dim(r, 1, 3);
                let a = [dim(r, 1, 3), dim(r, 1, 3), c];
                let b = [dim(r, 1, 3), dim(r, 1, 3), c];
                Ok(case(vec![signed(r, &a), signed(r, &b)], |g, v| build_relation_tensor(g, v[0], v[1])))
            },
        },
        OpSpec { name: "conv4d_support", generate: |r| conv4d_case(r, Side::Support) },
        OpSpec { name: "conv4d_query", generate: |r| conv4d_case(r, Side::Query) },
        OpSpec {
            name: "fuse_conditional",
            generate: |r| {
                let (w, h, c) = (dim(r, 1, 4), dim(r, 1, 4), dim(r, 1, 4));
                Ok(case(vec![signed(r, &[w, h, c]), signed(r, &[w, h])], |g, v| fuse_conditional(g, v[0], v[1])))
            },
        },
        OpSpec {
            name: "mlp_compress",
            generate: |r| {
                let (w, h, ci, c) = (dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 4), dim(r, 1, 4));
                let inputs = guarded(
                    r,
                    |r| vec![signed(r, &[w, h, ci]), signed(r, &[ci, c]), signed(r, &[c])],
                    |g, v| {
                        let flat = g.flatten_spatial(v[0])?;
                        g.affine(flat, v[1], v[2])
                    },
                )?;
                Ok(case(inputs, |g, v| mlp_compress(g, v[0], v[1], v[2])))
            },
        },
        OpSpec {
            name: "self_attend",
            generate: |r| {
                let (n, c) = (dim(r, 1, 5), dim(r, 1, 4));
                let inputs = vec![signed(r, &[n, c]), signed(r, &[c, c]), signed(r, &[c, c]), signed(r, &[c, c])];
                Ok(case(inputs, |g, v| self_attend(g, v[0], v[1], v[2], v[3])))
            },
        },
        OpSpec {
            name: "finalize_vector",
            generate: |r| {
                let (n, c) = (dim(r, 1, 4), dim(r, 3, 5));
                let inputs = guarded(
                    r,
                    |r| {
                        vec![
                            spread_rows(r, n, c),
                            uniform(r, &[n, c], -0.2, 0.2),
                            signed(r, &[c]),
                            signed(r, &[c]),
                            signed(r, &[c, c]),
                            signed(r, &[c]),
                            signed(r, &[c, c]),
                        ]
                    },
                    head_pre,
                )?;
                Ok(case(inputs, |g, v| {
                    let head = HeadVars { gamma: v[2], beta: v[3], w1: v[4], b1: v[5], w2: v[6] };
                    finalize_vector(g, v[0], v[1], &head)
                }))
            },
        },
        OpSpec {
            name: "pair_distance",
            generate: |r| {
                let c = dim(r, 1, 6);
                Ok(case(vec![signed(r, &[c]), signed(r, &[c])], |g, v| pair_distance_var(g, v[0], v[1])))
            },
        },
        OpSpec { name: "standard_loss_positive", generate: |r| loss_case(r, LossVariant::Standard, true) },
        OpSpec { name: "standard_loss_negative", generate: |r| loss_case(r, LossVariant::Standard, false) },
        OpSpec { name: "literal_loss_positive", generate: |r| loss_case(r, LossVariant::Literal, true) },
    ]
}

fn loss_case(r: &mut Rng, variant: LossVariant, same_class: bool) -> Result<GradCase> {
    let cfg = LossConfig { variant, ..LossConfig::default() };
    let c = dim(r, 1, 6);
    // keep sqrt(d) clear of the hinge at the margin and d clear of zero
    let inputs = guarded(
        r,
        |r| vec![signed(r, &[c]), signed(r, &[c])],
        move |g, v| {
            let d = pair_distance_var(g, v[0], v[1])?;
            let root = g.sqrt(d)?;
            let gap = g.add_scalar(root, -cfg.margin);
            let floor = g.add_scalar(d, -0.05);
            let gap = g.reshape(gap, &[1])?;
            let floor = g.reshape(floor, &[1])?;
            g.concat(&[gap, floor], 0)
        },
    )?;
    Ok(case(inputs, move |g, v| {
        let d = pair_distance_var(g, v[0], v[1])?;
        Ok(cfg.pair_term_var(g, d, same_class)?.expect("differentiable term"))
    }))
}

/// Seeded cases per operation and per composite configuration.
pub const CASES_PER_OP: usize = 5;

/// Runs `CASES_PER_OP` cases of every operation at the default step and tolerance.
pub fn gradient_suite(seed: u64) -> Result<Vec<CheckReport>> {
    op_specs()
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let mut worst = 0.0;
            for k in 0..CASES_PER_OP {
                let s = derive_seed(seed, &[i as u64, k as u64]);
                let case = (spec.generate)(&mut rng(s))?;
                worst = nan_max(worst, check_gradients(&case, derive_seed(s, &[1]), FD_STEP)?);
            }
            Ok(CheckReport { name: spec.name.to_string(), cases: CASES_PER_OP, worst, tolerance: FD_TOLERANCE, worst_at: None })
        })
        .collect()
}

/// Small network shapes used for the end-to-end gradient check.
pub fn composite_config(case: usize, kernel_seed: u64) -> Result<ModelConfig> {
    let backbone = match case % 3 {
        0 => BackboneConfig::from_blocks(8, 1, vec![(4, 2), (8, 2)])?,
        1 => BackboneConfig::from_blocks(12, 1, vec![(4, 2), (8, 2)])?,
        _ => BackboneConfig::from_blocks(8, 1, vec![(6, 2), (8, 1)])?,
    };
    let mut r = rng(kernel_seed);
    let kernel = [0; 4].map(|_| if r.random_bool(0.5) { 3 } else { 1 });
    Ok(ModelConfig { backbone, kernel, structure: Structure::Siamese })
}

/// Loss of one positive and one negative pair w.r.t. every parameter and
/// all three images, on a randomly initialised network.
pub fn composite_case(config: &ModelConfig, seed: u64) -> Result<GradCase> {
    let params = init_model(config, derive_seed(seed, &[0]))?;
    let net = CrlNet::new(config, &params)?;
    let n_params = params.len();
    let [c, h, w] = config.backbone.image_shape();
    let mut r = rng(derive_seed(seed, &[1]));
    let mut inputs: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    for _ in 0..3 {
        inputs.push(uniform(&mut r, &[c, h, w], 0.0, 1.0));
    }
    let loss = LossConfig::default();
    Ok(case(inputs, move |g, v| {
        let bound = Bound::from_vars(v[..n_params].to_vec());
        let (a, b, neg) = (v[n_params], v[n_params + 1], v[n_params + 2]);
        let mut total = None;
        for (other, same) in [(b, true), (neg, false)] {
            let out = net.forward_images(g, &bound, a, other)?;
            let d = pair_distance_var(g, out.support_vec, out.query_vec)?;
            let term = loss.pair_term_var(g, d, same)?.expect("standard terms are differentiable");
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
        Ok(total.expect("two pairs"))
    }))
}

/// End-to-end gradient check over `CASES_PER_OP` seeded composite shapes
/// at central-difference `step`; `worst_at` names the worst input tensor.
pub fn composite_suite(seed: u64, step: f64) -> Result<CheckReport> {
    let mut worst = 0.0;
    let mut worst_at = None;
    for k in 0..CASES_PER_OP {
        let s = derive_seed(seed, &[0xC0, k as u64]);
        let config = composite_config(k, derive_seed(s, &[2]))?;
        let case = composite_case(&config, s)?;
        let params = init_model(&config, derive_seed(s, &[0]))?;
        let names: Vec<String> = params
            .iter()
            .map(|(n, _)| n.to_string())
            .chain(["image.anchor", "image.positive", "image.negative"].map(String::from))
            .collect();
        for (name, err) in names.iter().zip(input_errors(&case, derive_seed(s, &[3]), step)?) {
            if err.is_nan() || err > worst {
                worst = nan_max(worst, err);
                worst_at = Some(format!("{name} (case {k})"));
            }
        }
    }
    Ok(CheckReport { name: "crlnet_composite".into(), cases: CASES_PER_OP, worst, tolerance: FD_TOLERANCE, worst_at })
}

/// Tolerance of the fast 4-D convolution against the literal loops.
pub const CONV4D_TOLERANCE: f64 = 1e-9;

/// Fast 4-D convolution in both directions against [`conv4d_oracle`] on
/// `cases` random relation tensors with grids up to 6 and kernels in {1, 3}.
pub fn conv4d_suite(seed: u64, cases: usize) -> Result<CheckReport> {
    let mut worst: f64 = 0.0;
    for k in 0..cases {
        let mut r = rng(derive_seed(seed, &[k as u64]));
        let dims = [dim(&mut r, 1, 6), dim(&mut r, 1, 6), dim(&mut r, 1, 6), dim(&mut r, 1, 6), dim(&mut r, 1, 4)];
        let kd: Vec<usize> = (0..4).map(|_| if r.random_bool(0.5) { 3 } else { 1 }).collect();
        let (rel, kernel) = (signed(&mut r, &dims), signed(&mut r, &kd));
        let bias = r.random_range(-0.5..0.5);
        for side in [Side::Support, Side::Query] {
            let mut g = Graph::inference();
            let (rv, kv, bv) = (g.leaf(&rel), g.leaf(&kernel), g.leaf(&Tensor::full(&[1], bias)));
            let fast = match side {
                Side::Support => conv4d_support(&mut g, rv, kv, bv)?,
                Side::Query => conv4d_query(&mut g, rv, kv, bv)?,
            };
            let oracle = conv4d_oracle(&rel, &kernel, bias, side);
            if g.shape(fast) != oracle.shape() {
                return Ok(CheckReport { name: "conv4d_oracle".into(), cases, worst: f64::INFINITY, tolerance: CONV4D_TOLERANCE, worst_at: None });
            }
            let err = g.value(fast).iter().zip(oracle.data()).map(|(a, b)| (a - b).abs()).fold(0.0, nan_max);
            worst = nan_max(worst, err);
        }
    }
    Ok(CheckReport { name: "conv4d_oracle".into(), cases, worst, tolerance: CONV4D_TOLERANCE, worst_at: None })
}

/// Counts of Siamese symmetry violations over random prototype pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SymmetryReport {
    pub pairs: usize,
    /// Swapping the inputs did not mirror the conditional matrices bit for bit.
    pub matrix_mismatches: usize,
    /// Swapping the inputs did not mirror the representation vectors bit for bit.
    pub vector_mismatches: usize,
    /// Identical prototypes gave different support and query vectors.
    pub identity_mismatches: usize,
}

impl SymmetryReport {
    pub fn passed(&self) -> bool {
        self.pairs > 0 && self.matrix_mismatches == 0 && self.vector_mismatches == 0 && self.identity_mismatches == 0
    }
}

fn bits(g: &Graph, v: Var) -> Vec<u64> {
    g.value(v).iter().map(|x| x.to_bits()).collect()
}

/// Swap symmetry of the shared learner on `pairs` random prototype pairs,
/// each under a freshly initialised default network.
pub fn symmetry_suite(seed: u64, pairs: usize) -> Result<SymmetryReport> {
    let config = ModelConfig::default();
    let [w, h, c] = config.backbone.feature_shape();
    let mut report = SymmetryReport { pairs, ..Default::default() };
    for k in 0..pairs {
        let s = derive_seed(seed, &[k as u64]);
        let params = init_model(&config, s)?;
        let net = CrlNet::new(&config, &params)?;
        let mut r = rng(derive_seed(s, &[1]));
        let a = uniform(&mut r, &[w, h, c], 0.0, 2.0);
        let b = uniform(&mut r, &[w, h, c], 0.0, 2.0);

        let mut g = Graph::inference();
        let bound = params.bind(&mut g);
        let (va, vb) = (g.leaf(&a), g.leaf(&b));
        let ab = net.re_represent_pair(&mut g, &bound, va, vb)?;
        let ba = net.re_represent_pair(&mut g, &bound, vb, va)?;
        let aa = net.re_represent_pair(&mut g, &bound, va, va)?;

        let slots = |o: &PairOutput| (o.conditional.support_matrix, o.conditional.query_matrix);
        let ((s1, q1), (s2, q2)) = (slots(&ab), slots(&ba));
        if bits(&g, s1) != bits(&g, q2) || bits(&g, q1) != bits(&g, s2) {
            report.matrix_mismatches += 1;
        }
        if bits(&g, ab.support_vec) != bits(&g, ba.query_vec) || bits(&g, ab.query_vec) != bits(&g, ba.support_vec) {
            report.vector_mismatches += 1;
        }
        if bits(&g, aa.support_vec) != bits(&g, aa.query_vec) {
            report.identity_mismatches += 1;
        }
    }
    Ok(report)
}

/// Per-sample re-measurement of the query-pool difficulty rules, computed
/// from pixels and masks rather than from generator bookkeeping.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DataAudit {
    pub query_samples: usize,
    /// `(sample id, broken rule)` for every failing sample.
    pub violations: Vec<(String, String)>,
    /// Query samples whose pixels differ from their regenerated clean glyph
    /// under a blur/noise tag.
    pub blurred: usize,
}

impl DataAudit {
    pub fn blurred_fraction(&self) -> f64 {
        if self.query_samples == 0 {
            0.0
        } else {
            self.blurred as f64 / self.query_samples as f64
        }
    }

    pub fn passed(&self, min_blur_fraction: f64) -> bool {
        self.query_samples > 0 && self.violations.is_empty() && self.blurred_fraction() >= min_blur_fraction
    }
}

/// Largest target fraction a small sample may keep.
pub const SMALL_RULE: f64 = 0.01;
/// Smallest fraction of the clean target an incomplete sample must lose.
pub const INCOMPLETE_RULE: f64 = 0.5;
/// Largest gap between target and background means when camouflaged.
pub const CAMOUFLAGE_RULE: f64 = 0.05;

fn mean_where(data: &[f64], mask: &[bool], want: bool) -> Option<f64> {
    let vals: Vec<f64> = data.iter().zip(mask).filter(|(_, &m)| m == want).map(|(&v, _)| v).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Checks pixel range and class balance of both pools and the tag rule of
/// every query sample.
pub fn audit_dataset(ds: &SyntheticDataset) -> Result<DataAudit> {
    let cfg = &ds.config;
    let mut audit = DataAudit { query_samples: ds.query.len(), ..Default::default() };
    let mut flag = |id: &str, why: String| audit.violations.push((id.to_string(), why));

    for (pool, want) in [(&ds.support, cfg.samples_per_class_support), (&ds.query, cfg.samples_per_class_query)] {
        for c in cfg.class_offset..cfg.class_offset + cfg.n_classes {
            let n = pool.iter().filter(|s| s.class_id == c).count();
            if n != want {
                flag(&format!("class {c}"), format!("{n} samples, expected {want}"));
            }
        }
    }
    for s in ds.support.iter().chain(&ds.query) {
        if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            flag(&s.id, "pixel outside [0, 1]".into());
        }
    }

    let mut blurred = 0;
    for s in &ds.query {
        let side = s.side();
        let n = (side * side) as f64;
        let kept = s.target_mask.iter().filter(|&&m| m).count();
        let Some(&tag) = s.transforms_applied.first() else {
            flag(&s.id, "query sample without a difficulty tag".into());
            continue;
        };
        match tag {
            Difficulty::Small => {
                let frac = kept as f64 / n;
                if kept == 0 || frac > SMALL_RULE {
                    flag(&s.id, format!("target fraction {frac:.4} (kept {kept} px)"));
                }
            }
            Difficulty::Incomplete => {
                // a clean target pixel survives when its value is untouched
                let clean = generate_base_image(s.class_id, s.base_seed, side)?;
                let before = clean.target_mask.iter().filter(|&&m| m).count();
                let survived = (0..side * side)
                    .filter(|&i| clean.target_mask[i] && clean.image.data()[i] == s.image.data()[i])
                    .count();
                let removed = 1.0 - survived as f64 / before.max(1) as f64;
                if removed <= INCOMPLETE_RULE {
                    flag(&s.id, format!("only {removed:.3} of the target removed"));
                }
            }
            Difficulty::Camouflaged => {
                let data = s.image.data();
                match (mean_where(data, &s.target_mask, true), mean_where(data, &s.target_mask, false)) {
                    (Some(t), Some(b)) if (t - b).abs() <= CAMOUFLAGE_RULE => {}
                    (Some(t), Some(b)) => flag(&s.id, format!("target mean {t:.3} vs background {b:.3}")),
                    _ => flag(&s.id, "camouflaged sample lacks target or background".into()),
                }
            }
            Difficulty::BlurryNoisy => {
                let clean = generate_base_image(s.class_id, s.base_seed, side)?;
                let changed = clean.image.data().iter().zip(s.image.data()).any(|(a, b)| a != b);
                if changed {
                    blurred += 1;
                } else {
                    flag(&s.id, "blurry/noisy sample equals its clean glyph".into());
                }
            }
        }
    }
    audit.blurred = blurred;
    Ok(audit)
}

/// Evaluation-protocol checks over seeded episodes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProtocolReport {
    /// Largest gap between the report's mean/CI and the closed form.
    pub ci_error: f64,
    pub k1_episodes: usize,
    /// Episodes where individual and class similarity disagreed at K = 1.
    pub k1_mismatches: usize,
    pub purity_episodes: usize,
    /// Episodes where a query's predictions changed when classified alone.
    pub purity_mismatches: usize,
}

/// Tolerance of [`EvalReport`] statistics against the closed form.
pub const CI_TOLERANCE: f64 = 1e-12;

impl ProtocolReport {
    pub fn passed(&self) -> bool {
        self.ci_error <= CI_TOLERANCE
            && self.k1_episodes > 0
            && self.k1_mismatches == 0
            && self.purity_episodes > 0
            && self.purity_mismatches == 0
    }
}

/// Runs `k1_episodes` 5-way 1-shot episodes comparing individual and class
/// similarity, checks the resulting report statistics against
/// `mean +- 1.96 s / sqrt(n)`, and replays `purity_episodes` episodes one
/// query at a time under every strategy.
pub fn protocol_suite(
    encoder: &dyn PairEncoder,
    ds: &Dataset,
    seed: u64,
    k1_episodes: usize,
    purity_episodes: usize,
) -> Result<ProtocolReport> {
    let cache = FeatureCache::build(encoder, ds)?;
    let mut report = ProtocolReport { k1_episodes, purity_episodes, ..Default::default() };
    let pair = [Strategy::IndividualSimilarity, Strategy::ClassSimilarity];
    let mut accuracies = Vec::with_capacity(k1_episodes);
    for e in 0..k1_episodes {
        let task = sample_episode(ds, 5, 1, 15, derive_seed(seed, &[0, e as u64]))?;
        let preds = classify_episode(encoder, &cache, &task, &pair)?;
        if preds.iter().any(|p| p[0] != p[1]) {
            report.k1_mismatches += 1;
        }
        let correct = preds.iter().zip(&task.query).filter(|(p, (_, y))| p[0] == *y).count();
        accuracies.push(correct as f64 / task.query.len() as f64);
    }
    if !accuracies.is_empty() {
        let n = accuracies.len() as f64;
        let mean = accuracies.iter().sum::<f64>() / n;
        let s = if accuracies.len() > 1 {
            (accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let stats = EvalReport::from_accuracies(Strategy::IndividualSimilarity, accuracies, EvalConfig::default());
        report.ci_error = nan_max((stats.mean - mean).abs(), (stats.ci95 - 1.96 * s / n.sqrt()).abs());
    }
    for e in 0..purity_episodes {
        let task = sample_episode(ds, 5, 1, 15, derive_seed(seed, &[1, e as u64]))?;
        let full = classify_episode(encoder, &cache, &task, &Strategy::ALL)?;
        let mut clean = true;
        for (q, expected) in task.query.iter().zip(&full) {
            let alone = EpisodeTask { query: vec![*q], q_per_class: 1, ..task.clone() };
            if classify_episode(encoder, &cache, &alone, &Strategy::ALL)?[0] != *expected {
                clean = false;
            }
        }
        if !clean {
            report.purity_mismatches += 1;
        }
    }
    Ok(report)
}
