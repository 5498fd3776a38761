//! Finite-difference gradient checking for the op set and compositions.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::rng;
use crate::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Relative-error tolerance every differentiable op must meet.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

pub type BuildFn = fn(&mut Graph, &[NodeId]) -> Result<NodeId>;
pub type InputFn = fn(&mut ChaCha8Rng) -> Vec<Tensor>;

pub struct CaseSpec {
    pub name: &'static str,
    pub make_inputs: InputFn,
    pub build: BuildFn,
}

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub trials: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl CheckReport {
    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn all_passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_err <= self.tolerance)
    }
}

/// Worst relative error between backward and central finite differences for
/// a scalar-valued graph function of the given inputs.
///
/// The graph is rebuilt with the same seed for every perturbed evaluation, so
/// stochastic ops (dropout) see identical masks and stay differentiable.
pub fn max_rel_err(inputs: &[Tensor], build: BuildFn, graph_seed: u64) -> Result<f64> {
    max_rel_err_scaled(inputs, build, graph_seed, 1.0)
}

/// Same as [`max_rel_err`], with the analytic gradient multiplied by
/// `grad_scale` before comparison. A scale other than 1 is a deliberate fault
/// used to prove the checker can fail.
pub fn max_rel_err_scaled(
    inputs: &[Tensor],
    build: BuildFn,
    graph_seed: u64,
    grad_scale: f64,
) -> Result<f64> {
    let mut g = Graph::new(graph_seed);
    g.set_training(true);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|id| g.grad_or_zeros(*id)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(graph_seed);
        g.set_training(true);
        let ids: Vec<NodeId> = xs.iter().map(|t| g.leaf(t.clone(), false)).collect();
        let loss = build(&mut g, &ids)?;
        Ok(g.value(loss).data()[0])
    };

    let mut xs: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let orig = xs[ti].data()[j];
            xs[ti].data_mut()[j] = orig + FD_STEP;
            let up = eval(&xs)?;
            xs[ti].data_mut()[j] = orig - FD_STEP;
            let down = eval(&xs)?;
            xs[ti].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic[ti][j] * grad_scale;
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn rand_tensor(r: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.random_range(lo..hi)).collect();
    Tensor::from_vec(shape, data).expect("shape matches")
}

fn pair(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        rand_tensor(r, &[3, 4], -2.0, 2.0),
        rand_tensor(r, &[3, 4], -2.0, 2.0),
    ]
}

fn pair_nonzero(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![
        rand_tensor(r, &[3, 4], -2.0, 2.0),
        rand_tensor(r, &[3, 4], 0.5, 2.5),
    ]
}

fn single(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![rand_tensor(r, &[3, 4], -2.0, 2.0)]
}

fn single_positive(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    vec![rand_tensor(r, &[3, 4], 0.3, 3.0)]
}

/// Reduce any output to a scalar through fixed pseudo-random weights so the
/// full Jacobian is exercised, not just the row sums.
fn weighted_scalar(g: &mut Graph, out: NodeId) -> Result<NodeId> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut r = rng::stream(0xABCD, "jacobian-weights");
    let w: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let wt = g.constant(Tensor::from_vec(&shape, w)?);
    let prod = g.mul(out, wt)?;
    Ok(g.sum_all(prod))
}

/// Every differentiable builtin, plus a two-layer MLP composition.
pub fn builtin_cases() -> Vec<CaseSpec> {
    vec![
        CaseSpec {
            name: "add",
            make_inputs: pair,
            build: |g, ids| {
                let y = g.add(ids[0], ids[1])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "sub",
            make_inputs: pair,
            build: |g, ids| {
                let y = g.sub(ids[0], ids[1])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "mul",
            make_inputs: pair,
            build: |g, ids| {
                let y = g.mul(ids[0], ids[1])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "div",
            make_inputs: pair_nonzero,
            build: |g, ids| {
                let y = g.div(ids[0], ids[1])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "neg",
            make_inputs: single,
            build: |g, ids| {
                let y = g.neg(ids[0]);
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "mul_scalar",
            make_inputs: single,
            build: |g, ids| {
                let y = g.mul_scalar(ids[0], -1.7);
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "matmul",
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 5], -1.5, 1.5),
                    rand_tensor(r, &[5, 2], -1.5, 1.5),
                ]
            },
            build: |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "matmul_nt",
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 5], -1.5, 1.5),
                    rand_tensor(r, &[2, 5], -1.5, 1.5),
                ]
            },
            build: |g, ids| {
                let y = g.matmul_nt(ids[0], ids[1])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "matmul_tn",
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[5, 3], -1.5, 1.5),
                    rand_tensor(r, &[5, 2], -1.5, 1.5),
                ]
            },
            build: |g, ids| {
                let y = g.matmul_opts(ids[0], ids[1], true, false)?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "matmul_tt",
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[5, 3], -1.5, 1.5),
                    rand_tensor(r, &[2, 5], -1.5, 1.5),
                ]
            },
            build: |g, ids| {
                let y = g.matmul_opts(ids[0], ids[1], true, true)?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "transpose",
            make_inputs: single,
            build: |g, ids| {
                let y = g.transpose(ids[0])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "add_row",
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 4], -2.0, 2.0),
                    rand_tensor(r, &[4], -2.0, 2.0),
                ]
            },
            build: |g, ids| {
                let y = g.add_row(ids[0], ids[1])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "scale_rows",
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 4], -2.0, 2.0),
                    rand_tensor(r, &[3], -2.0, 2.0),
                ]
            },
            build: |g, ids| {
                let y = g.scale_rows(ids[0], ids[1])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "tanh",
            make_inputs: single,
            build: |g, ids| {
                let y = g.tanh(ids[0]);
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "gelu",
            make_inputs: single,
            build: |g, ids| {
                let y = g.gelu(ids[0]);
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "exp",
            make_inputs: single,
            build: |g, ids| {
                let y = g.exp(ids[0]);
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "log",
            make_inputs: single_positive,
            build: |g, ids| {
                let y = g.log(ids[0])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "sqrt",
            make_inputs: single_positive,
            build: |g, ids| {
                let y = g.sqrt(ids[0])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "clamp_min",
            // inputs stay away from the kink at the floor
            make_inputs: |r| {
                let mut t = rand_tensor(r, &[3, 4], -2.0, 2.0);
                for v in t.data_mut() {
                    if v.abs() < 0.05 {
                        *v += 0.1;
                    }
                }
                vec![t]
            },
            build: |g, ids| {
                let y = g.clamp_min(ids[0], 0.0);
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "layer_norm",
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[3, 6], -2.0, 2.0),
                    rand_tensor(r, &[6], 0.5, 1.5),
                    rand_tensor(r, &[6], -0.5, 0.5),
                ]
            },
            build: |g, ids| {
                let y = g.layer_norm(ids[0], ids[1], ids[2])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "dropout",
            make_inputs: single,
            build: |g, ids| {
                let y = g.dropout(ids[0], 0.3)?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "softmax",
            make_inputs: single,
            build: |g, ids| {
                let y = g.softmax(ids[0], 1)?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "log_softmax",
            make_inputs: single,
            build: |g, ids| {
                let y = g.log_softmax(ids[0], 1)?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "sum_all",
            make_inputs: single,
            build: |g, ids| Ok(g.sum_all(ids[0])),
        },
        CaseSpec {
            name: "sum_axis",
            make_inputs: single,
            build: |g, ids| {
                let y = g.sum_axis(ids[0], 0)?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "mean_all",
            make_inputs: single,
            build: |g, ids| Ok(g.mean_all(ids[0])),
        },
        CaseSpec {
            name: "mean_axis",
            make_inputs: single,
            build: |g, ids| {
                let y = g.mean_axis(ids[0], 1)?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "l2_normalize",
            make_inputs: single_positive,
            build: |g, ids| {
                let y = g.l2_normalize(ids[0], 1)?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "concat",
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[2, 3], -2.0, 2.0),
                    rand_tensor(r, &[2, 4], -2.0, 2.0),
                ]
            },
            build: |g, ids| {
                let y = g.concat(&[ids[0], ids[1]], 1)?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "index_select",
            make_inputs: |r| vec![rand_tensor(r, &[5, 3], -2.0, 2.0)],
            build: |g, ids| {
                let y = g.index_select(ids[0], 0, &[1, 1, 4, 0])?;
                weighted_scalar(g, y)
            },
        },
        CaseSpec {
            name: "bce_with_logits",
            make_inputs: |r| {
                let logits = rand_tensor(r, &[3, 4], -2.5, 2.5);
                let labels = Tensor::from_vec(
                    &[3, 4],
                    (0..12)
                        .map(|_| if r.random::<bool>() { 1.0 } else { 0.0 })
                        .collect(),
                )
                .expect("shape");
                vec![logits, labels]
            },
            build: |g, ids| {
                let y = g.bce_with_logits(ids[0], ids[1])?;
                Ok(g.mean_all(y))
            },
        },
        CaseSpec {
            name: "mlp2",
            // random two-layer MLP: checks a full composition end to end
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[2, 5], -1.0, 1.0),  // x
                    rand_tensor(r, &[4, 5], -0.8, 0.8),  // w1
                    rand_tensor(r, &[4], -0.5, 0.5),     // b1
                    rand_tensor(r, &[3, 4], -0.8, 0.8),  // w2
                    rand_tensor(r, &[3], -0.5, 0.5),     // b2
                ]
            },
            build: |g, ids| {
                let h = g.matmul_nt(ids[0], ids[1])?;
                let h = g.add_row(h, ids[2])?;
                let h = g.gelu(h);
                let o = g.matmul_nt(h, ids[3])?;
                let o = g.add_row(o, ids[4])?;
                let o = g.tanh(o);
                weighted_scalar(g, o)
            },
        },
    ]
}

/// Every training objective as a checkable case; labels and identities ride
/// along as constants, only the representations carry gradients.
pub fn loss_cases() -> Vec<CaseSpec> {
    use crate::loss;
    use crate::synth::Dataset;
    vec![
        CaseSpec {
            name: "loss_router",
            make_inputs: |r| vec![rand_tensor(r, &[4, 3], -2.0, 2.0)],
            build: |g, ids| {
                let identity = Dataset::identity_rows(&[0, 2, 1, 1], 3);
                loss::router_loss(g, ids[0], &identity)
            },
        },
        CaseSpec {
            name: "loss_classification",
            make_inputs: |r| vec![rand_tensor(r, &[3, 4], -2.5, 2.5)],
            build: |g, ids| {
                let labels = Tensor::from_vec(
                    &[3, 4],
                    vec![1., 0., 1., 0., 0., 1., 1., 0., 1., 1., 0., 0.],
                )
                .expect("shape");
                loss::classification_loss(g, ids[0], &labels)
            },
        },
        CaseSpec {
            name: "loss_retrieval",
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[4, 5], -1.0, 1.0),
                    rand_tensor(r, &[4, 5], -1.0, 1.0),
                ]
            },
            build: |g, ids| {
                let hf = g.l2_normalize(ids[0], 1)?;
                let y = g.l2_normalize(ids[1], 1)?;
                loss::retrieval_loss(g, hf, y, 0.9)
            },
        },
        CaseSpec {
            name: "loss_reconstruction",
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[4, 5], -1.0, 1.0),
                    rand_tensor(r, &[4, 5], -1.0, 1.0),
                    rand_tensor(r, &[4, 5], -1.0, 1.0),
                ]
            },
            build: |g, ids| {
                let y = g.l2_normalize(ids[1], 1)?;
                let hf = g.l2_normalize(ids[2], 1)?;
                loss::reconstruction_loss(g, ids[0], y, hf, 1.0)
            },
        },
        CaseSpec {
            name: "loss_sra",
            make_inputs: |r| {
                vec![
                    rand_tensor(r, &[5, 4], -1.0, 1.0),
                    rand_tensor(r, &[5, 6], -1.0, 1.0),
                ]
            },
            build: |g, ids| {
                let identity = Dataset::identity_rows(&[0, 1, 0, 1, 1], 2);
                loss::sra_loss(g, ids[0], ids[1], &identity, loss::SRA_EPSILON)
            },
        },
    ]
}

fn run_cases(
    specs: Vec<CaseSpec>,
    trials: usize,
    root_seed: u64,
    tolerance: f64,
) -> Result<CheckReport> {
    let mut cases = Vec::new();
    for spec in specs {
        let mut worst = 0.0f64;
        for t in 0..trials {
            let mut r = rng::stream_indexed(root_seed, spec.name, t as u64);
            let inputs = (spec.make_inputs)(&mut r);
            let graph_seed = rng::derive_indexed(root_seed, "graph", t as u64);
            worst = worst.max(max_rel_err(&inputs, spec.build, graph_seed)?);
        }
        cases.push(CaseResult {
            name: spec.name.to_string(),
            trials,
            max_rel_err: worst,
        });
    }
    Ok(CheckReport { tolerance, cases })
}

/// Run every builtin op case `trials` times with fresh random inputs.
pub fn check_builtin_ops(trials: usize, root_seed: u64, tolerance: f64) -> Result<CheckReport> {
    run_cases(builtin_cases(), trials, root_seed, tolerance)
}

/// Run every loss case `trials` times with fresh random inputs.
pub fn check_losses(trials: usize, root_seed: u64, tolerance: f64) -> Result<CheckReport> {
    run_cases(loss_cases(), trials, root_seed, tolerance)
}

/// A deliberately broken case: the analytic gradient is scaled by 1%, which
/// the checker must flag. Used as a negative control.
pub fn corrupted_case(root_seed: u64) -> Result<CaseResult> {
    let mut r = rng::stream(root_seed, "fault");
    let inputs = vec![rand_tensor(&mut r, &[3, 4], -2.0, 2.0)];
    let build: BuildFn = |g, ids| {
        let y = g.tanh(ids[0]);
        weighted_scalar(g, y)
    };
    let err = max_rel_err_scaled(&inputs, build, root_seed, 1.01)?;
    Ok(CaseResult {
        name: "injected-fault".into(),
        trials: 1,
        max_rel_err: err,
    })
}
