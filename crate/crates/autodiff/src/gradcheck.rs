//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates the forward pass, so it is independent of
//! every backward rule it verifies. [`op_catalog`] lists one randomized case
//! per registered op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Array, Graph, Result, Var};

/// Builds a scalar from the leaves it is handed, in the order of the inputs.
pub type Builder = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> + Send + Sync>;

pub struct GradCheckCase {
    pub inputs: Vec<Array>,
    pub build: Builder,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub max_absolute_error: f64,
    pub checked: usize,
}

/// Gradients below this magnitude are compared on an absolute scale.
pub const RELATIVE_FLOOR: f64 = 1e-3;

fn eval(build: &Builder, inputs: &[Array]) -> Result<f64> {
    let g = Graph::new();
    let leaves = inputs
        .iter()
        .map(|a| g.param(a.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = build(&g, &leaves)?;
    Ok(out.scalar().expect("gradcheck builders must return a scalar"))
}

/// Compare reverse-mode gradients of every input against central
/// differences with step `h`.
pub fn check(case: &GradCheckCase, h: f64) -> Result<GradCheckReport> {
    let g = Graph::new();
    let leaves = case
        .inputs
        .iter()
        .map(|a| g.param(a.clone()))
        .collect::<Result<Vec<_>>>()?;
    let root = (case.build)(&g, &leaves)?;
    g.backward(root)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        checked: 0,
    };
    let mut probe = case.inputs.clone();
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = g
            .grad(*leaf)
            .unwrap_or_else(|| Array::zeros(case.inputs[i].shape()));
        for j in 0..probe[i].len() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + h;
            let plus = eval(&case.build, &probe)?;
            probe[i].data_mut()[j] = orig - h;
            let minus = eval(&case.build, &probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[j];
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(RELATIVE_FLOOR);
            report.max_absolute_error = report.max_absolute_error.max(abs);
            report.max_relative_error = report.max_relative_error.max(rel);
            report.checked += 1;
        }
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.5);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Distinct values with gaps far wider than any finite-difference step, so
/// max-pool windows never tie.
fn well_separated(rng: &mut ChaCha8Rng, shape: &[usize]) -> Array {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.05 - n as f64 * 0.025).collect();
    for i in (1..n).rev() {
        values.swap(i, rng.gen_range(0..=i));
    }
    Array::new(shape.to_vec(), values).unwrap()
}

/// Reduce an arbitrary-shaped node to a scalar through a fixed random
/// projection so every output element carries a distinct upstream gradient.
fn project<'g>(out: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let shape = out.shape();
    let w = uniform(&mut rng, &shape, -1.0, 1.0);
    let w = out.graph().constant(w)?;
    out.mul(w)?.sum()
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.gen_range(lo..=hi)
}

/// Every registered op paired with a randomized case generator.
pub fn op_catalog() -> Vec<(&'static str, fn(u64) -> GradCheckCase)> {
    vec![
        ("matmul", case_matmul),
        ("transpose", case_transpose),
        ("reshape", case_reshape),
        ("conv2d", case_conv2d),
        ("conv2d_strided_no_bias", case_conv2d_strided),
        ("dense", case_dense),
        ("relu", case_relu),
        ("max_pool2d", case_max_pool),
        ("global_avg_pool", case_global_avg_pool),
        ("layer_norm", case_layer_norm),
        ("softmax", case_softmax),
        ("log", case_log),
        ("exp", case_exp),
        ("add", case_add),
        ("sub", case_sub),
        ("mul", case_mul),
        ("scale", case_scale),
        ("scale_by", case_scale_by),
        ("concat", case_concat),
        ("sum", case_sum),
        ("mean", case_mean),
        ("mean_rows", case_mean_rows),
        ("gather_rows", case_gather_rows),
        ("l2_normalize", case_l2_normalize),
        ("cosine_similarity", case_cosine_similarity),
        ("softmax_cross_entropy", case_softmax_cross_entropy),
    ]
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn case_matmul(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, k, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 5), dim(&mut r, 1, 4));
    GradCheckCase {
        inputs: vec![uniform(&mut r, &[m, k], -1.0, 1.0), uniform(&mut r, &[k, n], -1.0, 1.0)],
        build: Box::new(move |_, v| project(v[0].matmul(v[1])?, seed)),
    }
}

fn case_transpose(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    GradCheckCase {
        inputs: vec![uniform(&mut r, &[m, n], -1.0, 1.0)],
        build: Box::new(move |_, v| project(v[0].transpose()?, seed)),
    }
}

fn case_reshape(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    GradCheckCase {
        inputs: vec![uniform(&mut r, &[m, n], -1.0, 1.0)],
        build: Box::new(move |_, v| project(v[0].reshape(&[n * m])?, seed)),
    }
}

fn case_conv2d(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (n, c, oc) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3), dim(&mut r, 1, 3));
    let (h, w) = (dim(&mut r, 3, 6), dim(&mut r, 3, 6));
    GradCheckCase {
        inputs: vec![
            uniform(&mut r, &[n, c, h, w], -1.0, 1.0),
            uniform(&mut r, &[oc, c, 3, 3], -1.0, 1.0),
            uniform(&mut r, &[oc], -1.0, 1.0),
        ],
        build: Box::new(move |_, v| project(v[0].conv2d(v[1], Some(v[2]), 1, 1)?, seed)),
    }
}

fn case_conv2d_strided(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (c, oc) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3));
    let (h, w) = (dim(&mut r, 4, 7), dim(&mut r, 4, 7));
    let k = dim(&mut r, 1, 3);
    GradCheckCase {
        inputs: vec![
            uniform(&mut r, &[1, c, h, w], -1.0, 1.0),
            uniform(&mut r, &[oc, c, k, k], -1.0, 1.0),
        ],
        build: Box::new(move |_, v| project(v[0].conv2d(v[1], None, 2, 0)?, seed)),
    }
}

fn case_dense(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, i, o) = (dim(&mut r, 1, 4), dim(&mut r, 1, 5), dim(&mut r, 1, 4));
    GradCheckCase {
        inputs: vec![
            uniform(&mut r, &[m, i], -1.0, 1.0),
            uniform(&mut r, &[i, o], -1.0, 1.0),
            uniform(&mut r, &[o], -1.0, 1.0),
        ],
        build: Box::new(move |_, v| project(v[0].dense(v[1], v[2])?, seed)),
    }
}

fn case_relu(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 6));
    GradCheckCase {
        inputs: vec![away_from_zero(&mut r, &[m, n])],
        build: Box::new(move |_, v| project(v[0].relu()?, seed)),
    }
}

fn case_max_pool(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (n, c) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3));
    let (h, w) = (dim(&mut r, 2, 7), dim(&mut r, 2, 7));
    GradCheckCase {
        inputs: vec![well_separated(&mut r, &[n, c, h, w])],
        build: Box::new(move |_, v| project(v[0].max_pool2d(2, 2)?, seed)),
    }
}

fn case_global_avg_pool(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (n, c) = (dim(&mut r, 1, 2), dim(&mut r, 1, 3));
    let (h, w) = (dim(&mut r, 1, 5), dim(&mut r, 1, 5));
    GradCheckCase {
        inputs: vec![uniform(&mut r, &[n, c, h, w], -1.0, 1.0)],
        build: Box::new(move |_, v| project(v[0].global_avg_pool()?, seed)),
    }
}

fn case_layer_norm(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, d) = (dim(&mut r, 1, 4), dim(&mut r, 2, 6));
    GradCheckCase {
        inputs: vec![
            uniform(&mut r, &[m, d], -2.0, 2.0),
            uniform(&mut r, &[d], 0.5, 1.5),
            uniform(&mut r, &[d], -0.5, 0.5),
        ],
        build: Box::new(move |_, v| project(v[0].layer_norm(v[1], v[2], 1e-5)?, seed)),
    }
}

fn case_softmax(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, d) = (dim(&mut r, 1, 4), dim(&mut r, 2, 6));
    GradCheckCase {
        inputs: vec![uniform(&mut r, &[m, d], -3.0, 3.0)],
        build: Box::new(move |_, v| project(v[0].softmax()?, seed)),
    }
}

fn case_log(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    GradCheckCase {
        inputs: vec![uniform(&mut r, &[m, n], 0.2, 3.0)],
        build: Box::new(move |_, v| project(v[0].log()?, seed)),
    }
}

fn case_exp(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    GradCheckCase {
        inputs: vec![uniform(&mut r, &[m, n], -2.0, 2.0)],
        build: Box::new(move |_, v| project(v[0].exp()?, seed)),
    }
}

fn pair(seed: u64) -> (ChaCha8Rng, Vec<Array>) {
    let mut r = rng(seed);
    let (m, n) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4));
    let a = uniform(&mut r, &[m, n], -1.0, 1.0);
    let b = uniform(&mut r, &[m, n], -1.0, 1.0);
    (r, vec![a, b])
}

fn case_add(seed: u64) -> GradCheckCase {
    let (_, inputs) = pair(seed);
    GradCheckCase {
        inputs,
        build: Box::new(move |_, v| project(v[0].add(v[1])?, seed)),
    }
}

fn case_sub(seed: u64) -> GradCheckCase {
    let (_, inputs) = pair(seed);
    GradCheckCase {
        inputs,
        build: Box::new(move |_, v| project(v[0].sub(v[1])?, seed)),
    }
}

fn case_mul(seed: u64) -> GradCheckCase {
    let (_, inputs) = pair(seed);
    GradCheckCase {
        inputs,
        build: Box::new(move |_, v| project(v[0].mul(v[1])?, seed)),
    }
}

fn case_scale(seed: u64) -> GradCheckCase {
    let (mut r, mut inputs) = pair(seed);
    inputs.truncate(1);
    let factor = r.gen_range(-3.0..3.0);
    GradCheckCase {
        inputs,
        build: Box::new(move |_, v| project(v[0].scale(factor)?, seed)),
    }
}

fn case_scale_by(seed: u64) -> GradCheckCase {
    let (mut r, mut inputs) = pair(seed);
    inputs.truncate(1);
    inputs.push(Array::scalar(r.gen_range(-3.0..3.0)));
    GradCheckCase {
        inputs,
        build: Box::new(move |_, v| project(v[0].scale_by(v[1])?, seed)),
    }
}

fn case_concat(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let axis = dim(&mut r, 0, 1);
    let (m, n) = (dim(&mut r, 1, 3), dim(&mut r, 1, 3));
    let inputs = (0..3)
        .map(|_| {
            let extra = dim(&mut r, 1, 3);
            let shape = if axis == 0 { [extra, n] } else { [m, extra] };
            uniform(&mut r, &shape, -1.0, 1.0)
        })
        .collect();
    GradCheckCase {
        inputs,
        build: Box::new(move |_, v| project(Var::concat(v, axis)?, seed)),
    }
}

fn case_sum(seed: u64) -> GradCheckCase {
    let (_, mut inputs) = pair(seed);
    inputs.truncate(1);
    GradCheckCase {
        inputs,
        build: Box::new(move |_, v| v[0].mul(v[0])?.sum()),
    }
}

fn case_mean(seed: u64) -> GradCheckCase {
    let (_, mut inputs) = pair(seed);
    inputs.truncate(1);
    GradCheckCase {
        inputs,
        build: Box::new(move |_, v| v[0].mul(v[0])?.mean()),
    }
}

fn case_mean_rows(seed: u64) -> GradCheckCase {
    let (_, mut inputs) = pair(seed);
    inputs.truncate(1);
    GradCheckCase {
        inputs,
        build: Box::new(move |_, v| project(v[0].mean_rows()?, seed)),
    }
}

fn case_gather_rows(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (rows, d) = (dim(&mut r, 2, 5), dim(&mut r, 1, 4));
    let indices: Vec<usize> = (0..dim(&mut r, 1, 6)).map(|_| r.gen_range(0..rows)).collect();
    GradCheckCase {
        inputs: vec![uniform(&mut r, &[rows, d], -1.0, 1.0)],
        build: Box::new(move |_, v| project(v[0].gather_rows(&indices)?, seed)),
    }
}

fn case_l2_normalize(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, d) = (dim(&mut r, 1, 4), dim(&mut r, 2, 6));
    GradCheckCase {
        inputs: vec![away_from_zero(&mut r, &[m, d])],
        build: Box::new(move |_, v| project(v[0].l2_normalize()?, seed)),
    }
}

fn case_cosine_similarity(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, n, d) = (dim(&mut r, 1, 4), dim(&mut r, 1, 4), dim(&mut r, 2, 5));
    GradCheckCase {
        inputs: vec![away_from_zero(&mut r, &[m, d]), away_from_zero(&mut r, &[n, d])],
        build: Box::new(move |_, v| project(v[0].cosine_similarity(v[1])?, seed)),
    }
}

fn case_softmax_cross_entropy(seed: u64) -> GradCheckCase {
    let mut r = rng(seed);
    let (b, k) = (dim(&mut r, 1, 5), dim(&mut r, 2, 5));
    let labels: Vec<usize> = (0..b).map(|_| r.gen_range(0..k)).collect();
    let weights: Vec<f64> = (0..b).map(|_| r.gen_range(0.2..3.0)).collect();
    GradCheckCase {
        inputs: vec![uniform(&mut r, &[b, k], -3.0, 3.0)],
        build: Box::new(move |_, v| v[0].softmax_cross_entropy(&labels, &weights)),
    }
}

/// A random chain of `length` shape-preserving ops applied to a `[m, n]`
/// input, ending in a projection to a scalar.
pub fn random_chain(seed: u64, length: usize) -> GradCheckCase {
    let mut r = rng(seed);
    let (m, n) = (dim(&mut r, 1, 3), dim(&mut r, 2, 4));
    let choices: Vec<usize> = (0..length).map(|_| r.gen_range(0..9)).collect();
    let inputs = vec![
        away_from_zero(&mut r, &[m, n]),
        uniform(&mut r, &[n, n], -1.0, 1.0),
        uniform(&mut r, &[n], -0.5, 0.5),
        uniform(&mut r, &[m, n], -1.0, 1.0),
    ];
    GradCheckCase {
        inputs,
        build: Box::new(move |_, v| {
            let mut x = v[0];
            for &c in &choices {
                x = match c {
                    0 => x.matmul(v[1])?,
                    1 => x.dense(v[1], v[2])?,
                    2 => x.softmax()?,
                    3 => x.mul(v[3])?,
                    4 => x.add(v[3])?,
                    5 => x.scale(0.7)?.exp()?.scale(0.5)?,
                    6 => x.layer_norm(v[3].mean_rows()?.reshape(&[n])?, v[2], 1e-5)?,
                    7 => x.l2_normalize()?,
                    _ => x.exp()?.add(v[3].mul(v[3])?)?.log()?,
                };
            }
            project(x, seed)
        }),
    }
}
