//! Central finite-difference checks for every differentiable primitive.
//!
//! Each primitive is probed on at least ten random shapes. The scalar loss
//! is `sum(op(inputs) * R)` for a fixed random `R`, so every output element
//! contributes with its own weight. Each group returns its worst relative
//! error.
#![allow(dead_code)]

use hier_tensor::{Result, Tape, Tensor, Var, LAYER_NORM_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
/// Pass threshold on the worst relative error.
pub const TOL: f64 = 1e-6;
const SHAPES_PER_OP: usize = 10;
const PROBES_PER_INPUT: usize = 5;

#[derive(Clone, Copy)]
enum Domain {
    Any,
    Positive,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], domain: Domain) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| match domain {
            Domain::Any => rng.random_range(-1.5..1.5),
            Domain::Positive => rng.random_range(0.5..2.0),
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Relative error with a small floor so that exactly-zero gradients compare
/// on an absolute scale. Central differences at h = 1e-5 carry ~1e-11 of
/// roundoff, which a pure ratio would blow up for near-zero gradients.
fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn weighted_loss<F>(inputs: &[Tensor], weights: &Tensor, build: &F, track: bool) -> Result<(f64, Vec<Option<Vec<f64>>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), track)).collect();
    let out = build(&mut tape, &vars)?;
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    let loss = tape.sum(prod);
    let value = tape.value(loss)[0];
    if !track {
        return Ok((value, vec![]));
    }
    let grads = tape.backward(loss)?;
    Ok((value, vars.iter().map(|&v| grads.wrt(v).map(<[f64]>::to_vec)).collect()))
}

fn check_op<S, F>(_name: &str, seed: u64, shapes: S, domain: Domain, build: F) -> f64
where
    S: Fn(&mut ChaCha8Rng) -> Vec<Vec<usize>>,
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..SHAPES_PER_OP {
        let input_shapes = shapes(&mut rng);
        let inputs: Vec<Tensor> = input_shapes.iter().map(|s| random_tensor(&mut rng, s, domain)).collect();
        let out_shape = {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone(), false)).collect();
            let out = build(&mut tape, &vars).unwrap();
            tape.shape(out).to_vec()
        };
        let weights = random_tensor(&mut rng, &out_shape, Domain::Any);
        let (_, analytic) = weighted_loss(&inputs, &weights, &build, true).unwrap();
        for (which, input) in inputs.iter().enumerate() {
            let Some(grad) = &analytic[which] else {
                continue;
            };
            for _ in 0..PROBES_PER_INPUT {
                let k = rng.random_range(0..input.numel());
                let mut plus = inputs.clone();
                plus[which].data_mut()[k] += H;
                let mut minus = inputs.clone();
                minus[which].data_mut()[k] -= H;
                let fp = weighted_loss(&plus, &weights, &build, false).unwrap().0;
                let fm = weighted_loss(&minus, &weights, &build, false).unwrap().0;
                let numeric = (fp - fm) / (2.0 * H);
                let err = rel_err(grad[k], numeric);
                worst = worst.max(err);
            }
        }
    }
    worst
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..6)
}

pub fn matmul_and_transpose() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(check_op("matmul", 1, |r| {
        let (m, k, n) = (dim(r), dim(r), dim(r));
        vec![vec![m, k], vec![k, n]]
    }, Domain::Any, |t, v| t.matmul(v[0], v[1])));
    worst = worst.max(check_op("transpose", 2, |r| vec![vec![dim(r), dim(r)]], Domain::Any, |t, v| t.transpose(v[0])));
    worst
}

pub fn elementwise_binary() -> f64 {
    let mut worst = 0.0f64;
    let same = |r: &mut ChaCha8Rng| {
        let s = vec![dim(r), dim(r)];
        vec![s.clone(), s]
    };
    worst = worst.max(check_op("add", 3, same, Domain::Any, |t, v| t.add(v[0], v[1])));
    worst = worst.max(check_op("sub", 4, same, Domain::Any, |t, v| t.sub(v[0], v[1])));
    worst = worst.max(check_op("mul", 5, same, Domain::Any, |t, v| t.mul(v[0], v[1])));
    worst = worst.max(check_op("add_row", 6, |r| {
        let (m, n) = (dim(r), dim(r));
        vec![vec![m, n], vec![n]]
    }, Domain::Any, |t, v| t.add(v[0], v[1])));
    worst
}

pub fn elementwise_unary() -> f64 {
    let mut worst = 0.0f64;
    let any = |r: &mut ChaCha8Rng| vec![vec![dim(r), dim(r)]];
    worst = worst.max(check_op("scale", 7, any, Domain::Any, |t, v| Ok(t.scale(v[0], -1.7))));
    worst = worst.max(check_op("add_scalar", 8, any, Domain::Any, |t, v| Ok(t.add_scalar(v[0], 0.3))));
    worst = worst.max(check_op("gelu", 9, any, Domain::Any, |t, v| Ok(t.gelu(v[0]))));
    worst = worst.max(check_op("tanh", 10, any, Domain::Any, |t, v| Ok(t.tanh(v[0]))));
    worst = worst.max(check_op("sigmoid", 11, any, Domain::Any, |t, v| Ok(t.sigmoid(v[0]))));
    worst = worst.max(check_op("exp", 12, any, Domain::Any, |t, v| Ok(t.exp(v[0]))));
    worst = worst.max(check_op("log", 13, any, Domain::Positive, |t, v| Ok(t.log(v[0]))));
    worst = worst.max(check_op("recip", 14, any, Domain::Positive, |t, v| Ok(t.recip(v[0]))));
    worst
}

pub fn embedding_lookup() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(check_op("embedding", 15, |r| vec![vec![dim(r) + 2, dim(r)]], Domain::Any, |t, v| {
        let rows = t.shape(v[0])[0];
        // repeated ids exercise gradient accumulation
        let ids = [0, rows - 1, 0, rows / 2];
        t.embedding(v[0], &ids)
    }));
    worst
}

pub fn softmax_variants() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(check_op("softmax_axis1", 16, |r| vec![vec![dim(r), dim(r) + 1]], Domain::Any, |t, v| t.softmax(v[0], 1)));
    worst = worst.max(check_op("softmax_axis0", 17, |r| vec![vec![dim(r) + 1, dim(r)]], Domain::Any, |t, v| t.softmax(v[0], 0)));
    worst = worst.max(check_op("softmax_3d", 18, |r| vec![vec![dim(r), dim(r) + 1, dim(r)]], Domain::Any, |t, v| t.softmax(v[0], 1)));
    worst = worst.max(check_op("masked_softmax", 19, |r| vec![vec![dim(r), dim(r) + 2]], Domain::Any, |t, v| {
        let cols = t.shape(v[0])[1];
        let keep: Vec<bool> = (0..cols).map(|j| j % 3 != 1).collect();
        t.masked_softmax_rows(v[0], &keep)
    }));
    worst
}

pub fn layer_norm_all_inputs() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(check_op("layer_norm", 20, |r| {
        let (m, n) = (dim(r), dim(r) + 1);
        vec![vec![m, n], vec![n], vec![n]]
    }, Domain::Any, |t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)));
    worst
}

pub fn dropout_in_training_mode() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(check_op("dropout", 21, |r| vec![vec![dim(r), dim(r) + 3]], Domain::Any, |t, v| {
        t.set_dropout_seed(99);
        t.dropout(v[0], 0.3, true)
    }));
    worst
}

pub fn structural_ops() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(check_op("concat_axis1", 22, |r| {
        let m = dim(r);
        vec![vec![m, dim(r)], vec![m, dim(r)], vec![m, dim(r)]]
    }, Domain::Any, |t, v| t.concat(v, 1)));
    worst = worst.max(check_op("concat_axis0", 23, |r| {
        let n = dim(r);
        vec![vec![dim(r), n], vec![dim(r), n]]
    }, Domain::Any, |t, v| t.concat(v, 0)));
    worst = worst.max(check_op("slice_rows", 24, |r| vec![vec![dim(r) + 2, dim(r)]], Domain::Any, |t, v| t.slice_rows(v[0], 1, 2)));
    worst = worst.max(check_op("slice_cols", 25, |r| vec![vec![dim(r), dim(r) + 2]], Domain::Any, |t, v| t.slice_cols(v[0], 1, 2)));
    worst
}

pub fn reductions() -> f64 {
    let mut worst = 0.0f64;
    worst = worst.max(check_op("mean_over_mask", 26, |r| vec![vec![dim(r) + 2, dim(r)]], Domain::Any, |t, v| {
        let rows = t.shape(v[0])[0];
        let mask: Vec<bool> = (0..rows).map(|i| i + 1 < rows).collect();
        t.mean_over_mask(v[0], &mask)
    }));
    worst = worst.max(check_op("sum_rows", 27, |r| vec![vec![dim(r), dim(r)]], Domain::Any, |t, v| t.sum_rows(v[0])));
    worst = worst.max(check_op("sum", 28, |r| vec![vec![dim(r), dim(r)]], Domain::Any, |t, v| Ok(t.sum(v[0]))));
    worst = worst.max(check_op("mean", 29, |r| vec![vec![dim(r), dim(r)]], Domain::Any, |t, v| Ok(t.mean(v[0]))));
    worst = worst.max(check_op("cross_entropy", 30, |r| vec![vec![dim(r), 2]], Domain::Any, |t, v| {
        let rows = t.shape(v[0])[0];
        let targets: Vec<usize> = (0..rows).map(|i| i % 2).collect();
        t.cross_entropy(v[0], &targets)
    }));
    worst
}

pub fn composed_network() -> f64 {
    let mut worst = 0.0f64;
    // two-layer perceptron with layer norm, checked end to end
    worst = worst.max(check_op("mlp", 31, |r| {
        let (b, d, h) = (dim(r), dim(r) + 1, dim(r) + 1);
        vec![vec![b, d], vec![d, h], vec![h], vec![h], vec![h], vec![h, 2]]
    }, Domain::Any, |t, v| {
        let z = t.matmul(v[0], v[1])?;
        let z = t.add(z, v[2])?;
        let z = t.layer_norm(z, v[3], v[4], LAYER_NORM_EPS)?;
        let z = t.gelu(z);
        let logits = t.matmul(z, v[5])?;
        let targets: Vec<usize> = (0..t.shape(logits)[0]).map(|i| i % 2).collect();
        t.cross_entropy(logits, &targets)
    }));
    worst
}

/// Every primitive group, for callers that report per group.
pub const ALL: &[(&str, fn() -> f64)] = &[
    ("matmul_and_transpose", matmul_and_transpose),
    ("elementwise_binary", elementwise_binary),
    ("elementwise_unary", elementwise_unary),
    ("embedding_lookup", embedding_lookup),
    ("softmax_variants", softmax_variants),
    ("layer_norm_all_inputs", layer_norm_all_inputs),
    ("dropout_in_training_mode", dropout_in_training_mode),
    ("structural_ops", structural_ops),
    ("reductions", reductions),
    ("composed_network", composed_network),
];
