//! Central finite-difference gradient checks shared by the gradient tests
//! and the acceptance run.

use hybrid_tta::diffmath::{Tape, Tensor, Var};
use hybrid_tta::model::{Model, ModelConfig, ParamStore, PatchMask};
use hybrid_tta::source_trainer::multitask_loss;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
/// Gradients smaller than this are compared on an absolute scale.
pub const FLOOR: f64 = 1e-6;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds a scalar from the given inputs on a fresh tape.
type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

fn check(inputs: Vec<Tensor>, build: &Build) -> f64 {
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| tape.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = build(&mut tape, &vars);
    tape.backward(out).unwrap();

    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .map(<[f64]>::to_vec)
            .unwrap_or(vec![0.0; input.numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += STEP;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * STEP);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

/// Weights the output by a fixed random tensor so every element matters.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = random(tape.shape(y), &mut rng);
    let w = tape.constant(w);
    let p = tape.mul(y, w).unwrap();
    tape.sum(p).unwrap()
}

/// Worst relative error per primitive.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut out = Vec::new();
    out.push((
        "matmul",
        check(
            vec![random(&[3, 4], &mut rng), random(&[4, 2], &mut rng)],
            &|t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                project(t, y, 1)
            },
        ),
    ));
    out.push((
        "add_broadcast",
        check(
            vec![random(&[3, 4], &mut rng), random(&[4], &mut rng)],
            &|t, v| {
                let y = t.add(v[0], v[1]).unwrap();
                let y = t.mul(y, y).unwrap();
                project(t, y, 2)
            },
        ),
    ));
    out.push((
        "mul_broadcast_lhs",
        check(
            vec![random(&[4], &mut rng), random(&[2, 4], &mut rng)],
            &|t, v| {
                let y = t.mul(v[0], v[1]).unwrap();
                project(t, y, 3)
            },
        ),
    ));
    out.push((
        "scalar_mul",
        check(vec![random(&[5], &mut rng)], &|t, v| {
            let y = t.scalar_mul(v[0], -1.7).unwrap();
            project(t, y, 4)
        }),
    ));
    out.push((
        "reshape_transpose",
        check(vec![random(&[2, 6], &mut rng)], &|t, v| {
            let y = t.reshape(v[0], &[3, 4]).unwrap();
            let y = t.transpose(y).unwrap();
            project(t, y, 5)
        }),
    ));
    out.push((
        "gelu",
        check(vec![random(&[8], &mut rng)], &|t, v| {
            let y = t.gelu(v[0]).unwrap();
            project(t, y, 6)
        }),
    ));
    out.push((
        "relu",
        check(vec![random(&[8], &mut rng)], &|t, v| {
            let y = t.relu(v[0]).unwrap();
            project(t, y, 7)
        }),
    ));
    out.push((
        "layer_norm",
        check(
            vec![
                random(&[3, 5], &mut rng),
                random(&[5], &mut rng),
                random(&[5], &mut rng),
            ],
            &|t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-10).unwrap();
                project(t, y, 8)
            },
        ),
    ));
    out.push((
        "softmax_lastdim",
        check(vec![random(&[3, 4], &mut rng)], &|t, v| {
            let y = t.softmax_lastdim(v[0]).unwrap();
            project(t, y, 9)
        }),
    ));
    out.push((
        "mean",
        check(vec![random(&[2, 3], &mut rng)], &|t, v| {
            let y = t.mul(v[0], v[0]).unwrap();
            t.mean(y).unwrap()
        }),
    ));
    out.push((
        "gather_rows",
        check(vec![random(&[3, 2], &mut rng)], &|t, v| {
            let y = t.gather_rows(v[0], &[2, 0, 2]).unwrap();
            project(t, y, 10)
        }),
    ));
    out.push((
        "gather",
        check(vec![random(&[6], &mut rng)], &|t, v| {
            let y = t.gather(v[0], &[5, 1, 1, 0], &[2, 2]).unwrap();
            project(t, y, 11)
        }),
    ));
    out.push((
        "cross_entropy",
        check(vec![random(&[4, 3], &mut rng)], &|t, v| {
            t.cross_entropy(v[0], &[0, 2, 9, 1], 9).unwrap()
        }),
    ));
    out.push((
        "l1_masked",
        check(
            vec![random(&[2, 3], &mut rng), random(&[2, 3], &mut rng)],
            &|t, v| {
                let mask = Tensor::new(&[2, 3], vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0]).unwrap();
                t.l1_masked(v[0], v[1], &mask).unwrap()
            },
        ),
    ));
    out
}

pub fn tiny_image(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let n = cfg.channels * cfg.image_size * cfg.image_size;
    Tensor::new(&cfg.image_shape(), (0..n).map(|_| rng.random()).collect()).unwrap()
}

/// Perturbs non-trivial defaults so every group has a non-zero gradient.
pub fn perturbed_params(model: &Model, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut p = model.init_params(7);
    for (_, param) in p.iter_mut() {
        for v in param.tensor.data_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
    }
    p
}

/// Worst relative error over every parameter of the tiny model's total loss,
/// with the location and the number of entries checked.
pub fn composed_error() -> (f64, String, usize) {
    let cfg = ModelConfig::tiny();
    let model = Model::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let params = perturbed_params(&model, &mut rng);
    let image = tiny_image(&cfg, &mut rng);
    let labels = vec![0, 2, 1, 2];
    let mask = PatchMask::from_bools(vec![true, false, false, true]);

    let loss_of = |p: &ParamStore| -> f64 {
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let l = multitask_loss(&model, &mut tape, &bound, &image, &labels, &mask).unwrap();
        tape.value(l.total).item().unwrap()
    };

    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let l = multitask_loss(&model, &mut tape, &bound, &image, &labels, &mask).unwrap();
    tape.backward(l.total).unwrap();
    let mut with_grads = params.clone();
    with_grads.collect_grads(&tape, &bound).unwrap();

    let mut worst: (f64, String) = (0.0, String::new());
    let mut checked = 0;
    for (name, param) in with_grads.iter() {
        let analytic = param
            .tensor
            .grad()
            .expect("every parameter gets a gradient");
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().data_mut()[j] += STEP;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().data_mut()[j] -= STEP;
            let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * STEP);
            let e = rel_err(a, numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{j}] analytic {a} numeric {numeric}"));
            }
            checked += 1;
        }
    }
    (worst.0, worst.1, checked)
}
