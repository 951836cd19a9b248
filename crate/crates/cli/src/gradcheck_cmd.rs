//! The `gradcheck` subcommand: finite-difference verification of the
//! operation set and of the end-to-end model at the smallest
//! configuration, printing one line per check.

use hyperssm_core::gradcheck::{grad_check, random_point};
use hyperssm_core::model::{Batch, Model, ModelConfig, SsmSettings};
use hyperssm_core::tape::{ReduceMode, Tape, UnaryFn, Var};
use hyperssm_core::tensor::Tensor;
use hyperssm_core::Result as CoreResult;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn to_scalar(tape: &mut Tape<f64>, y: Var) -> CoreResult<Var> {
    let sq = tape.square(y)?;
    let n = tape.value(sq).numel();
    let flat = tape.reshape(sq, vec![n])?;
    tape.reduce(flat, 0, ReduceMode::Sum)
}

struct Check {
    name: &'static str,
    max_err: f64,
}

fn op_checks() -> CliResult<Vec<Check>> {
    let mut checks = Vec::new();
    let mut run = |name: &'static str,
                   point: Tensor<f64>,
                   f: Box<dyn FnMut(&mut Tape<f64>, Var) -> CoreResult<Var>>|
     -> CliResult<()> {
        let mut f = f;
        let err = grad_check(|tape, x| f(tape, x), &point, EPS).map_err(CliError::Math)?;
        checks.push(Check { name, max_err: err });
        Ok(())
    };

    let unaries: &[(&'static str, UnaryFn, fn(f64) -> f64)] = &[
        ("silu", UnaryFn::Silu, |x| x),
        ("sigmoid", UnaryFn::Sigmoid, |x| x),
        ("softplus", UnaryFn::Softplus, |x| x),
        ("tanh", UnaryFn::Tanh, |x| x),
        ("exp", UnaryFn::Exp, |x| x),
        ("log", UnaryFn::Log, |x| x + 0.7),
        ("neg", UnaryFn::Neg, |x| x),
        ("square", UnaryFn::Square, |x| x),
    ];
    for &(name, f, tr) in unaries {
        let point = random_point::<f64>(vec![6], 17).map("shift", tr).unwrap();
        run(name, point, Box::new(move |tape, x| {
            let y = tape.unary(x, f)?;
            to_scalar(tape, y)
        }))?;
    }

    run(
        "matmul",
        random_point::<f64>(vec![3, 4], 18),
        Box::new(|tape, x| {
            let b = tape.constant(random_point::<f64>(vec![4, 2], 19));
            let y = tape.matmul(x, b)?;
            to_scalar(tape, y)
        }),
    )?;
    run(
        "reduce_mean",
        random_point::<f64>(vec![3, 4], 20),
        Box::new(|tape, x| {
            let y = tape.reduce(x, 1, ReduceMode::Mean)?;
            to_scalar(tape, y)
        }),
    )?;
    run(
        "softmax",
        random_point::<f64>(vec![2, 5], 21).map("scale", |x| x * 4.0).unwrap(),
        Box::new(|tape, x| {
            let y = tape.softmax(x, 1)?;
            to_scalar(tape, y)
        }),
    )?;
    run(
        "causal_conv",
        random_point::<f64>(vec![2, 5, 3], 22),
        Box::new(|tape, x| {
            let k = tape.constant(random_point::<f64>(vec![3, 3], 23));
            let y = tape.causal_conv(x, k)?;
            to_scalar(tape, y)
        }),
    )?;
    run(
        "zoh_discretize",
        random_point::<f64>(vec![2, 3], 24).map("neg", |x| x - 1.0).unwrap(),
        Box::new(|tape, x| {
            let delta = tape.constant(
                random_point::<f64>(vec![2, 4, 2], 25).map("pos", |v| v + 1.1).unwrap(),
            );
            let b = tape.constant(random_point::<f64>(vec![2, 4, 3], 26));
            let abar = tape.zoh_a_bar(x, delta)?;
            let bbar = tape.zoh_b_bar(x, b, delta)?;
            let s1 = to_scalar(tape, abar)?;
            let s2 = to_scalar(tape, bbar)?;
            tape.add(s1, s2)
        }),
    )?;
    run(
        "selective_scan",
        random_point::<f64>(vec![2, 5, 2, 3], 27).map("unit", |x| 0.9 * x + 0.5).unwrap(),
        Box::new(|tape, x| {
            let bb = tape.constant(random_point::<f64>(vec![2, 5, 2, 3], 28));
            let c = tape.constant(random_point::<f64>(vec![2, 5, 3], 29));
            let xx = tape.constant(random_point::<f64>(vec![2, 5, 2], 30));
            let y = tape.selective_scan(x, bb, c, xx)?;
            to_scalar(tape, y)
        }),
    )?;
    run(
        "cross_entropy",
        random_point::<f64>(vec![3, 4], 31).map("scale", |x| x * 3.0).unwrap(),
        Box::new(|tape, x| tape.cross_entropy(x, &[0, 2, 3])),
    )?;
    run(
        "ball_project",
        random_point::<f64>(vec![4, 3], 32).map("scale", |x| x * 2.0).unwrap(),
        Box::new(|tape, x| {
            let r = tape.constant(Tensor::scalar(0.8).unwrap());
            let y = tape.ball_project(x, r)?;
            to_scalar(tape, y)
        }),
    )?;

    Ok(checks)
}

fn model_check() -> CliResult<Check> {
    let mut cfg = ModelConfig::new(5, 4, 3, 3);
    cfg.d_hidden = 8;
    cfg.n_blocks = 1;
    cfg.dropout = 0.0;
    cfg.ssm = SsmSettings {
        state: 4,
        conv_width: 2,
        expansion: 2,
    };
    let model = Model::<f64>::init(cfg.clone(), 80).map_err(CliError::Math)?;
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let batch = Batch {
        audio: Tensor::uniform(vec![2, 4, cfg.d_audio_in], -0.5, 0.5, &mut rng),
        visual: Tensor::uniform(vec![2, 4, cfg.d_visual_in], -0.5, 0.5, &mut rng),
        question: Tensor::uniform(vec![2, cfg.d_question_in], -0.5, 0.5, &mut rng),
        labels: vec![1, 2],
        query_types: vec![0, 1],
    };

    let mut worst = 0.0f64;
    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let point = model.params.get(&name).map_err(CliError::Math)?.clone();
        let m = &model;
        let b = &batch;
        let n2 = name.clone();
        let err = grad_check(
            move |tape, x| {
                let bound = m.params.bind_with_substitute(tape, &n2, x)?;
                let mut rng = ChaCha8Rng::seed_from_u64(0);
                let vars = m.forward_on(tape, &bound, b, false, &mut rng)?;
                Ok(vars.total)
            },
            &point,
            EPS,
        )
        .map_err(CliError::Math)?;
        worst = worst.max(err);
    }
    Ok(Check {
        name: "end_to_end_model",
        max_err: worst,
    })
}

/// Runs the requested level (`ops`, `model`, or `all`) and prints one
/// line per check. Any failure is a numerical error (exit code 2).
pub fn run(level: &str) -> CliResult<()> {
    let mut checks = Vec::new();
    match level {
        "ops" => checks.extend(op_checks()?),
        "model" => checks.push(model_check()?),
        "all" => {
            checks.extend(op_checks()?);
            checks.push(model_check()?);
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown gradcheck level {other:?} (expected ops, model, or all)"
            )))
        }
    }

    let mut failures = 0;
    for c in &checks {
        let verdict = if c.max_err < TOL { "pass" } else { "FAIL" };
        if c.max_err >= TOL {
            failures += 1;
        }
        println!("{verdict}  {:<22} max_rel_err {:.3e}", c.name, c.max_err);
    }
    println!(
        "gradcheck: {} of {} checks passed (tolerance {TOL:.0e}, eps {EPS:.0e})",
        checks.len() - failures,
        checks.len()
    );
    if failures > 0 {
        return Err(CliError::Math(hyperssm_core::Error::Domain {
            op: "gradcheck",
            detail: format!("{failures} checks exceeded tolerance {TOL:.0e}"),
        }));
    }
    Ok(())
}
