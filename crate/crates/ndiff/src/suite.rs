//! Randomized gradient checks for every primitive on the tape.
//!
//! Each case draws fresh shapes and values, reduces the primitive's output
//! to a scalar through a fixed random projection, and runs [`grad_check`]
//! over the inputs (registered as parameters).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{grad_check, GradCheckReport, DEFAULT_STEP, DEFAULT_TOL};
use crate::init::uniform;
use crate::lstm::{lstm_cell, LstmVars};
use crate::{NdiffError, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub primitive: &'static str,
    pub instance: usize,
    pub report: GradCheckReport,
}

pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "add",
    "add_bias",
    "mul",
    "concat",
    "concat_rows",
    "slice_cols",
    "transpose",
    "sigmoid",
    "tanh",
    "sum",
    "sum_rows",
    "div_scalar",
    "add_scalar",
    "scale",
    "div",
    "embedding_lookup",
    "dropout",
    "bce",
    "lstm_cell",
];

/// Contract the output against a fixed random weight tensor so every output
/// coordinate contributes to the scalar.
fn project(tape: &mut Tape<'_>, y: Var, weights: &Tensor) -> Result<Var, NdiffError> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(y, w)?;
    Ok(tape.sum(prod))
}

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(1..=5)
}

fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    uniform(r, c, 1.5, rng)
}

fn check_embedding(rng: &mut ChaCha8Rng) -> Result<GradCheckReport, NdiffError> {
    let mut store = ParamStore::new();
    let (r, c) = (dim(rng), dim(rng));
    let table = store.add("table", rand_t(rng, r, c));
    let n = rng.random_range(1..=6);
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..r)).collect();
    let weights = rand_t(rng, n, c);
    grad_check(
        &store,
        |t| {
            let e = t.embedding_lookup(table, &ids)?;
            project(t, e, &weights)
        },
        DEFAULT_STEP,
        DEFAULT_TOL,
    )
}

fn check_bce(rng: &mut ChaCha8Rng) -> Result<GradCheckReport, NdiffError> {
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::scalar(rng.random_range(0.05..0.95)));
    let y = if rng.random::<bool>() { 1.0 } else { 0.0 };
    grad_check(
        &store,
        |t| {
            let pv = t.param(p);
            t.bce(pv, y)
        },
        DEFAULT_STEP,
        DEFAULT_TOL,
    )
}

fn check_lstm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport, NdiffError> {
    let mut store = ParamStore::new();
    let (d, h) = (dim(rng), dim(rng));
    let inputs = [
        store.add("x", rand_t(rng, 1, d)),
        store.add("h0", rand_t(rng, 1, h)),
        store.add("c0", rand_t(rng, 1, h)),
        store.add("wx", uniform(d, 4 * h, 0.8, rng)),
        store.add("wh", uniform(h, 4 * h, 0.8, rng)),
        store.add("b", uniform(1, 4 * h, 0.5, rng)),
    ];
    let wh_out = rand_t(rng, 1, h);
    let wc_out = rand_t(rng, 1, h);
    grad_check(
        &store,
        |t| {
            let v: Vec<Var> = inputs.iter().map(|p| t.param(*p)).collect();
            let w = LstmVars {
                wx: v[3],
                wh: v[4],
                b: v[5],
            };
            let (hn, cn) = lstm_cell(t, v[0], v[1], v[2], &w)?;
            let sh = project(t, hn, &wh_out)?;
            let sc = project(t, cn, &wc_out)?;
            t.add(sh, sc)
        },
        DEFAULT_STEP,
        DEFAULT_TOL,
    )
}

fn run_case(name: &'static str, rng: &mut ChaCha8Rng) -> Result<GradCheckReport, NdiffError> {
    match name {
        "embedding_lookup" => return check_embedding(rng),
        "bce" => return check_bce(rng),
        "lstm_cell" => return check_lstm(rng),
        _ => {}
    }

    let mut store = ParamStore::new();
    let (r, c) = (dim(rng), dim(rng));
    let a = store.add("a", rand_t(rng, r, c));
    let dropout_seed = rng.random::<u64>();
    let divisor: f64 = rng.random_range(0.5..2.0);
    let shift: f64 = rng.random_range(-1.0..1.0);
    let slice_start = rng.random_range(0..c);
    let slice_len = rng.random_range(1..=c - slice_start);

    let (b, out_shape): (Option<ParamId>, [usize; 2]) = match name {
        "matmul" => {
            let n = dim(rng);
            (Some(store.add("b", rand_t(rng, c, n))), [r, n])
        }
        "add" | "mul" => (Some(store.add("b", rand_t(rng, r, c))), [r, c]),
        "add_bias" => (Some(store.add("b", rand_t(rng, 1, c))), [r, c]),
        "concat" => {
            let n = dim(rng);
            (Some(store.add("b", rand_t(rng, r, n))), [r, c + n])
        }
        "concat_rows" => {
            let n = dim(rng);
            (Some(store.add("b", rand_t(rng, n, c))), [r + n, c])
        }
        "slice_cols" => (None, [r, slice_len]),
        "transpose" => (None, [c, r]),
        "sigmoid" | "tanh" | "div_scalar" | "add_scalar" | "dropout" => (None, [r, c]),
        "sum" => (None, [1, 1]),
        "sum_rows" => (None, [1, c]),
        "scale" => (
            Some(store.add("s", Tensor::scalar(rng.random_range(-2.0..2.0)))),
            [r, c],
        ),
        "div" => {
            let mag: f64 = rng.random_range(0.5..2.0);
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            (Some(store.add("s", Tensor::scalar(mag * sign))), [r, c])
        }
        other => {
            return Err(NdiffError::InvalidArgument(format!(
                "unknown primitive {other}"
            )))
        }
    };
    let weights = rand_t(rng, out_shape[0], out_shape[1]);

    let f = |t: &mut Tape<'_>| -> Result<Var, NdiffError> {
        let x = t.param(a);
        let y = b.map(|id| t.param(id));
        let other = || y.expect("binary primitive has a second operand");
        let out = match name {
            "matmul" => t.matmul(x, other())?,
            "add" => t.add(x, other())?,
            "mul" => t.mul(x, other())?,
            "add_bias" => t.add_bias(x, other())?,
            "concat" => t.concat(&[x, other()])?,
            "concat_rows" => t.concat_rows(&[x, other()])?,
            "slice_cols" => t.slice_cols(x, slice_start, slice_len)?,
            "transpose" => t.transpose(x),
            "sigmoid" => t.sigmoid(x),
            "tanh" => t.tanh(x),
            "sum" => t.sum(x),
            "sum_rows" => t.sum_rows(x),
            "div_scalar" => t.div_scalar(x, divisor),
            "add_scalar" => t.add_scalar(x, shift),
            "scale" => t.scale(x, other())?,
            "div" => t.div(x, other())?,
            "dropout" => {
                let mut drng = ChaCha8Rng::seed_from_u64(dropout_seed);
                t.dropout(x, 0.3, &mut drng, true)?
            }
            _ => unreachable!(),
        };
        project(t, out, &weights)
    };
    grad_check(&store, f, DEFAULT_STEP, DEFAULT_TOL)
}

/// Runs `instances` randomized checks for every primitive in [`PRIMITIVES`].
pub fn primitive_suite(instances: usize, seed: u64) -> Result<Vec<SuiteEntry>, NdiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(PRIMITIVES.len() * instances);
    for &name in PRIMITIVES {
        for instance in 0..instances {
            let report = run_case(name, &mut rng)?;
            out.push(SuiteEntry {
                primitive: name,
                instance,
                report,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_primitive_passes() {
        let entries = primitive_suite(10, 0x5eed).unwrap();
        assert_eq!(entries.len(), PRIMITIVES.len() * 10);
        for e in &entries {
            assert!(e.report.passed, "{} #{}: {}", e.primitive, e.instance, e.report);
        }
    }
}
