//! Central finite-difference verification of tape gradients.

use crate::{Grads, NdiffError, ParamId, ParamStore, Tape, Var};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub n_coords: usize,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} coords={} tol={:.0e}",
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_error,
            self.n_coords,
            self.tol
        )?;
        if let Some((name, idx)) = &self.worst {
            write!(f, " worst={name}[{idx}]")?;
        }
        Ok(())
    }
}

fn eval<F>(params: &ParamStore, f: &F) -> Result<f64, NdiffError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NdiffError>,
{
    let mut tape = Tape::new(params);
    let out = f(&mut tape)?;
    let t = tape.value(out);
    if t.shape() != [1, 1] {
        return Err(NdiffError::ShapeMismatch {
            op: "grad_check",
            left: t.shape(),
            right: [1, 1],
        });
    }
    let v = t.item();
    if !v.is_finite() {
        return Err(NdiffError::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

/// Value and reverse-mode gradient of a scalar tape computation.
pub fn analytic_gradients<F>(params: &ParamStore, f: &F) -> Result<(f64, Grads), NdiffError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NdiffError>,
{
    let mut tape = Tape::new(params);
    let out = f(&mut tape)?;
    let value = tape.value(out).item();
    if !value.is_finite() {
        return Err(NdiffError::NonFinite(format!("function value {value}")));
    }
    let mut grads = Grads::zeros_like(params);
    tape.backward(out, &mut grads)?;
    if !grads.is_finite() {
        return Err(NdiffError::NonFinite("analytic gradient".into()));
    }
    Ok((value, grads))
}

/// Central differences `(f(x + h) - f(x - h)) / 2h`, one coordinate at a time.
pub fn numeric_gradients<F>(params: &ParamStore, f: &F, h: f64) -> Result<Grads, NdiffError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NdiffError>,
{
    let mut work = params.clone();
    let mut grads = Grads::zeros_like(params);
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        for k in 0..params.get(id).len() {
            let orig = params.get(id).data()[k];
            work.get_mut(id).data_mut()[k] = orig + h;
            let plus = eval(&work, f)?;
            work.get_mut(id).data_mut()[k] = orig - h;
            let minus = eval(&work, f)?;
            work.get_mut(id).data_mut()[k] = orig;
            grads.get_mut(id).data_mut()[k] = (plus - minus) / (2.0 * h);
        }
    }
    Ok(grads)
}

/// Max relative error `|a - n| / max(|a|, |n|, 1e-8)` over all coordinates.
pub fn compare(params: &ParamStore, analytic: &Grads, numeric: &Grads, tol: f64) -> GradCheckReport {
    let mut max_rel_error = 0.0f64;
    let mut worst = None;
    let mut n_coords = 0;
    for (id, name, _) in params.iter() {
        let a = analytic.get(id).data();
        let n = numeric.get(id).data();
        for (k, (x, y)) in a.iter().zip(n).enumerate() {
            n_coords += 1;
            let rel = (x - y).abs() / x.abs().max(y.abs()).max(REL_FLOOR);
            if rel > max_rel_error || rel.is_nan() {
                max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = Some((name.to_string(), k));
            }
        }
    }
    GradCheckReport {
        max_rel_error,
        worst,
        n_coords,
        tol,
        passed: max_rel_error < tol,
    }
}

/// Checks every parameter coordinate of `params` for the scalar computation `f`.
pub fn grad_check<F>(params: &ParamStore, f: F, h: f64, tol: f64) -> Result<GradCheckReport, NdiffError>
where
    F: Fn(&mut Tape<'_>) -> Result<Var, NdiffError>,
{
    let (_, analytic) = analytic_gradients(params, &f)?;
    let numeric = numeric_gradients(params, &f, h)?;
    Ok(compare(params, &analytic, &numeric, tol))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn sum_of_squares(store: &mut ParamStore) -> ParamId {
        store.add("x", Tensor::row(vec![0.3, -1.2, 2.5, 0.0]))
    }

    #[test]
    fn sum_of_squares_passes_tightly() {
        let mut store = ParamStore::new();
        let x = sum_of_squares(&mut store);
        let report = grad_check(
            &store,
            |t| {
                let v = t.param(x);
                let sq = t.mul(v, v)?;
                Ok(t.sum(sq))
            },
            DEFAULT_STEP,
            DEFAULT_TOL,
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-8, "{report}");
        assert_eq!(report.n_coords, 4);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut store = ParamStore::new();
        let x = sum_of_squares(&mut store);
        let f = |t: &mut Tape<'_>| {
            let v = t.param(x);
            let sq = t.mul(v, v)?;
            Ok(t.sum(sq))
        };
        let (_, mut analytic) = analytic_gradients(&store, &f).unwrap();
        analytic.get_mut(x).data_mut()[1] *= 1.01;
        let numeric = numeric_gradients(&store, &f, DEFAULT_STEP).unwrap();
        let report = compare(&store, &analytic, &numeric, DEFAULT_TOL);
        assert!(!report.passed);
        assert_eq!(report.worst, Some(("x".to_string(), 1)));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::scalar(0.0));
        let res = grad_check(
            &store,
            |t| {
                let v = t.param(x);
                let z = t.zeros(1, 1);
                t.div(v, z)
            },
            DEFAULT_STEP,
            DEFAULT_TOL,
        );
        assert!(matches!(res, Err(NdiffError::NonFinite(_))));
    }
}
