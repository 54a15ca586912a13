//! Central-difference verification of recorded gradients.

use super::{Graph, ParamId, ParamStore, RngState, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Check at most this many coordinates, drawn uniformly without
    /// replacement; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Leave out coordinates whose `±step` evaluations take a different
    /// ReLU / max-pool branch than the unperturbed point; central
    /// differences there straddle a kink and are not a valid reference.
    pub skip_nonsmooth: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            max_coords: None,
            seed: 0,
            skip_nonsmooth: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates left out because a perturbation crossed a branch point.
    pub skipped_nonsmooth: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// `|a - b| / max(1e-8, |a| + |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<(f64, Vec<u64>)>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let mut g = Graph::eval(store);
    let out = f(&mut g)?;
    let value = g
        .value(out)
        .item()
        .ok_or_else(|| Error::NonScalarLoss(g.shape(out).to_vec()))?;
    Ok((value, g.branch_pattern()))
}

/// Compares backward gradients of the scalar built by `f` against central
/// differences over the parameters in `store`.
///
/// `f` must be deterministic; a repeated evaluation that differs is an error.
pub fn finite_diff_check<F>(store: &mut ParamStore, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a>) -> Result<Var>,
{
    let grads = {
        let mut g = Graph::with_grads(store);
        let loss = f(&mut g)?;
        g.backward(loss)?;
        g.into_param_grads()
    };
    let (first, pattern) = evaluate(store, &f)?;
    let (second, _) = evaluate(store, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    if !first.is_finite() {
        return Err(Error::Numeric(format!("non-finite objective {first}")));
    }

    let mut coords: Vec<(ParamId, usize)> = store
        .ids()
        .flat_map(|id| (0..store.get(id).numel()).map(move |i| (id, i)))
        .collect();
    if let Some(limit) = opts.max_coords {
        if limit < coords.len() {
            let mut rng = RngState::new(opts.seed);
            rng.shuffle(&mut coords);
            coords.truncate(limit);
            coords.sort();
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        skipped_nonsmooth: 0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    for (id, i) in coords {
        let analytic = grads.get(id).map_or(0.0, |g| g[i]);
        let orig = store.get(id).data()[i];
        store.get_mut(id).data_mut()[i] = orig + opts.step;
        let plus = evaluate(store, &f);
        store.get_mut(id).data_mut()[i] = orig - opts.step;
        let minus = evaluate(store, &f);
        store.get_mut(id).data_mut()[i] = orig;
        let ((plus, p_plus), (minus, p_minus)) = (plus?, minus?);
        if opts.skip_nonsmooth && (p_plus != pattern || p_minus != pattern) {
            report.skipped_nonsmooth += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = err;
            report.worst = Some((store.name(id).to_string(), i));
            report.analytic_at_worst = analytic;
            report.numeric_at_worst = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_form_is_exact() {
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::new(vec![3, 1], vec![0.4, -1.2, 2.0]).unwrap()).unwrap();
        let a = Tensor::from_rows(&[
            vec![2.0, 0.5, 0.0],
            vec![0.5, 1.0, -0.3],
            vec![0.0, -0.3, 3.0],
        ])
        .unwrap();
        let report = finite_diff_check(&mut store, &GradCheckOptions::default(), |g| {
            let xv = g.param(x);
            let am = g.constant(a.clone());
            let ax = g.matmul(am, xv)?;
            let prod = g.mul(xv, ax)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn detects_nondeterminism() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        let x = store.insert("x", Tensor::vector(vec![1.0])).unwrap();
        let counter = Cell::new(0.0);
        let err = finite_diff_check(&mut store, &GradCheckOptions::default(), |g| {
            counter.set(counter.get() + 1.0);
            let xv = g.param(x);
            let y = g.affine(xv, 1.0, counter.get());
            Ok(g.sum(y))
        })
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn kink_inside_the_step_is_skipped() {
        // relu(x) at x = 3e-6: the ±1e-5 stencil straddles zero, so the
        // central difference is 0.65 while the derivative is 1.
        let mut store = ParamStore::new();
        let id = store.insert("x", Tensor::new(vec![1], vec![3e-6]).unwrap()).unwrap();
        let f = |g: &mut Graph<'_>| {
            let x = g.param(id);
            let r = g.relu(x);
            Ok(g.sum(r))
        };
        let strict = GradCheckOptions {
            skip_nonsmooth: false,
            ..Default::default()
        };
        let r = finite_diff_check(&mut store, &strict, f).unwrap();
        assert!(r.max_rel_error > 0.1);
        let r = finite_diff_check(&mut store, &GradCheckOptions::default(), f).unwrap();
        assert_eq!((r.checked, r.skipped_nonsmooth), (0, 1));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((relative_error(1.0, 3.0) - 0.5).abs() < 1e-15);
    }
}
