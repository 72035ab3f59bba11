use serde::Serialize;

use super::{Element, Fault, Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step, relative to `max(1, |θ|)`.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tol: f64,
    /// Denominator floor, as a fraction of the largest analytic gradient
    /// magnitude. Keeps entries whose true gradient is ~0 from dividing
    /// finite-difference noise by ~0.
    pub floor_fraction: f64,
    /// Times an entry that misses `tol` is retried with a step ten times
    /// smaller. A step can straddle a ReLU or max-pool kink lying within
    /// `h` of the point; a wrong backward rule stays wrong at every step.
    pub refinements: usize,
    /// Corrupts the analytic pass; used to show that broken rules fail.
    pub fault: Option<Fault>,
}

impl GradCheckOptions {
    /// Defaults for the working precision of `T`: `h = 1e-6` in f64, `h = 1e-2` in f32.
    /// The f32 floor is wider because forward rounding alone moves the
    /// central difference by about 1e-5 of the gradient scale.
    pub fn for_precision<T: Element>(tol: f64) -> Self {
        let (step, floor_fraction, refinements) = if T::NAME == "f64" { (1e-6, 1e-3, 2) } else { (1e-2, 1e-2, 0) };
        GradCheckOptions {
            step,
            tol,
            floor_fraction,
            refinements,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (parameter index, element index) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    /// Entries that passed only at a refined step.
    pub refined_entries: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the reverse-mode gradient of a scalar function of `params`
/// against central finite differences, entry by entry.
///
/// `build` must register the supplied parameters (already added to the
/// graph as trainable leaves) and return the scalar output; it is called
/// once for the analytic pass and twice per parameter entry, so any
/// randomness inside it must be re-seeded per call.
pub fn grad_check<T, F>(params: &[Tensor<T>], build: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    T: Element,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.scalar_value(out)
    };

    let mut g = match opts.fault {
        Some(f) => Graph::with_fault(f),
        None => Graph::new(),
    };
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = build(&mut g, &vars)?;
    if g.value(out).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued graph".into()));
    }
    let mut grads = g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take_or_zeros(v, p.shape()))
        .collect();

    let scale = analytic
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.as_f64().abs()))
        .fold(0.0, f64::max);
    let floor = (opts.floor_fraction * scale).max(f64::MIN_POSITIVE);

    let mut work: Vec<Tensor<T>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
        refined_entries: 0,
        tol: opts.tol,
        passed: true,
    };
    for pi in 0..params.len() {
        for ei in 0..params[pi].numel() {
            let orig = params[pi].data()[ei];
            let a = analytic[pi].data()[ei].as_f64();
            let mut h = opts.step * orig.as_f64().abs().max(1.0);
            let (mut rel, mut numeric) = (f64::INFINITY, 0.0);
            for attempt in 0..=opts.refinements {
                let plus = T::from_f64(orig.as_f64() + h);
                let minus = T::from_f64(orig.as_f64() - h);
                work[pi].data_mut()[ei] = plus;
                let f_plus = eval(&work)?;
                work[pi].data_mut()[ei] = minus;
                let f_minus = eval(&work)?;
                work[pi].data_mut()[ei] = orig;
                // Use the step actually representable in T.
                let span = plus.as_f64() - minus.as_f64();
                let n = (f_plus - f_minus) / span;
                let r = (a - n).abs() / a.abs().max(n.abs()).max(floor);
                if r < rel || !rel.is_finite() {
                    (rel, numeric) = (r, n);
                }
                if rel <= opts.tol {
                    if attempt > 0 {
                        report.refined_entries += 1;
                    }
                    break;
                }
                h /= 10.0;
            }
            report.entries_checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = (pi, ei);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= opts.tol;
    Ok(report)
}
