use super::{ParamStore, Result, Tape, Tensor, TensorError, Var};

/// Relative errors are measured against `max(|analytic|, |numeric|, REL_FLOOR)`.
const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct LeafCheck {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub non_finite: bool,
}

impl LeafCheck {
    pub fn passed(&self, tol: f64) -> bool {
        !self.non_finite && self.max_rel_error <= tol
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub leaves: Vec<LeafCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.passed(self.tol))
    }

    pub fn failures(&self) -> Vec<&LeafCheck> {
        self.leaves.iter().filter(|l| !l.passed(self.tol)).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

struct Tracker {
    check: LeafCheck,
}

impl Tracker {
    fn new(name: String) -> Self {
        Self {
            check: LeafCheck {
                name,
                max_rel_error: 0.0,
                worst_entry: 0,
                analytic: 0.0,
                numeric: 0.0,
                non_finite: false,
            },
        }
    }

    fn record(&mut self, entry: usize, analytic: f64, numeric: f64) {
        if !analytic.is_finite() || !numeric.is_finite() {
            self.check.non_finite = true;
            self.check.worst_entry = entry;
            self.check.analytic = analytic;
            self.check.numeric = numeric;
            self.check.max_rel_error = f64::INFINITY;
            return;
        }
        let e = rel_error(analytic, numeric);
        if e > self.check.max_rel_error && !self.check.non_finite {
            self.check.max_rel_error = e;
            self.check.worst_entry = entry;
            self.check.analytic = analytic;
            self.check.numeric = numeric;
        }
    }
}

/// Compares analytic gradients of the scalar built by `f` against central
/// finite differences, one leaf at a time.
pub fn grad_check<F>(f: F, leaves: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'static>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.leaf(v.clone())).collect();
        let root = f(&mut tape, &vars)?;
        Ok(tape.scalar(root))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|v| tape.leaf(v.clone())).collect();
    let root = f(&mut tape, &vars)?;
    let grads = tape.backward(root)?;

    let mut report = GradCheckReport { tol, leaves: Vec::new() };
    let mut probe = leaves.to_vec();
    for (li, var) in vars.iter().enumerate() {
        let mut tracker = Tracker::new(format!("leaf{li}"));
        let zeros = vec![0.0; leaves[li].len()];
        let analytic = grads.wrt(*var).unwrap_or(&zeros);
        for e in 0..leaves[li].len() {
            let orig = leaves[li].data()[e];
            probe[li].data_mut()[e] = orig + step;
            let up = eval(&probe)?;
            probe[li].data_mut()[e] = orig - step;
            let down = eval(&probe)?;
            probe[li].data_mut()[e] = orig;
            tracker.record(e, analytic[e], (up - down) / (2.0 * step));
        }
        report.leaves.push(tracker.check);
    }
    Ok(report)
}

/// Finite-difference check of every parameter in `store` against the scalar
/// built by `f`. At most `max_entries` evenly spaced entries of each
/// parameter are probed.
pub fn grad_check_params<F>(
    store: &ParamStore,
    f: F,
    step: f64,
    tol: f64,
    max_entries: usize,
) -> Result<GradCheckReport>
where
    F: for<'p> Fn(&mut Tape<'p>) -> Result<Var>,
{
    if max_entries == 0 {
        return Err(TensorError::Invalid("max_entries must be positive".into()));
    }
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(s);
        let root = f(&mut tape)?;
        Ok(tape.scalar(root))
    };

    let analytic = {
        let mut tape = Tape::with_params(store);
        let root = f(&mut tape)?;
        let grads = tape.backward(root)?;
        tape.param_gradients(&grads)
    };

    let mut probe = store.clone();
    let mut report = GradCheckReport { tol, leaves: Vec::new() };
    for (id, name, value) in store.iter() {
        let mut tracker = Tracker::new(name.to_string());
        let n = value.len();
        let zeros = vec![0.0; n];
        let g = analytic.get(id).unwrap_or(&zeros);
        let count = n.min(max_entries);
        for j in 0..count {
            let e = j * n / count;
            let orig = value.data()[e];
            probe.get_mut(id).data_mut()[e] = orig + step;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig - step;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[e] = orig;
            tracker.record(e, g[e], (up - down) / (2.0 * step));
        }
        report.leaves.push(tracker.check);
    }
    Ok(report)
}
