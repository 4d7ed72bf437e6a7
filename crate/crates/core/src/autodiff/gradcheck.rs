//! Central finite-difference checks of tape gradients (64-bit only).
//!
//! These helpers evaluate the forward function repeatedly and never touch
//! the backward rules, so they serve as an independent oracle for them.

use crate::error::Result;

use super::{ParamStore, Tape, Tensor, Var};

/// Outcome of comparing analytic and numeric derivatives.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub checked: usize,
    pub failures: Vec<Mismatch>,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub input: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub step: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rtol: 1e-3,
            atol: 1e-5,
        }
    }
}

struct Collector {
    tol: Tolerance,
    report: GradCheck,
}

impl Collector {
    fn new(tol: Tolerance) -> Self {
        Self {
            tol,
            report: GradCheck {
                checked: 0,
                failures: Vec::new(),
                max_abs_err: 0.0,
            },
        }
    }

    fn compare(&mut self, input: &str, index: usize, analytic: f64, numeric: f64) {
        let err = (analytic - numeric).abs();
        self.report.checked += 1;
        self.report.max_abs_err = self.report.max_abs_err.max(err);
        if err > self.tol.atol + self.tol.rtol * numeric.abs() {
            self.report.failures.push(Mismatch {
                input: input.to_string(),
                index,
                analytic,
                numeric,
            });
        }
    }
}

/// Checks `d f / d inputs` for a scalar function of explicit input tensors.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], tol: Tolerance, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out, &mut ParamStore::new())?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();

    let mut eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = inputs.iter().map(|t| tape.constant(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        tape.scalar(out)
    };

    let mut col = Collector::new(tol);
    let mut work = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = work[which].data()[i];
            work[which].data_mut()[i] = orig + tol.step;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - tol.step;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            col.compare(&format!("input{which}"), i, a, (plus - minus) / (2.0 * tol.step));
        }
    }
    Ok(col.report)
}

/// Checks `d f / d θ` for every parameter in `store` (or the ones named in
/// `only`, when non-empty).
pub fn check_params<F>(store: &mut ParamStore<f64>, only: &[&str], tol: Tolerance, mut f: F) -> Result<GradCheck>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    tape.backward(out, store)?;

    let mut col = Collector::new(tol);
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| only.is_empty() || only.contains(&store.name(id)))
        .collect();
    for id in ids {
        let name = store.name(id).to_string();
        let analytic = store
            .get(id)
            .grad()
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + tol.step;
            let mut t = Tape::new();
            let v = f(&mut t, store)?;
            let plus = t.scalar(v)?;
            store.get_mut(id).data_mut()[i] = orig - tol.step;
            let mut t = Tape::new();
            let v = f(&mut t, store)?;
            let minus = t.scalar(v)?;
            store.get_mut(id).data_mut()[i] = orig;
            col.compare(&name, i, a, (plus - minus) / (2.0 * tol.step));
        }
    }
    store.zero_grad();
    Ok(col.report)
}
