//! Central finite-difference gradient checking.

use super::{ParamStore, Tape, Tensor, Var};
use crate::rng::Rng;
use crate::{Error, Result};

/// Step used by the checker.
pub const FD_STEP: f64 = 1e-5;

/// Magnitudes below this are compared absolutely rather than relatively.
pub const REL_FLOOR: f64 = 1e-5;

/// `entries` counts compared coordinates. A coordinate whose `x ± h`
/// evaluations put some ReLU or LeakyReLU input on the other side of zero
/// than the unperturbed pass is not on a smooth piece of the loss; it is
/// counted in `kinked` and left out of `max_rel_error`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub entries: usize,
    pub kinked: usize,
}

impl GradCheck {
    pub fn merge(&mut self, other: GradCheck) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.entries += other.entries;
        self.kinked += other.kinked;
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel_error = self.max_rel_error.max(relative_error(analytic, numeric));
        self.entries += 1;
    }

    fn record_point(&mut self, analytic: f64, plus: &Eval, minus: &Eval, base: &[bool]) {
        if plus.1 != base || minus.1 != base {
            self.kinked += 1;
        } else {
            self.record(analytic, (plus.0 - minus.0) / (2.0 * FD_STEP));
        }
    }
}

/// Scalar output and kink signature of one evaluation.
type Eval = (f64, Vec<bool>);

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.len() != 1 {
        return Err(Error::contract(format!(
            "gradient check needs a scalar output, got {:?}",
            t.shape()
        )));
    }
    Ok(t.item())
}

/// Checks d f / d inputs for a scalar-valued `f` built on a fresh tape.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<Eval> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((scalar_of(&tape, out)?, tape.kink_signature()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let base = tape.kink_signature();
    let mut scratch = ParamStore::new();
    tape.backward(out, &mut scratch)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec)
        })
        .collect();

    let mut report = GradCheck::default();
    let mut values = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        for i in 0..grad.len() {
            let orig = values[which].data()[i];
            values[which].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&values)?;
            values[which].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&values)?;
            values[which].data_mut()[i] = orig;
            report.record_point(grad[i], &plus, &minus, &base);
        }
    }
    Ok(report)
}

/// Checks the gradient of `loss` with respect to parameters in `store`.
///
/// With `max_entries = Some(k)`, at most `k` randomly chosen coordinates of
/// each parameter are perturbed.
pub fn check_params<F>(
    store: &mut ParamStore,
    max_entries: Option<usize>,
    rng: &mut Rng,
    loss: F,
) -> Result<GradCheck>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut report = GradCheck::default();
    for (_, part) in check_params_by_name(store, max_entries, rng, loss)? {
        report.merge(part);
    }
    Ok(report)
}

/// Like [`check_params`] but reports the worst error per parameter name.
pub fn check_params_by_name<F>(
    store: &mut ParamStore,
    max_entries: Option<usize>,
    rng: &mut Rng,
    mut loss: F,
) -> Result<Vec<(String, GradCheck)>>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let out = loss(&mut tape, store)?;
    scalar_of(&tape, out)?;
    let base = tape.kink_signature();
    tape.backward(out, store)?;
    let analytic: Vec<Vec<f64>> = store
        .iter()
        .map(|p| p.grad.clone().unwrap_or_else(|| vec![0.0; p.value.len()]))
        .collect();
    store.zero_grad();

    let ids: Vec<_> = store.ids().collect();
    let mut out_rows = Vec::with_capacity(ids.len());
    for (id, grad) in ids.into_iter().zip(analytic) {
        let n = grad.len();
        let mut coords: Vec<usize> = (0..n).collect();
        if let Some(k) = max_entries {
            if k < n {
                rng.shuffle(&mut coords);
                coords.truncate(k);
            }
        }
        let mut part = GradCheck::default();
        for i in coords {
            let orig = store.get(id).value.data()[i];
            let mut eval_at = |x: f64, store: &mut ParamStore| -> Result<Eval> {
                store.get_mut(id).value.data_mut()[i] = x;
                let mut t = Tape::new();
                let o = loss(&mut t, store)?;
                Ok((scalar_of(&t, o)?, t.kink_signature()))
            };
            let plus = eval_at(orig + FD_STEP, store)?;
            let minus = eval_at(orig - FD_STEP, store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            part.record_point(grad[i], &plus, &minus, &base);
        }
        out_rows.push((store.get(id).name.clone(), part));
    }
    Ok(out_rows)
}
