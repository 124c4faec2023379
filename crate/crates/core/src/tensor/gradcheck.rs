//! Central finite-difference verification of backward rules (64-bit only).

use super::{ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub max_rel_err: f64,
    pub elements: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// `|a - n| / (|a| + |n| + 1e-12)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs() + 1e-12)
}

fn check_step(step: f64) -> Result<(), TensorError> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(TensorError::InvalidAttr {
            context: "finite-difference step must be positive",
        })
    }
}

fn scalar_loss(tape: &Tape<f64>, loss: Var) -> Result<f64, TensorError> {
    let v = tape.item(loss)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(TensorError::NonFinite {
            kind: super::OpKind::Backward,
        })
    }
}

/// Checks a fragment built from explicit input tensors.
///
/// `fragment` receives one leaf per input (all requiring grad) and returns a
/// scalar. Inputs the loss does not depend on are left out of the report.
pub fn grad_check<F>(
    inputs: &[(&str, Tensor<f64>)],
    step: f64,
    tolerance: f64,
    fragment: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    check_step(step)?;
    let eval = |values: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t)).collect();
        let loss = fragment(&mut tape, &vars)?;
        scalar_loss(&tape, loss)
    };

    let mut values: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|(_, t)| t.clone().with_requires_grad(true))
        .collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t)).collect();
    let loss = fragment(&mut tape, &vars)?;
    scalar_loss(&tape, loss)?;
    let grads = tape.backward(loss)?;

    let mut entries = Vec::new();
    for (i, (name, _)) in inputs.iter().enumerate() {
        let Some(analytic) = grads.get(vars[i]).map(|g| g.to_vec()) else {
            continue;
        };
        let mut worst: f64 = 0.0;
        for j in 0..analytic.len() {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + step;
            let up = eval(&values)?;
            values[i].data_mut()[j] = orig - step;
            let down = eval(&values)?;
            values[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
        entries.push(GradCheckEntry {
            name: name.to_string(),
            max_rel_err: worst,
            elements: analytic.len(),
        });
    }
    Ok(GradCheckReport { entries, tolerance })
}

/// Checks every parameter of `store` that `fragment` depends on.
pub fn grad_check_params<F>(
    store: &mut ParamStore<f64>,
    step: f64,
    tolerance: f64,
    fragment: F,
) -> Result<GradCheckReport, TensorError>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var, TensorError>,
{
    check_step(step)?;
    let frozen = store.is_frozen();
    store.set_frozen(false);
    store.clear_grads();
    let mut tape = Tape::new();
    let loss = fragment(&mut tape, store)?;
    scalar_loss(&tape, loss)?;
    let grads = tape.backward(loss)?;
    grads.accumulate_into(store)?;

    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    let mut entries = Vec::new();
    for id in ids {
        let Some(analytic) = store.get(id).tensor.grad().map(|g| g.to_vec()) else {
            continue;
        };
        let mut worst: f64 = 0.0;
        for j in 0..analytic.len() {
            let orig = store.get(id).tensor.data()[j];
            store.get_mut(id).tensor.data_mut()[j] = orig + step;
            let mut t = Tape::new();
            let l = fragment(&mut t, store)?;
            let up = scalar_loss(&t, l)?;
            store.get_mut(id).tensor.data_mut()[j] = orig - step;
            let mut t = Tape::new();
            let l = fragment(&mut t, store)?;
            let down = scalar_loss(&t, l)?;
            store.get_mut(id).tensor.data_mut()[j] = orig;
            worst = worst.max(relative_error(analytic[j], (up - down) / (2.0 * step)));
        }
        entries.push(GradCheckEntry {
            name: store.get(id).name().to_string(),
            max_rel_err: worst,
            elements: analytic.len(),
        });
    }
    store.clear_grads();
    store.set_frozen(frozen);
    Ok(GradCheckReport { entries, tolerance })
}
