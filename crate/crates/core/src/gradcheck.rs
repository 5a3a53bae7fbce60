//! Central finite-difference gradient checks.
//!
//! Each coordinate is perturbed by `±step` and the symmetric difference of the
//! loss is compared against the analytic gradient. Coordinates whose
//! perturbation changes the graph's kink signature (ReLU sign pattern,
//! max-pool argmax, expert routing) are skipped: the function is not
//! differentiable there and the difference quotient is meaningless.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so gradients that are zero up
    /// to rounding compare absolutely.
    pub abs_floor: f64,
    /// Additional floor as a fraction of the largest analytic gradient
    /// magnitude in the check, so round-off in the difference quotient does
    /// not dominate coordinates that are tiny relative to the rest.
    pub rel_floor: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords_per_tensor: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            rel_floor: 1e-4,
            max_coords_per_tensor: None,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Name (or input index) and flat coordinate of the worst mismatch.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: Option<(f64, f64)>,
    pub checked: usize,
    pub skipped_kinks: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_error < self.tolerance
    }

    fn record(&mut self, name: &str, coord: usize, analytic: f64, numeric: f64, floor: f64) {
        let err = rel_error(analytic, numeric, floor);
        self.checked += 1;
        if self.worst.is_none() || err > self.max_rel_error {
            self.max_rel_error = err;
            self.worst = Some((name.to_string(), coord));
            self.worst_values = Some((analytic, numeric));
        }
    }
}

pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(n: usize, cap: Option<usize>) -> Vec<usize> {
    match cap {
        Some(c) if c < n => {
            let stride = n as f64 / c as f64;
            (0..c).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..n).collect(),
    }
}

/// Checks `f` with respect to free input tensors.
pub fn check_gradients<F>(inputs: &[Tensor], opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor], track: bool| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| if track { g.leaf(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let out = f(&mut g, &vars)?;
        Ok((g, out, vars))
    };
    let (g, out, vars) = eval(inputs, true)?;
    let base_sig = g.kink_signature();
    let grads = g.backward(out)?;
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        ..Default::default()
    };
    let scale = vars
        .iter()
        .filter_map(|v| grads.get(*v))
        .map(|t| t.max_abs())
        .fold(0.0, f64::max);
    let floor = opts.abs_floor.max(opts.rel_floor * scale);
    let mut values = inputs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in coords(inputs[k].numel(), opts.max_coords_per_tensor) {
            let orig = values[k].data()[i];
            values[k].data_mut()[i] = orig + opts.step;
            let (gp, op, _) = eval(&values, false)?;
            values[k].data_mut()[i] = orig - opts.step;
            let (gm, om, _) = eval(&values, false)?;
            values[k].data_mut()[i] = orig;
            if gp.kink_signature() != base_sig || gm.kink_signature() != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (scalar(&gp, op)? - scalar(&gm, om)?) / (2.0 * opts.step);
            report.record(&format!("input{k}"), i, analytic.data()[i], numeric, floor);
        }
    }
    Ok(report)
}

/// Checks `f` with respect to every trainable parameter in `store`.
pub fn check_params<F>(store: &ParamStore, opts: &GradCheckOptions, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let base_sig = g.kink_signature();
    let grads = g.param_grads(out, store.len())?;
    drop(g);
    let floor = opts.abs_floor.max(opts.rel_floor * grads.max_abs());
    let mut report = GradCheckReport {
        tolerance: opts.tolerance,
        ..Default::default()
    };
    let mut probe = store.clone();
    for (id, p) in store.iter() {
        if !p.trainable {
            continue;
        }
        let zeros = Tensor::zeros(p.value.shape());
        let analytic = grads.get(id).unwrap_or(&zeros);
        for i in coords(p.value.numel(), opts.max_coords_per_tensor) {
            let orig = p.value.data()[i];
            let mut side = |delta: f64| -> Result<(f64, u64)> {
                probe.value_mut(id).data_mut()[i] = orig + delta;
                let mut g = Graph::new();
                let out = f(&mut g, &probe)?;
                Ok((scalar(&g, out)?, g.kink_signature()))
            };
            let (lp, sp) = side(opts.step)?;
            let (lm, sm) = side(-opts.step)?;
            probe.value_mut(id).data_mut()[i] = orig;
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * opts.step);
            report.record(&p.name, i, analytic.data()[i], numeric, floor);
        }
    }
    Ok(report)
}

fn scalar(g: &Graph, v: Var) -> Result<f64> {
    let t = g.value(v);
    if !t.is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar output".into()));
    }
    Ok(t.data()[0])
}
