//! Central finite-difference verification of tape gradients (f64 only).

use super::tape::{Tape, Var};
use crate::error::{HigrError, Result};

const FD_STEP: f64 = 1e-5;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Worst elementwise relative error across all inputs.
    pub max_rel_err: f64,
    /// Number of elements compared.
    pub n_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    let denom = a.abs().max(n.abs()).max(1e-3);
    (a - n).abs() / denom
}

/// Compare autodiff gradients of a scalar-valued function against central
/// finite differences with step 1e-5.
///
/// `f` rebuilds the computation on a fresh tape from the given leaf values;
/// inputs are `(values, shape)` pairs bound as differentiable leaves.
pub fn grad_check<G>(f: G, inputs: &[(Vec<f64>, Vec<usize>)]) -> Result<GradCheckReport>
where
    G: Fn(&Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |points: &[(Vec<f64>, Vec<usize>)]| -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let tape = Tape::new();
        let vars: Vec<Var> = points
            .iter()
            .map(|(v, s)| tape.leaf(v.clone(), s.clone(), true))
            .collect::<Result<_>>()?;
        let out = f(&tape, &vars)?;
        if tape.numel(out) != 1 {
            return Err(HigrError::Contract(
                "grad_check: function must be scalar-valued".into(),
            ));
        }
        let grads = tape.backward(out)?;
        let g = vars
            .iter()
            .map(|&v| grads.get(v).map(|s| s.to_vec()))
            .collect();
        Ok((tape.scalar_value(out), g))
    };

    let (_, analytic) = eval(inputs)?;

    let mut max_rel = 0.0f64;
    let mut n_checked = 0usize;
    let mut perturbed: Vec<(Vec<f64>, Vec<usize>)> = inputs.to_vec();
    for (i, (vals, _)) in inputs.iter().enumerate() {
        let a = analytic[i].clone().unwrap_or_else(|| vec![0.0; vals.len()]);
        for j in 0..vals.len() {
            let orig = perturbed[i].0[j];
            perturbed[i].0[j] = orig + FD_STEP;
            let (f_plus, _) = eval(&perturbed)?;
            perturbed[i].0[j] = orig - FD_STEP;
            let (f_minus, _) = eval(&perturbed)?;
            perturbed[i].0[j] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * FD_STEP);
            max_rel = max_rel.max(rel_err(a[j], numeric));
            n_checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        n_checked,
    })
}
