use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{NnError, ParamSet};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_tensor: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn coordinates_checked(&self) -> usize {
        self.per_tensor.iter().map(|t| t.checked).sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients with central finite differences.
///
/// `loss` returns the loss value and its gradient with respect to every
/// tensor of `params`. Up to `samples` coordinates per tensor are drawn
/// without replacement from an RNG seeded with `seed`; smaller tensors are
/// checked exhaustively.
pub fn grad_check<F>(params: &ParamSet, eps: f64, samples: usize, seed: u64, mut loss: F) -> Result<GradCheckReport, NnError>
where
    F: FnMut(&ParamSet) -> Result<(f64, ParamSet), NnError>,
{
    if eps <= 0.0 || !eps.is_finite() {
        return Err(NnError::InvalidConfig(format!("finite-difference step {eps} must be positive")));
    }
    let (value, grads) = loss(params)?;
    if !value.is_finite() {
        return Err(NnError::NonFinite);
    }
    if !grads.same_layout(params) {
        return Err(NnError::ShapeMismatch("gradient layout differs from parameters".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        per_tensor: Vec::with_capacity(params.len()),
    };
    for (id, name, t) in params.iter() {
        let n = t.len();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            sample(&mut rng, n, samples).into_vec()
        };
        let mut worst = 0.0f64;
        for &i in &picks {
            let orig = t.data()[i];
            probe.get_mut(id).data_mut()[i] = orig + eps;
            let (plus, _) = loss(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - eps;
            let (minus, _) = loss(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(NnError::NonFinite);
            }
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(grads.get(id).data()[i], numeric));
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_tensor.push(TensorCheck {
            name: name.to_string(),
            checked: picks.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}
