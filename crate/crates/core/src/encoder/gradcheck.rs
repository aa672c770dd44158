use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EncoderParams, GradientSet};
use crate::error::{Error, Result};

/// A scalar function of the encoder parameters with an analytic gradient.
pub trait Objective {
    /// The value, plus a fingerprint of which side of the activation kink
    /// every unit sits on (see [`crate::encoder::Tape::kink_signature`]).
    fn value(&self, params: &EncoderParams) -> Result<(f64, u64)>;
    fn value_and_gradient(&self, params: &EncoderParams) -> Result<(f64, GradientSet)>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Draws discarded because the two probes straddled an activation kink.
    pub kink_skips: usize,
    /// Samples that needed a smaller step to keep both probes on one side
    /// of every kink.
    pub shrunk: usize,
    /// Flat index, analytic and numeric gradient of the worst sample.
    pub worst: (usize, f64, f64),
}

/// Step reductions (by 10× each) tried on a kink crossing before redrawing.
const SHRINKS: i32 = 3;

/// Gradients smaller than this are indistinguishable from the roundoff of a
/// central difference, e.g. the embedding bias under Euclidean distance,
/// which the loss ignores.
const DENOM_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares analytic gradients against central differences on `samples`
/// scalars, cycling through the tensors so every layer is covered.
///
/// A central difference is meaningless when the two probes fall on opposite
/// sides of a rectifier kink; such a draw is retried with smaller steps and
/// then replaced by another scalar from the same tensor.
pub fn gradcheck(
    params: &EncoderParams,
    objective: &dyn Objective,
    epsilon: f64,
    samples: usize,
    seed: u64,
) -> Result<GradcheckReport> {
    let (loss, grads) = objective.value_and_gradient(params)?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { seed });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offsets: Vec<usize> = params
        .tensors
        .iter()
        .scan(0, |acc, t| {
            let start = *acc;
            *acc += t.data.len();
            Some(start)
        })
        .collect();
    let mut probe = params.clone();
    let mut report = GradcheckReport {
        max_relative_error: 0.0,
        checked: 0,
        kink_skips: 0,
        shrunk: 0,
        worst: (0, 0.0, 0.0),
    };
    let max_skips = 20 * samples.max(1);
    let mut s = 0;
    while s < samples {
        let t = s % params.tensors.len();
        let index = offsets[t] + rng.random_range(0..params.tensors[t].data.len());
        let original = *probe.scalar_mut(index);
        let mut probed = None;
        for shrink in 0..SHRINKS {
            let eps = epsilon / 10f64.powi(shrink);
            *probe.scalar_mut(index) = original + eps;
            let (plus, sig_plus) = objective.value(&probe)?;
            *probe.scalar_mut(index) = original - eps;
            let (minus, sig_minus) = objective.value(&probe)?;
            *probe.scalar_mut(index) = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFiniteLoss { seed });
            }
            if sig_plus == sig_minus {
                if shrink > 0 {
                    report.shrunk += 1;
                }
                probed = Some((plus - minus) / (2.0 * eps));
                break;
            }
        }
        let Some(numeric) = probed else {
            report.kink_skips += 1;
            if report.kink_skips > max_skips {
                return Err(Error::Config("gradcheck: too many kink crossings".into()));
            }
            continue;
        };
        s += 1;
        let analytic = grads.scalar(index);
        let err = relative_error(analytic, numeric);
        if err > report.max_relative_error {
            report.max_relative_error = err;
            report.worst = (index, analytic, numeric);
        }
        report.checked += 1;
    }
    Ok(report)
}
