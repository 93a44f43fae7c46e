use ndarray::Array2;
use rand::Rng;

use super::layers::Real;
use super::EncoderState;
use crate::domain::BrainSample;
use crate::error::{Error, Result};
use crate::trainer::loss::mse_with_grad;

/// Compares analytic gradients of the element-mean squared error against
/// central differences at `probes` randomly chosen parameter coordinates,
/// all in f64. Returns the largest
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)` with
/// `floor = 1e-6 · max(1, |loss|)`. The floor sits well above the roundoff
/// of a central difference (about `ε_mach · |loss| / eps`), so coordinates
/// whose true gradient is near zero are judged by absolute error.
///
/// Coordinates are drawn from the shared encoder and the sample's own
/// tokenizer; other tokenizers have identically zero gradient.
pub fn gradient_check<F: Real, R: Rng + ?Sized>(
    state: &EncoderState<F>,
    sample: &BrainSample,
    eps: f64,
    probes: usize,
    rng: &mut R,
) -> Result<f64> {
    let target = sample
        .target
        .as_ref()
        .ok_or_else(|| Error::Argument("gradient check needs a target grid".into()))?;
    let target: Array2<f64> = target.values().mapv(|v| v as f64);
    let mut wide: EncoderState<f64> = state.cast();
    let item = [(sample.subject_id.as_str(), sample.voxels.as_slice())];

    let loss_at = |s: &EncoderState<f64>| -> Result<f64> {
        let out = s.forward_stacked(&item)?;
        Ok(mse_with_grad(&out, &target)?.0)
    };
    let (loss, grads) = wide.backprop(&item, |out| mse_with_grad(out, &target))?;
    let analytic = grads.named();

    let mut coords = Vec::new();
    for (name, g) in &analytic {
        for i in 0..g.len() {
            coords.push((name.clone(), i));
        }
    }
    let floor = 1e-6 * loss.abs().max(1.0);
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let (name, idx) = coords[rng.random_range(0..coords.len())].clone();
        let original = get(&mut wide, &name, idx);
        set(&mut wide, &name, idx, original + eps);
        let plus = loss_at(&wide)?;
        set(&mut wide, &name, idx, original - eps);
        let minus = loss_at(&wide)?;
        set(&mut wide, &name, idx, original);
        let numeric = (plus - minus) / (2.0 * eps);
        let exact = analytic[&name][idx];
        let denom = exact.abs().max(numeric.abs()).max(floor);
        worst = worst.max((exact - numeric).abs() / denom);
    }
    Ok(worst)
}

fn get(state: &mut EncoderState<f64>, name: &str, idx: usize) -> f64 {
    let mut out = f64::NAN;
    state.walk_mut(&mut |n: &str, x: &mut [f64]| {
        if n == name {
            out = x[idx];
        }
    });
    out
}

fn set(state: &mut EncoderState<f64>, name: &str, idx: usize, value: f64) {
    state.walk_mut(&mut |n: &str, x: &mut [f64]| {
        if n == name {
            x[idx] = value;
        }
    });
}
