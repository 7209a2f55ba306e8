//! Inference-time resolution routing: pick the entry depth from the input's
//! spatial size, adjust residual mismatch by center pad/crop, and run the
//! matching path. Also the Pad/Up input handlers used by the baselines.

use crate::data::{self, LabelVolume, Sample};
use crate::error::{Error, Result};
use crate::model::{Model, ScalePathOutput};
use crate::ops::{argmax_channels, NormMode};
use crate::tensor::Tensor;

/// How a baseline restores a low-resolution input to full shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrepareMode {
    Pad,
    Up,
}

impl PrepareMode {
    pub fn parse(s: &str) -> Result<PrepareMode> {
        match s {
            "pad" => Ok(PrepareMode::Pad),
            "up" => Ok(PrepareMode::Up),
            other => Err(Error::Config(format!("unknown prepare mode '{other}' (pad|up)"))),
        }
    }
}

/// Resolution routing outcome.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RouteDecision {
    pub entry_depth: usize,
    /// Spatial shape the routed path expects: full/2^d.
    pub expected_shape: [usize; 3],
    /// Per-axis signed change applied by pad_or_crop (expected − input).
    pub deltas: [isize; 3],
}

/// Entry depth = round(log2(geometric mean of full_i/input_i)), ties at .5
/// rounded down (toward finer resolution), clamped to [0, max_depth].
pub fn select_entry_depth(
    input_shape: [usize; 3],
    full_shape: [usize; 3],
    max_depth: usize,
) -> Result<RouteDecision> {
    if input_shape.iter().any(|&e| e == 0) || full_shape.iter().any(|&e| e == 0) {
        return Err(Error::Contract("shapes must be positive".into()));
    }
    // log2 of the geometric mean of the per-axis ratios
    let log_ratio: f64 = input_shape
        .iter()
        .zip(&full_shape)
        .map(|(&i, &f)| (f as f64 / i as f64).log2())
        .sum::<f64>()
        / 3.0;
    // round half down: ceil(x - 0.5)
    let d = (log_ratio - 0.5).ceil();
    let d = d.max(0.0) as usize;
    let d = d.min(max_depth);
    let s = 1usize << d;
    let expected = [full_shape[0] / s, full_shape[1] / s, full_shape[2] / s];
    let mut deltas = [0isize; 3];
    for a in 0..3 {
        deltas[a] = expected[a] as isize - input_shape[a] as isize;
    }
    Ok(RouteDecision { entry_depth: d, expected_shape: expected, deltas })
}

/// Normalize, route, pad/crop to the routed level, run the matching forward
/// path and argmax the head's logits. Labels come back at the routed
/// resolution alongside the decision.
pub fn infer(model: &Model, sample: &Sample) -> Result<(LabelVolume, RouteDecision)> {
    let cfg = &model.config;
    if sample.channels != cfg.in_channels {
        return Err(Error::Data(format!(
            "volume has {} channels, model expects {}",
            sample.channels, cfg.in_channels
        )));
    }
    let image = data::normalize_intensity(&sample.image)?;
    let decision = select_entry_depth(sample.shape, cfg.full_shape, cfg.depth - 1)?;
    let prepared = data::pad_or_crop(
        &image,
        sample.channels,
        sample.shape,
        decision.expected_shape,
        0.0,
    );
    let e = decision.expected_shape;
    let x = Tensor::from_vec(prepared, &[1, sample.channels, e[0], e[1], e[2]])?;
    let logits = crate::tensor::no_grad(|| {
        if decision.entry_depth == 0 {
            Ok(model.forward_full(&x, NormMode::Eval)?.logits)
        } else {
            let ScalePathOutput { logits, .. } =
                model.forward_scale(&x, decision.entry_depth, NormMode::Eval)?;
            Ok::<Tensor, Error>(logits)
        }
    })?;
    let labels = LabelVolume::new(vec![e[0], e[1], e[2]], argmax_channels(&logits)?)?;
    Ok((labels, decision))
}

/// Baseline input handling: restore a low-resolution image to full shape by
/// centered zero-padding (crops if larger) or trilinear upsampling.
pub fn baseline_prepare(
    image: &[f32],
    channels: usize,
    shape: [usize; 3],
    mode: PrepareMode,
    full_shape: [usize; 3],
) -> Result<Vec<f32>> {
    match mode {
        PrepareMode::Pad => Ok(data::pad_or_crop(image, channels, shape, full_shape, 0.0)),
        PrepareMode::Up => data::upsample_image(image, channels, shape, full_shape),
    }
}
