//! Redundancy diagnostics over a frozen model: consecutive-frame
//! differences, attention-concentration curves, cross-step feature
//! similarity, and a per-layer divergence summary.

use crate::caching::row_cosines;
use crate::mat::Mat;
use crate::model::{DiffusionState, Model, SampleOptions};
use crate::tensor::{Rng, Tensor};
use crate::{CoreError, Result};

/// Cumulative attention mass over context tokens sorted by descending
/// mass: `points[i] = (fraction_of_tokens, cumulative_mass)`.
#[derive(Debug, Clone)]
pub struct ConcentrationCurve {
    pub points: Vec<(f64, f64)>,
}

/// Mean cosine similarity of hidden rows at one sampling step against the
/// same rows at step 0.
#[derive(Debug, Clone, Copy)]
pub struct StepSimilarity {
    pub step: usize,
    pub ctx: f64,
    pub noisy: f64,
}

/// L1 distance between the mean token vectors of consecutive frames.
/// Input is rank-3 `[frames, tokens_per_frame, width]` with frames ≥ 2.
pub fn frame_diff(frames: &Tensor) -> Result<Vec<f64>> {
    let dims = frames.shape();
    let &[f, p, d] = dims else {
        return Err(CoreError::Shape(format!(
            "frame_diff wants rank-3 [frames, tokens, width], got {dims:?}"
        )));
    };
    if f < 2 {
        return Err(CoreError::Invalid(format!(
            "frame_diff needs at least 2 frames, got {f}"
        )));
    }
    if p == 0 || d == 0 {
        return Err(CoreError::Shape("frames must be nonempty".into()));
    }
    let data = frames.data();
    let mean = |frame: usize| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for tok in 0..p {
            let base = (frame * p + tok) * d;
            for (j, slot) in m.iter_mut().enumerate() {
                *slot += data[base + j] as f64;
            }
        }
        for slot in m.iter_mut() {
            *slot /= p as f64;
        }
        m
    };
    let mut out = Vec::with_capacity(f - 1);
    let mut prev = mean(0);
    for frame in 1..f {
        let cur = mean(frame);
        out.push(
            prev.iter()
                .zip(&cur)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>(),
        );
        prev = cur;
    }
    Ok(out)
}

/// Curve from a raw per-token mass vector (any nonnegative weights with a
/// positive sum): normalize, sort descending, accumulate.
pub fn concentration_from_mass(mass: &[f64]) -> Result<ConcentrationCurve> {
    if mass.is_empty() {
        return Err(CoreError::Invalid(
            "concentration needs at least one context token".into(),
        ));
    }
    if mass.iter().any(|&m| !m.is_finite() || m < 0.0) {
        return Err(CoreError::Invalid(
            "attention mass must be finite and nonnegative".into(),
        ));
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(CoreError::Invalid("attention mass sums to zero".into()));
    }
    let mut sorted: Vec<f64> = mass.iter().map(|&m| m / total).collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    let n = sorted.len() as f64;
    let mut cum = 0.0;
    let points = sorted
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            cum += m;
            ((i + 1) as f64 / n, cum)
        })
        .collect();
    Ok(ConcentrationCurve { points })
}

/// Noisy→context attention concentration, accumulated over the given
/// probe inputs and layers through the joint-attention probe pathway.
pub fn attention_concentration(
    model: &Model,
    inputs: &[DiffusionState],
    layers: &[usize],
) -> Result<ConcentrationCurve> {
    let n_c = model.cfg.n_c();
    if n_c == 0 {
        return Err(CoreError::Invalid(
            "attention concentration needs context tokens".into(),
        ));
    }
    if inputs.is_empty() || layers.is_empty() {
        return Err(CoreError::Invalid(
            "attention concentration needs ≥ 1 input and ≥ 1 layer".into(),
        ));
    }
    let mut mass = vec![0.0; n_c];
    for state in inputs {
        for &layer in layers {
            let m = model.probe_ctx_mass(state, layer)?;
            for (slot, v) in mass.iter_mut().zip(&m) {
                *slot += v;
            }
        }
    }
    concentration_from_mass(&mass)
}

/// Hidden-row similarity against step 0 along an uncached sampling
/// trajectory, traced after `layer`. Context rows of an empty context
/// compare as 1.0 (vacuous).
pub fn stepwise_similarity(
    model: &Model,
    contexts: &[Tensor],
    steps: usize,
    layer: usize,
    seed: u64,
) -> Result<Vec<StepSimilarity>> {
    if steps < 2 {
        return Err(CoreError::Invalid(format!(
            "stepwise similarity needs ≥ 2 steps, got {steps}"
        )));
    }
    if layer >= model.cfg.layers {
        return Err(CoreError::Invalid(format!(
            "trace layer {layer} out of range for {} layers",
            model.cfg.layers
        )));
    }
    let mut rng = Rng::new(seed);
    let run = model.sample_run(
        contexts,
        steps,
        &mut rng,
        &SampleOptions {
            use_cache: false,
            trace_layer: Some(layer),
        },
    )?;
    if run.traces.len() != steps {
        return Err(CoreError::Invalid(format!(
            "expected {steps} traces, got {}",
            run.traces.len()
        )));
    }
    let base = &run.traces[0];
    let base_ctx = Mat::from_tensor(&base.ctx);
    let base_noisy = Mat::from_tensor(&base.noisy);
    let mean = |v: &[f64]| -> f64 {
        if v.is_empty() {
            1.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(run
        .traces
        .iter()
        .map(|tr| StepSimilarity {
            step: tr.step,
            ctx: mean(&row_cosines(&Mat::from_tensor(&tr.ctx), &base_ctx)),
            noisy: mean(&row_cosines(&Mat::from_tensor(&tr.noisy), &base_noisy)),
        })
        .collect())
}

/// Pairwise Jensen–Shannon divergence (base 2, so bounded by 1) between
/// the per-layer context attention-mass distributions, averaged over the
/// probe inputs. The underlying per-layer divergence heatmap has no fixed
/// published definition; this distribution-level reading is one
/// interpretation and is labeled as such in the emitted reports.
pub fn layerwise_divergence(model: &Model, inputs: &[DiffusionState]) -> Result<Vec<Vec<f64>>> {
    let n_c = model.cfg.n_c();
    if n_c == 0 {
        return Err(CoreError::Invalid(
            "layerwise divergence needs context tokens".into(),
        ));
    }
    if inputs.is_empty() {
        return Err(CoreError::Invalid("layerwise divergence needs ≥ 1 input".into()));
    }
    let layers = model.cfg.layers;
    let mut dists = Vec::with_capacity(layers);
    for layer in 0..layers {
        let mut mass = vec![0.0; n_c];
        for state in inputs {
            let m = model.probe_ctx_mass(state, layer)?;
            for (slot, v) in mass.iter_mut().zip(&m) {
                *slot += v;
            }
        }
        let total: f64 = mass.iter().sum();
        if total <= 0.0 {
            return Err(CoreError::Invalid(format!(
                "layer {layer} received zero attention mass"
            )));
        }
        for slot in mass.iter_mut() {
            *slot /= total;
        }
        dists.push(mass);
    }
    let mut out = vec![vec![0.0; layers]; layers];
    for i in 0..layers {
        for j in (i + 1)..layers {
            let d = jsd_bits(&dists[i], &dists[j]);
            out[i][j] = d;
            out[j][i] = d;
        }
    }
    Ok(out)
}

/// Jensen–Shannon divergence in bits between two distributions on the same
/// support. `0·log 0 = 0`.
fn jsd_bits(p: &[f64], q: &[f64]) -> f64 {
    let kl_to_mix = |a: &[f64], b: &[f64]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(&x, &y)| {
                if x <= 0.0 {
                    0.0
                } else {
                    x * (x / (0.5 * (x + y))).log2()
                }
            })
            .sum::<f64>()
    };
    0.5 * kl_to_mix(p, q) + 0.5 * kl_to_mix(q, p)
}
