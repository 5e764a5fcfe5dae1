//! Selective context caching: which layers process context at all, and the
//! per-session store for context key/value tensors computed at step 0.
//!
//! Layer importance is measured, not guessed: for a layer's attention, run
//! the noisy queries once without context keys and once with them, and
//! score the layer by how much the outputs rotate (mean `1 - cosine`).
//! High-scoring layers keep the context pathway; the rest bypass it. The
//! first layer is always kept — it anchors the context into the residual
//! stream.

use crate::mat::{mha_mat, Mat};
use crate::model::{DiffusionState, LayerQkv, Model};
use crate::selection::SelectionResult;
use crate::tensor::Tensor;
use crate::{CoreError, Result};

// ---------------------------------------------------------------------------
// Layer plan
// ---------------------------------------------------------------------------

/// The set of layers that process context tokens ("active" layers).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerPlan {
    active: Vec<usize>,
    total: usize,
}

impl LayerPlan {
    /// Validates: indices in range, strictly ascending, and layer 0 present.
    pub fn new(active: Vec<usize>, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(CoreError::Invalid("layer plan over zero layers".into()));
        }
        if active.first() != Some(&0) {
            return Err(CoreError::Invalid(
                "layer plan must include layer 0".into(),
            ));
        }
        if !active.windows(2).all(|w| w[0] < w[1]) {
            return Err(CoreError::Invalid(
                "layer plan indices must be strictly ascending".into(),
            ));
        }
        if *active.last().unwrap() >= total {
            return Err(CoreError::Invalid(format!(
                "layer plan index {} out of range for {} layers",
                active.last().unwrap(),
                total
            )));
        }
        Ok(LayerPlan { active, total })
    }

    /// Every layer active (no layer-wise skipping).
    pub fn all(total: usize) -> Self {
        LayerPlan {
            active: (0..total).collect(),
            total,
        }
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn total(&self) -> usize {
        self.total
    }

    /// Number of active layers (`L_s`).
    pub fn l_s(&self) -> usize {
        self.active.len()
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.active.binary_search(&layer).is_ok()
    }
}

/// Picks `{0} ∪ top-extra` layers by importance score, ties to the lower
/// index, returned in ascending order.
pub fn choose_layers(report: &BiReport, extra: usize) -> Result<LayerPlan> {
    let l = report.bi.len();
    if l == 0 {
        return Err(CoreError::Invalid("empty importance report".into()));
    }
    if extra > l - 1 {
        return Err(CoreError::Invalid(format!(
            "cannot pick {extra} extra layers out of {} candidates",
            l - 1
        )));
    }
    let mut order: Vec<usize> = (1..l).collect();
    order.sort_by(|&a, &b| {
        report.bi[b]
            .partial_cmp(&report.bi[a])
            .expect("finite importance")
            .then(a.cmp(&b))
    });
    let mut active: Vec<usize> = std::iter::once(0)
        .chain(order[..extra].iter().copied())
        .collect();
    active.sort_unstable();
    LayerPlan::new(active, l)
}

// ---------------------------------------------------------------------------
// Session cache
// ---------------------------------------------------------------------------

///// Context tensors computed at the first sampling step of one layer:
/// selected keys/values (post-gate, f32-snapped) plus the selection itself,
/// the creating step index, and the layer's output context rows for the
/// hidden-state write-back.
#[derive(Debug, Clone)]
pub struct CacheEntry {
    pub k: Tensor,
    pub v: Tensor,
    pub sel: SelectionResult,
    pub step: usize,
    pub ctx_out: Tensor,
}

/// Single-writer-then-immutable store of per-layer [`CacheEntry`] values
/// for one sampling session. Populated exactly once per cacheable layer at
/// step 0; every later step only reads.
#[derive(Debug)]
pub struct SessionCache {
    slots: Vec<Option<CacheEntry>>,
    cacheable: Vec<bool>,
}

impl SessionCache {
    /// `layers` slots, of which only `cacheable_layers` may be populated.
    pub fn new(layers: usize, cacheable_layers: &[usize]) -> Result<Self> {
        let mut cacheable = vec![false; layers];
        for &l in cacheable_layers {
            if l >= layers {
                return Err(CoreError::Invalid(format!(
                    "cacheable layer {l} out of range for {layers} layers"
                )));
            }
            cacheable[l] = true;
        }
        Ok(SessionCache {
            slots: vec![None; layers],
            cacheable,
        })
    }

    pub fn populate(&mut self, layer: usize, entry: CacheEntry) -> Result<()> {
        if layer >= self.slots.len() {
            return Err(CoreError::Protocol(format!(
                "populate of layer {layer} beyond {} layers",
                self.slots.len()
            )));
        }
        if !self.cacheable[layer] {
            return Err(CoreError::Protocol(format!(
                "layer {layer} is not cacheable in this session"
            )));
        }
        if self.slots[layer].is_some() {
            return Err(CoreError::Protocol(format!(
                "layer {layer} cache populated twice"
            )));
        }
        self.slots[layer] = Some(entry);
        Ok(())
    }

    pub fn lookup(&self, layer: usize) -> Result<&CacheEntry> {
        match self.slots.get(layer) {
            Some(Some(e)) => Ok(e),
            Some(None) => Err(CoreError::Protocol(format!(
                "cache miss: layer {layer} was never populated"
            ))),
            None => Err(CoreError::Protocol(format!(
                "lookup of layer {layer} beyond {} layers",
                self.slots.len()
            ))),
        }
    }

    pub fn is_populated(&self, layer: usize) -> bool {
        matches!(self.slots.get(layer), Some(Some(_)))
    }
}

// ---------------------------------------------------------------------------
// Block importance
// ---------------------------------------------------------------------------

/// Per-layer importance measurements.
#[derive(Debug, Clone)]
pub struct BiReport {
    /// Mean `1 - cosine(out_without_ref, out_with_ref)` per layer, in `[0, 2]`.
    pub bi: Vec<f64>,
    /// Mean cosine per layer (`bi = 1 - mean_cosine`), kept for diagnostics.
    pub mean_cosine: Vec<f64>,
    /// Raw per-probe mean cosines, layer-major.
    pub per_probe: Vec<Vec<f64>>,
    /// Probe count the means were taken over.
    pub probes: usize,
}

/// Cosine similarity per row pair. Zero-norm rows compare equal to zero-norm
/// rows (cosine 1) and orthogonal to anything else (cosine 0).
pub(crate) fn row_cosines(a: &Mat, b: &Mat) -> Vec<f64> {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "row_cosines shapes");
    (0..a.rows)
        .map(|i| {
            let (ra, rb) = (a.row(i), b.row(i));
            let na: f64 = ra.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = rb.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na < 1e-30 && nb < 1e-30 {
                1.0
            } else if na < 1e-30 || nb < 1e-30 {
                0.0
            } else {
                ra.iter().zip(rb).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
            }
        })
        .collect()
}

fn probe_importance(model: &Model, probe: &DiffusionState, layer: usize) -> Result<f64> {
    let qkv = model.probe_layer_qkv(probe, layer)?;
    Ok(1.0 - probe_cosine(&qkv, model.cfg.heads))
}

fn probe_cosine(qkv: &LayerQkv, heads: usize) -> f64 {
    let q_z = Mat::from_tensor(&qkv.q_z);
    let k_z = Mat::from_tensor(&qkv.k_z);
    let v_z = Mat::from_tensor(&qkv.v_z);
    let k_c = Mat::from_tensor(&qkv.k_c);
    let v_c = Mat::from_tensor(&qkv.v_c);
    let o_no = mha_mat(&q_z, &k_z, &v_z, heads);
    let k_all = Mat::concat_rows(&[&k_z, &k_c]);
    let v_all = Mat::concat_rows(&[&v_z, &v_c]);
    let o_with = mha_mat(&q_z, &k_all, &v_all, heads);
    let cos = row_cosines(&o_no, &o_with);
    cos.iter().sum::<f64>() / cos.len().max(1) as f64
}

/// Importance of one layer: mean over probes and noisy rows of
/// `1 - cosine` between the layer's attention output with and without
/// context keys. Probes run through the joint-attention baseline so the
/// measurement reflects the conditioning pathway, not the current mode.
pub fn block_importance(
    model: &Model,
    probes: &[DiffusionState],
    layer: usize,
) -> Result<f64> {
    if probes.is_empty() {
        return Err(CoreError::Invalid("block_importance needs probes".into()));
    }
    let mut acc = 0.0;
    for p in probes {
        acc += probe_importance(model, p, layer)?;
    }
    Ok(acc / probes.len() as f64)
}

/// [`block_importance`] for every layer, with raw per-probe cosines kept.
pub fn bi_report(model: &Model, probes: &[DiffusionState]) -> Result<BiReport> {
    if probes.is_empty() {
        return Err(CoreError::Invalid("bi_report needs probes".into()));
    }
    let layers = model.cfg.layers;
    let mut per_probe = vec![Vec::with_capacity(probes.len()); layers];
    for (l, slot) in per_probe.iter_mut().enumerate() {
        for p in probes {
            let qkv = model.probe_layer_qkv(p, l)?;
            slot.push(probe_cosine(&qkv, model.cfg.heads));
        }
    }
    let mean_cosine: Vec<f64> = per_probe
        .iter()
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let bi = mean_cosine.iter().map(|c| 1.0 - c).collect();
    Ok(BiReport {
        bi,
        mean_cosine,
        per_probe,
        probes: probes.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn entry(k: usize, d: usize) -> CacheEntry {
        CacheEntry {
            k: Tensor::zeros(vec![k, d]),
            v: Tensor::zeros(vec![k, d]),
            sel: SelectionResult::keep_all(k),
            step: 0,
            ctx_out: Tensor::zeros(vec![k, d]),
        }
    }

    #[test]
    fn layer_plan_validation() {
        assert!(LayerPlan::new(vec![0, 2], 4).is_ok());
        assert!(LayerPlan::new(vec![1, 2], 4).is_err()); // missing layer 0
        assert!(LayerPlan::new(vec![0, 4], 4).is_err()); // out of range
        assert!(LayerPlan::new(vec![0, 2, 2], 4).is_err()); // duplicate
        assert!(LayerPlan::new(vec![], 4).is_err());
        let all = LayerPlan::all(3);
        assert_eq!(all.active(), &[0, 1, 2]);
        assert_eq!(all.l_s(), 3);
        assert!(all.contains(2) && !all.contains(3));
    }

    #[test]
    fn choose_layers_hand_case() {
        let report = BiReport {
            bi: vec![0.1, 0.9, 0.2, 0.8],
            mean_cosine: vec![0.9, 0.1, 0.8, 0.2],
            per_probe: vec![vec![]; 4],
            probes: 0,
        };
        let plan = choose_layers(&report, 2).unwrap();
        assert_eq!(plan.active(), &[0, 1, 3]);
    }

    #[test]
    fn choose_layers_includes_zero_even_when_low() {
        // Layer 0 scores worst but must still be active.
        let report = BiReport {
            bi: vec![0.01, 0.5, 0.6],
            mean_cosine: vec![],
            per_probe: vec![],
            probes: 0,
        };
        let plan = choose_layers(&report, 1).unwrap();
        assert_eq!(plan.active(), &[0, 2]);
    }

    #[test]
    fn choose_layers_full_extra_activates_everything() {
        let report = BiReport {
            bi: vec![0.3, 0.2, 0.1, 0.4],
            mean_cosine: vec![],
            per_probe: vec![],
            probes: 0,
        };
        let plan = choose_layers(&report, 3).unwrap();
        assert_eq!(plan.active(), &[0, 1, 2, 3]);
        assert!(choose_layers(&report, 4).is_err());
    }

    #[test]
    fn choose_layers_ties_prefer_lower_index() {
        let report = BiReport {
            bi: vec![0.0, 0.5, 0.5, 0.5],
            mean_cosine: vec![],
            per_probe: vec![],
            probes: 0,
        };
        let plan = choose_layers(&report, 2).unwrap();
        assert_eq!(plan.active(), &[0, 1, 2]);
    }

    #[test]
    fn choose_layers_matches_sort_oracle_on_random_scores() {
        let mut rng = Rng::new(40);
        for _ in 0..200 {
            let l = 2 + rng.below(7);
            let bi: Vec<f64> = (0..l).map(|_| rng.next_f64()).collect();
            let extra = rng.below(l);
            let report = BiReport {
                bi: bi.clone(),
                mean_cosine: vec![],
                per_probe: vec![],
                probes: 0,
            };
            let plan = choose_layers(&report, extra).unwrap();

            let mut idx: Vec<usize> = (1..l).collect();
            idx.sort_by(|&a, &b| bi[b].partial_cmp(&bi[a]).unwrap().then(a.cmp(&b)));
            let mut want: Vec<usize> = std::iter::once(0)
                .chain(idx[..extra].iter().copied())
                .collect();
            want.sort_unstable();
            assert_eq!(plan.active(), &want[..]);
        }
    }

    #[test]
    fn cache_populate_then_read_back() {
        let mut c = SessionCache::new(4, &[0, 2]).unwrap();
        assert!(!c.is_populated(0));
        c.populate(0, entry(3, 2)).unwrap();
        assert!(c.is_populated(0));
        let e = c.lookup(0).unwrap();
        assert_eq!(e.k.shape(), &[3, 2]);
        // reads are stable: same bits every time
        let k1 = c.lookup(0).unwrap().k.clone();
        let k2 = c.lookup(0).unwrap().k.clone();
        assert!(k1.bit_eq(&k2));
    }

    #[test]
    fn cache_double_populate_is_protocol_error() {
        let mut c = SessionCache::new(2, &[0]).unwrap();
        c.populate(0, entry(1, 2)).unwrap();
        let err = c.populate(0, entry(1, 2)).unwrap_err();
        assert!(matches!(err, CoreError::Protocol(_)));
    }

    #[test]
    fn cache_rejects_inactive_layer_and_missing_lookup() {
        let mut c = SessionCache::new(3, &[0]).unwrap();
        assert!(matches!(
            c.populate(1, entry(1, 2)),
            Err(CoreError::Protocol(_))
        ));
        assert!(matches!(c.lookup(0), Err(CoreError::Protocol(_))));
        assert!(matches!(c.lookup(9), Err(CoreError::Protocol(_))));
    }

    #[test]
    fn row_cosines_known_geometry() {
        let a = Mat::from_vec(3, 2, vec![1., 0., 1., 0., 0., 0.]);
        let b = Mat::from_vec(3, 2, vec![1., 0., 0., 1., 0., 0.]);
        let cos = row_cosines(&a, &b);
        assert!((cos[0] - 1.0).abs() < 1e-12); // identical
        assert!(cos[1].abs() < 1e-12); // orthogonal
        assert!((cos[2] - 1.0).abs() < 1e-12); // both zero
    }

    #[test]
    fn antipodal_outputs_score_two() {
        // bi = 1 - cos = 2 when outputs flip sign row by row.
        let a = Mat::from_vec(2, 3, vec![1., 2., -1., 0.5, 0., 3.]);
        let b = a.scale(-1.0);
        let cos = row_cosines(&a, &b);
        let bi = 1.0 - cos.iter().sum::<f64>() / cos.len() as f64;
        assert!((bi - 2.0).abs() < 1e-12);
    }
}
