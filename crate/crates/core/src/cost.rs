//! Analytic attention-interaction cost model and the measured counter.
//!
//! The cost unit is one query–key interaction: an attention call with m
//! queries and n keys costs m·n, counted once per logical call (heads split
//! features, not token pairs, so they do not multiply the count).
//! Projection and MLP matmuls are tallied separately as FLOPs for context;
//! they are not part of the interaction count.

use crate::model::Mode;
use crate::selection::keep_count;
use crate::{CoreError, Result};

/// Running tally kept by instrumented forward passes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InteractionCounter {
    /// Query–key interactions across all attention calls.
    pub attn_pairs: u64,
    /// 2·m·k·n per projection/MLP matmul (informational).
    pub proj_flops: u64,
}

impl InteractionCounter {
    pub fn record_attention(&mut self, m: usize, n: usize) {
        self.attn_pairs += (m as u64) * (n as u64);
    }

    pub fn record_matmul(&mut self, m: usize, k: usize, n: usize) {
        self.proj_flops += 2 * (m as u64) * (k as u64) * (n as u64);
    }

    pub fn add(&mut self, other: &InteractionCounter) {
        self.attn_pairs += other.attn_pairs;
        self.proj_flops += other.proj_flops;
    }
}

/// Scenario parameters for the analytic model. Token counts are in any
/// consistent unit (frames or tokens): every cost is a quadratic form in
/// them, so ratios are unit-free.
#[derive(Debug, Clone, Copy)]
pub struct CostSpec {
    /// Sampling steps.
    pub t: u64,
    /// Transformer layers.
    pub l: u64,
    /// Layers that process context when layer skipping is on.
    pub l_s: u64,
    /// Noisy tokens.
    pub n_x: u64,
    /// Context tokens.
    pub n_c: u64,
    /// Selection keep ratio, in (0, 1].
    pub ratio: f64,
}

impl CostSpec {
    /// Reference video-generation scenario: 30 steps, 28 layers, 5 of them
    /// processing context, context twice the noisy length, half kept.
    pub fn reference() -> Self {
        CostSpec {
            t: 30,
            l: 28,
            l_s: 5,
            n_x: 1,
            n_c: 2,
            ratio: 0.5,
        }
    }

    /// Scenario matching one model configuration and step count.
    pub fn for_model(cfg: &crate::model::ModelConfig, steps: usize) -> Self {
        CostSpec {
            t: steps as u64,
            l: cfg.layers as u64,
            l_s: cfg.plan.l_s() as u64,
            n_x: cfg.n_z as u64,
            n_c: cfg.n_c() as u64,
            ratio: cfg.ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.l == 0 || self.n_x == 0 {
            return Err(CoreError::Config(
                "cost spec needs t ≥ 1, l ≥ 1, n_x ≥ 1".into(),
            ));
        }
        if self.l_s == 0 || self.l_s > self.l {
            return Err(CoreError::Config(format!(
                "l_s must be in 1..=l, got {} of {}",
                self.l_s, self.l
            )));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(CoreError::Config(format!(
                "selection ratio must be in (0, 1], got {}",
                self.ratio
            )));
        }
        Ok(())
    }

    /// Context tokens kept by selection at this ratio.
    pub fn kept(&self) -> u64 {
        keep_count(self.n_c as usize, self.ratio) as u64
    }
}

/// Interaction count of one full sampling run under `mode`.
pub fn analytic_interactions(spec: &CostSpec, mode: Mode) -> Result<u64> {
    spec.validate()?;
    let t = spec.t as u128;
    let l = spec.l as u128;
    let l_s = spec.l_s as u128;
    let n_x = spec.n_x as u128;
    let n_c = spec.n_c as u128;
    // Selection changes the kept count only where it runs.
    let k = if mode.dts() { spec.kept() as u128 } else { n_c };

    // Per-layer building blocks.
    let joint = |m: u128| m * m; // one joint attention call
    let self_only = n_x * n_x; // noisy-only layer
    let split_first = k * k + n_x * (n_x + k); // decoupled, cache being built
    let split_cached = n_x * (n_x + k); // decoupled, context K/V reused

    let total: u128 = match mode {
        Mode::NoCondition => t * l * self_only,
        Mode::BaselineIcc => t * l * joint(n_x + n_c),
        Mode::DtsOnly => t * l * joint(n_x + k),
        Mode::StepCacheOnly => l * split_first + (t - 1) * l * split_cached,
        Mode::LayerCacheOnly => t * (l_s * joint(n_x + n_c) + (l - l_s) * self_only),
        Mode::FullDit2 | Mode::NoDts => {
            let step0 = l_s * split_first + (l - l_s) * self_only;
            let later = l_s * split_cached + (l - l_s) * self_only;
            step0 + (t - 1) * later
        }
        Mode::NoStepCache => t * (l_s * split_first + (l - l_s) * self_only),
        Mode::NoLayerCache => l * split_first + (t - 1) * l * split_cached,
    };
    u64::try_from(total)
        .map_err(|_| CoreError::Invalid("interaction count overflows u64".into()))
}

/// Speedup of `mode` over the joint-attention baseline.
pub fn speedup_vs_baseline(spec: &CostSpec, mode: Mode) -> Result<f64> {
    let base = analytic_interactions(spec, Mode::BaselineIcc)?;
    let cost = analytic_interactions(spec, mode)?;
    Ok(base as f64 / cost as f64)
}

/// (mode, interactions, speedup-vs-baseline) rows for a list of modes.
pub fn cost_table(spec: &CostSpec, modes: &[Mode]) -> Result<Vec<(Mode, u64, f64)>> {
    modes
        .iter()
        .map(|&m| {
            let n = analytic_interactions(spec, m)?;
            let s = speedup_vs_baseline(spec, m)?;
            Ok((m, n, s))
        })
        .collect()
}

/// Cost tables across a range of noisy-token counts (scaling sweep).
pub fn sweep_n_x(
    spec: &CostSpec,
    modes: &[Mode],
    n_x_values: &[u64],
) -> Result<Vec<(u64, Vec<(Mode, u64, f64)>)>> {
    n_x_values
        .iter()
        .map(|&n_x| {
            let s = CostSpec { n_x, ..*spec };
            Ok((n_x, cost_table(&s, modes)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn all_costs(spec: &CostSpec) -> Vec<u64> {
        Mode::ALL
            .iter()
            .map(|&m| analytic_interactions(spec, m).unwrap())
            .collect()
    }

    #[test]
    fn reference_scenario_interaction_counts() {
        let spec = CostSpec::reference();
        let want: [(Mode, u64); 9] = [
            (Mode::NoCondition, 840),
            (Mode::BaselineIcc, 7560),
            (Mode::DtsOnly, 3360),
            (Mode::StepCacheOnly, 2632),
            (Mode::LayerCacheOnly, 2040),
            (Mode::FullDit2, 995),
            (Mode::NoDts, 1160),
            (Mode::NoStepCache, 1140),
            (Mode::NoLayerCache, 1708),
        ];
        for (mode, count) in want {
            assert_eq!(
                analytic_interactions(&spec, mode).unwrap(),
                count,
                "interaction count for {}",
                mode.name()
            );
        }
    }

    #[test]
    fn reference_scenario_speedups() {
        let spec = CostSpec::reference();
        let want: [(Mode, f64); 9] = [
            (Mode::NoCondition, 9.0),
            (Mode::BaselineIcc, 1.0),
            (Mode::DtsOnly, 2.25),
            (Mode::StepCacheOnly, 7560.0 / 2632.0),
            (Mode::LayerCacheOnly, 7560.0 / 2040.0),
            (Mode::FullDit2, 7560.0 / 995.0),
            (Mode::NoDts, 7560.0 / 1160.0),
            (Mode::NoStepCache, 7560.0 / 1140.0),
            (Mode::NoLayerCache, 7560.0 / 1708.0),
        ];
        for (mode, s) in want {
            let got = speedup_vs_baseline(&spec, mode).unwrap();
            assert!(
                (got - s).abs() < 1e-12,
                "speedup for {}: got {got}, want {s}",
                mode.name()
            );
        }
        // Rounded to two decimals these are the headline factors.
        assert!((speedup_vs_baseline(&spec, Mode::FullDit2).unwrap() - 7.60).abs() < 0.005);
        assert!((speedup_vs_baseline(&spec, Mode::LayerCacheOnly).unwrap() - 3.71).abs() < 0.005);
    }

    #[test]
    fn desk_scale_interaction_counts() {
        // Matches the instrumented model at its default test shape.
        let spec = CostSpec {
            t: 8,
            l: 4,
            l_s: 2,
            n_x: 16,
            n_c: 32,
            ratio: 0.5,
        };
        let want: [(Mode, u64); 9] = [
            (Mode::NoCondition, 8192),
            (Mode::BaselineIcc, 73728),
            (Mode::DtsOnly, 32768),
            (Mode::StepCacheOnly, 28672),
            (Mode::LayerCacheOnly, 40960),
            (Mode::FullDit2, 12800),
            (Mode::NoDts, 18432),
            (Mode::NoStepCache, 16384),
            (Mode::NoLayerCache, 17408),
        ];
        for (mode, count) in want {
            assert_eq!(
                analytic_interactions(&spec, mode).unwrap(),
                count,
                "interaction count for {}",
                mode.name()
            );
        }
    }

    #[test]
    fn single_step_single_layer_by_hand() {
        // T=1, L=L_s=1, n_x=2, n_c=3, ratio=0.5 → k=1.
        let spec = CostSpec {
            t: 1,
            l: 1,
            l_s: 1,
            n_x: 2,
            n_c: 3,
            ratio: 0.5,
        };
        assert_eq!(analytic_interactions(&spec, Mode::NoCondition).unwrap(), 4);
        assert_eq!(analytic_interactions(&spec, Mode::BaselineIcc).unwrap(), 25);
        assert_eq!(analytic_interactions(&spec, Mode::DtsOnly).unwrap(), 9);
        // Decoupled with all context: 3² + 2·5 = 19; one step, nothing cached yet.
        assert_eq!(analytic_interactions(&spec, Mode::StepCacheOnly).unwrap(), 19);
        assert_eq!(analytic_interactions(&spec, Mode::LayerCacheOnly).unwrap(), 25);
        // Decoupled with k=1: 1² + 2·3 = 7.
        assert_eq!(analytic_interactions(&spec, Mode::FullDit2).unwrap(), 7);
        assert_eq!(analytic_interactions(&spec, Mode::NoDts).unwrap(), 19);
        assert_eq!(analytic_interactions(&spec, Mode::NoStepCache).unwrap(), 7);
        assert_eq!(analytic_interactions(&spec, Mode::NoLayerCache).unwrap(), 7);
    }

    #[test]
    fn degenerate_parameters_collapse_modes_into_each_other() {
        let mut rng = Rng::new(11);
        for _ in 0..50 {
            let spec = CostSpec {
                t: 1 + rng.below(20) as u64,
                l: 1 + rng.below(12) as u64,
                l_s: 1,
                n_x: 1 + rng.below(40) as u64,
                n_c: rng.below(40) as u64,
                ratio: 0.05 + 0.95 * rng.next_f64(),
            };
            let spec = CostSpec {
                l_s: 1 + rng.below(spec.l as usize) as u64,
                ..spec
            };
            // Keeping everything makes selection a no-op.
            let r1 = CostSpec { ratio: 1.0, ..spec };
            assert_eq!(
                analytic_interactions(&r1, Mode::DtsOnly).unwrap(),
                analytic_interactions(&r1, Mode::BaselineIcc).unwrap()
            );
            assert_eq!(
                analytic_interactions(&r1, Mode::FullDit2).unwrap(),
                analytic_interactions(&spec, Mode::NoDts).unwrap()
            );
            // Activating every layer makes layer skipping a no-op.
            let full_depth = CostSpec { l_s: spec.l, ..spec };
            assert_eq!(
                analytic_interactions(&full_depth, Mode::LayerCacheOnly).unwrap(),
                analytic_interactions(&full_depth, Mode::BaselineIcc).unwrap()
            );
            assert_eq!(
                analytic_interactions(&full_depth, Mode::NoDts).unwrap(),
                analytic_interactions(&full_depth, Mode::StepCacheOnly).unwrap()
            );
            assert_eq!(
                analytic_interactions(&full_depth, Mode::FullDit2).unwrap(),
                analytic_interactions(&full_depth, Mode::NoLayerCache).unwrap()
            );
            // No context collapses every mode onto the unconditional cost.
            let bare = CostSpec { n_c: 0, ..spec };
            for mode in Mode::ALL {
                assert_eq!(
                    analytic_interactions(&bare, mode).unwrap(),
                    analytic_interactions(&bare, Mode::NoCondition).unwrap(),
                    "{} at n_c=0",
                    mode.name()
                );
            }
        }
    }

    #[test]
    fn reference_scenario_cost_ordering() {
        // The combination beats every ablation; each ablation beats the
        // baseline. Note the two middle ablations land in this order by
        // the formulas themselves (1140 for no_step_cache, 1160 for
        // no_dts at these parameters).
        let c = all_costs(&CostSpec::reference());
        let [no_cond, baseline, dts, step, layer, full, no_dts, no_step, no_layer] =
            <[u64; 9]>::try_from(c).unwrap();
        assert!(no_cond < full);
        assert!(full < no_step);
        assert!(no_step < no_dts);
        assert!(no_dts < no_layer);
        assert!(no_layer < baseline);
        for single in [dts, step, layer] {
            assert!(full < single && single < baseline);
        }
    }

    #[test]
    fn costs_are_monotone_in_every_parameter() {
        let mut rng = Rng::new(23);
        for _ in 0..200 {
            let spec = CostSpec {
                t: 1 + rng.below(16) as u64,
                l: 2 + rng.below(10) as u64,
                l_s: 0,
                n_x: 1 + rng.below(30) as u64,
                n_c: rng.below(30) as u64,
                ratio: [0.25, 0.5, 0.75, 1.0][rng.below(4)],
            };
            let spec = CostSpec {
                l_s: 1 + rng.below(spec.l as usize - 1) as u64,
                ..spec
            };
            let bumps = [
                CostSpec { t: spec.t + 1, ..spec },
                CostSpec { l: spec.l + 1, ..spec },
                CostSpec { l_s: spec.l_s + 1, ..spec },
                CostSpec { n_x: spec.n_x + 1, ..spec },
                CostSpec { n_c: spec.n_c + 1, ..spec },
            ];
            for mode in Mode::ALL {
                let base = analytic_interactions(&spec, mode).unwrap();
                for bumped in &bumps {
                    let c = analytic_interactions(bumped, mode).unwrap();
                    assert!(
                        c >= base,
                        "{}: cost fell from {base} to {c} going {spec:?} → {bumped:?}",
                        mode.name()
                    );
                }
            }
        }
    }

    #[test]
    fn sweep_covers_requested_range() {
        let spec = CostSpec::reference();
        let xs: Vec<u64> = (1..=6).collect();
        let sweep = sweep_n_x(&spec, &[Mode::BaselineIcc, Mode::FullDit2], &xs).unwrap();
        assert_eq!(sweep.len(), 6);
        for (n_x, rows) in &sweep {
            assert_eq!(rows.len(), 2);
            let direct = analytic_interactions(&CostSpec { n_x: *n_x, ..spec }, Mode::FullDit2)
                .unwrap();
            assert_eq!(rows[1].1, direct);
        }
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let ok = CostSpec::reference();
        assert!(ok.validate().is_ok());
        assert!(CostSpec { t: 0, ..ok }.validate().is_err());
        assert!(CostSpec { l_s: 0, ..ok }.validate().is_err());
        assert!(CostSpec { l_s: 99, ..ok }.validate().is_err());
        assert!(CostSpec { n_x: 0, ..ok }.validate().is_err());
        assert!(CostSpec { ratio: 0.0, ..ok }.validate().is_err());
        assert!(CostSpec { ratio: 1.5, ..ok }.validate().is_err());
    }

    #[test]
    fn counter_records_pairs_and_flops() {
        let mut c = InteractionCounter::default();
        c.record_attention(3, 5);
        c.record_attention(2, 2);
        c.record_matmul(2, 3, 4);
        assert_eq!(c.attn_pairs, 19);
        assert_eq!(c.proj_flops, 48);
        let mut total = InteractionCounter::default();
        total.add(&c);
        total.add(&c);
        assert_eq!(total.attn_pairs, 38);
    }
}
