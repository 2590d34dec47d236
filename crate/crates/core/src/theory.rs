//! Executable checks of the soft-vs-hard reconstruction bound, the expected
//! length bound and routing agreement saturation.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capsule::CapsuleStack;
use crate::error::{Error, Result};
use crate::linalg::{axpy, norm, sub};
use crate::routing::{
    route_layer_with, tokenize_batch_traced, ItemVector, RoutingConfig, SemanticId,
};

/// Slack allowed before a bound check counts as violated.
pub const BOUND_SLACK: f64 = 1e-9;

/// Soft-vs-hard reconstruction bound evaluated on one batch.
///
/// Reconstructions live in capsule space: the soft one sums the routed
/// outputs `Σ_k c_k o_k` over visited depths, the hard one sums the winners'
/// centers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionBoundReport {
    /// Largest `‖o_ℓk − c_ℓk‖` over items, visited depths and capsules.
    pub delta: f64,
    /// Largest center norm over visited depths.
    pub center_norm: f64,
    pub lhs: Vec<f64>,
    /// `L δ + 2 C Σ_ℓ (1 − w_ℓ)` per item.
    pub rhs: Vec<f64>,
    pub mean_winner_mass: f64,
    pub violations: usize,
}

impl ReconstructionBoundReport {
    pub fn max_gap(&self) -> f64 {
        self.lhs
            .iter()
            .zip(&self.rhs)
            .map(|(l, r)| l - r)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "reconstruction_items={}", self.lhs.len());
        let _ = writeln!(out, "reconstruction_delta={}", self.delta);
        let _ = writeln!(out, "reconstruction_center_norm={}", self.center_norm);
        let _ = writeln!(
            out,
            "reconstruction_mean_winner_mass={}",
            self.mean_winner_mass
        );
        let _ = writeln!(out, "reconstruction_max_lhs_minus_rhs={}", self.max_gap());
        let _ = writeln!(out, "reconstruction_violations={}", self.violations);
        out
    }
}

pub fn check_reconstruction_bound(
    items: &[ItemVector],
    stack: &CapsuleStack,
    cfg: &RoutingConfig,
) -> Result<ReconstructionBoundReport> {
    let traced = tokenize_batch_traced(items, stack, cfg)?;
    let per_item: Vec<(f64, f64)> = traced
        .par_iter()
        .map(|(_, traces)| {
            let mut delta = 0.0_f64;
            let mut c_max = 0.0_f64;
            for (depth, t) in traces.iter().enumerate() {
                let centers = &stack.layers[depth].centers;
                for (o, c) in t.capsule_outputs.iter().zip(centers) {
                    delta = delta.max(norm(&sub(o, c)));
                    c_max = c_max.max(norm(c));
                }
            }
            (delta, c_max)
        })
        .collect();
    let delta = per_item.iter().map(|p| p.0).fold(0.0, f64::max);
    let center_norm = per_item.iter().map(|p| p.1).fold(0.0, f64::max);

    let mut lhs = Vec::with_capacity(traced.len());
    let mut rhs = Vec::with_capacity(traced.len());
    let (mut mass_sum, mut mass_n) = (0.0, 0usize);
    for (_, traces) in &traced {
        let dc = stack.capsule_dim();
        let mut gap = vec![0.0; dc];
        let mut lost_mass = 0.0;
        for (depth, t) in traces.iter().enumerate() {
            axpy(1.0, &t.routed_output(), &mut gap);
            axpy(-1.0, &stack.layers[depth].centers[t.token], &mut gap);
            lost_mass += 1.0 - t.weights[t.token];
            mass_sum += t.weights[t.token];
            mass_n += 1;
        }
        lhs.push(norm(&gap));
        rhs.push(traces.len() as f64 * delta + 2.0 * center_norm * lost_mass);
    }
    let violations = lhs
        .iter()
        .zip(&rhs)
        .filter(|(l, r)| **l > **r + BOUND_SLACK)
        .count();
    Ok(ReconstructionBoundReport {
        delta,
        center_norm,
        lhs,
        rhs,
        mean_winner_mass: mass_sum / mass_n as f64,
        violations,
    })
}

/// Expected-length bound from per-depth stop rates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthBoundReport {
    /// Share of items stopping at depth `ℓ` among those reaching it, for any
    /// cause; `None` without support. Index 0 is depth 1.
    pub stop_rates: Vec<Option<f64>>,
    /// Minimum stop rate over depths `≥ 2` with support.
    pub g_hat: Option<f64>,
    pub mean_length: f64,
    /// `min(L_max, 1 + 1/ĝ)`, or `L_max` when `ĝ` is zero or undefined.
    pub bound: f64,
    /// `1 + Σ_{ℓ=2}^{L_max} (1 − ĝ)^{ℓ−2}`, never looser than `bound`.
    pub geometric_bound: f64,
    /// Half-width of the 95% bootstrap interval of the mean length.
    pub bootstrap_half_width: f64,
    pub num_bootstrap: usize,
}

impl LengthBoundReport {
    pub fn holds(&self) -> bool {
        self.mean_length <= self.bound + self.bootstrap_half_width
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| x.to_string());
        let _ = writeln!(out, "length_bound_g_hat={}", opt(self.g_hat));
        let _ = writeln!(out, "length_bound_mean_length={}", self.mean_length);
        let _ = writeln!(out, "length_bound_upper={}", self.bound);
        let _ = writeln!(out, "length_bound_geometric_bound={}", self.geometric_bound);
        let _ = writeln!(
            out,
            "length_bound_bootstrap_half_width={}",
            self.bootstrap_half_width
        );
        let _ = writeln!(out, "length_bound_holds={}", self.holds());
        for (i, r) in self.stop_rates.iter().enumerate() {
            let _ = writeln!(out, "length_bound_stop_rate_depth_{}={}", i + 1, opt(*r));
        }
        out
    }
}

pub fn check_length_bound(
    sids: &[SemanticId],
    max_depth: usize,
    num_bootstrap: usize,
    seed: u64,
) -> Result<LengthBoundReport> {
    if sids.is_empty() {
        return Err(Error::Empty("SID set"));
    }
    if let Some(bad) = sids.iter().find(|s| s.is_empty() || s.len() > max_depth) {
        return Err(Error::invalid(format!(
            "SID length {} outside 1..={max_depth}",
            bad.len()
        )));
    }
    let stop_rates: Vec<Option<f64>> = (1..=max_depth)
        .map(|depth| {
            let reached = sids.iter().filter(|s| s.len() >= depth).count();
            let stopped = sids.iter().filter(|s| s.len() == depth).count();
            (reached > 0).then(|| stopped as f64 / reached as f64)
        })
        .collect();
    let g_hat = stop_rates
        .iter()
        .skip(1)
        .flatten()
        .copied()
        .reduce(f64::min);
    let l_max = max_depth as f64;
    let bound = match g_hat {
        Some(g) if g > 0.0 => l_max.min(1.0 + 1.0 / g),
        _ => l_max,
    };
    let geometric_bound = match g_hat {
        Some(g) => {
            1.0 + (2..=max_depth)
                .map(|l| (1.0 - g).powi(l as i32 - 2))
                .sum::<f64>()
        }
        None => 1.0,
    };
    let lengths: Vec<f64> = sids.iter().map(|s| s.len() as f64).collect();
    let n = lengths.len();
    let mean_length = lengths.iter().sum::<f64>() / n as f64;

    let bootstrap_half_width = if num_bootstrap == 0 {
        0.0
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut means: Vec<f64> = (0..num_bootstrap)
            .map(|_| (0..n).map(|_| lengths[rng.random_range(0..n)]).sum::<f64>() / n as f64)
            .collect();
        means.sort_by(f64::total_cmp);
        let at = |q: f64| {
            means[((q * (num_bootstrap - 1) as f64).round() as usize).min(num_bootstrap - 1)]
        };
        0.5 * (at(0.975) - at(0.025))
    };
    Ok(LengthBoundReport {
        stop_rates,
        g_hat,
        mean_length,
        bound,
        geometric_bound,
        bootstrap_half_width,
        num_bootstrap,
    })
}

/// Depth-1 winner mass across routing iterations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingAgreementReport {
    /// Batch mean of `max_k c_k^{(t)}` for `t = 1..=T`.
    pub mean_winner_mass: Vec<f64>,
    /// Share of items whose trajectory never decreases.
    pub non_decreasing_fraction: f64,
}

impl RoutingAgreementReport {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (t, m) in self.mean_winner_mass.iter().enumerate() {
            let _ = writeln!(out, "agreement_winner_mass_iter_{}={m}", t + 1);
        }
        let _ = writeln!(
            out,
            "agreement_non_decreasing_fraction={}",
            self.non_decreasing_fraction
        );
        out
    }
}

pub fn check_routing_agreement(
    items: &[ItemVector],
    stack: &CapsuleStack,
    cfg: &RoutingConfig,
) -> Result<RoutingAgreementReport> {
    if items.is_empty() {
        return Err(Error::Empty("item batch"));
    }
    cfg.validate(stack)?;
    let layer = &stack.layers[0];
    let trajectories: Vec<Result<Vec<f64>>> = items
        .par_iter()
        .map(|x| Ok(route_layer_with(&x.unit()?, layer, cfg.iterations, cfg.mode)?.winner_mass))
        .collect();
    let mut sums = vec![0.0; cfg.iterations];
    let mut monotone = 0usize;
    for (index, t) in trajectories.into_iter().enumerate() {
        let t = t.map_err(|e| Error::Item {
            index,
            source: Box::new(e),
        })?;
        for (s, w) in sums.iter_mut().zip(&t) {
            *s += w;
        }
        monotone += t.windows(2).all(|w| w[1] >= w[0]) as usize;
    }
    let n = items.len() as f64;
    Ok(RoutingAgreementReport {
        mean_winner_mass: sums.into_iter().map(|s| s / n).collect(),
        non_decreasing_fraction: monotone as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::capsule::StackShape;
    use crate::linalg::Matrix;
    use crate::routing::{squash, RoutingMode, StopCause};
    use rand::Rng;

    fn random_items(n: usize, d: usize, seed: u64) -> Vec<ItemVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| ItemVector::new((0..d).map(|_| rng.random_range(-1.0f64..1.0)).collect()))
            .collect()
    }

    fn sid(len: usize, cause: StopCause) -> SemanticId {
        SemanticId {
            tokens: vec![0; len],
            confidences: vec![0.5; len],
            stop_cause: cause,
        }
    }

    #[test]
    fn one_hot_corner_is_tight() {
        let mut stack = CapsuleStack::random(&StackShape::uniform(4, 4, 3, 2), 1).unwrap();
        for layer in &mut stack.layers {
            for (k, w) in layer.pose.iter_mut().enumerate() {
                *w = Matrix::zeros(4, 4);
                layer.bias[k] = vec![0.3 * (k as f64 + 1.0), -0.2, 0.1, 0.0];
                layer.centers[k] = squash(&layer.bias[k]).unwrap();
            }
        }
        let cfg = RoutingConfig {
            tau: 0.99,
            epsilon: 0.0,
            max_depth: 2,
            mode: RoutingMode::OneHot,
            ..RoutingConfig::default()
        };
        let report = check_reconstruction_bound(&random_items(20, 4, 2), &stack, &cfg).unwrap();
        assert_eq!(report.violations, 0);
        assert_eq!(report.delta, 0.0);
        for (l, r) in report.lhs.iter().zip(&report.rhs) {
            assert!((l - r).abs() <= 1e-9);
        }
    }

    #[test]
    fn reconstruction_rejects_empty_batch() {
        let stack = CapsuleStack::random(&StackShape::uniform(2, 2, 2, 1), 0).unwrap();
        let cfg = RoutingConfig {
            max_depth: 1,
            ..RoutingConfig::default()
        };
        assert!(check_reconstruction_bound(&[], &stack, &cfg).is_err());
    }

    #[test]
    fn length_bound_examples() {
        let ones = vec![sid(1, StopCause::Confidence); 10];
        let r = check_length_bound(&ones, 4, 100, 0).unwrap();
        assert_eq!(r.g_hat, None);
        assert_eq!(r.mean_length, 1.0);
        assert!(r.holds());

        let twos = vec![sid(2, StopCause::Residual); 10];
        let r = check_length_bound(&twos, 4, 100, 0).unwrap();
        assert_eq!(r.g_hat, Some(1.0));
        assert_eq!(r.bound, 2.0);
        assert_eq!(r.bootstrap_half_width, 0.0);

        let capped = vec![sid(3, StopCause::Cap); 5];
        let r = check_length_bound(&capped, 3, 10, 0).unwrap();
        assert_eq!(r.g_hat, Some(0.0));
        assert_eq!(r.bound, 3.0);
        assert!(check_length_bound(&[], 3, 10, 0).is_err());

        let mut mixed = vec![sid(2, StopCause::Confidence); 5];
        mixed.extend(vec![sid(3, StopCause::Cap); 5]);
        let r = check_length_bound(&mixed, 3, 10, 0).unwrap();
        assert_eq!(r.stop_rates, vec![Some(0.0), Some(0.5), Some(1.0)]);
        assert_eq!(r.g_hat, Some(0.5));
        assert_eq!(r.mean_length, 2.5);
        assert_eq!(r.geometric_bound, 2.5);
        assert_eq!(r.bound, 3.0);
    }

    #[test]
    fn agreement_single_capsule_is_flat() {
        let stack = CapsuleStack::random(&StackShape::uniform(3, 3, 1, 1), 0).unwrap();
        let cfg = RoutingConfig {
            iterations: 4,
            max_depth: 1,
            ..RoutingConfig::default()
        };
        let r = check_routing_agreement(&random_items(5, 3, 0), &stack, &cfg).unwrap();
        assert_eq!(r.mean_winner_mass, vec![1.0; 4]);
        assert_eq!(r.non_decreasing_fraction, 1.0);
    }

    #[test]
    fn agreement_single_iteration_is_uniform() {
        let stack = CapsuleStack::random(&StackShape::uniform(3, 3, 4, 1), 0).unwrap();
        let cfg = RoutingConfig {
            iterations: 1,
            max_depth: 1,
            ..RoutingConfig::default()
        };
        let r = check_routing_agreement(&random_items(5, 3, 0), &stack, &cfg).unwrap();
        assert_eq!(r.mean_winner_mass.len(), 1);
        assert!((r.mean_winner_mass[0] - 0.25).abs() < 1e-15);
        assert_eq!(r.non_decreasing_fraction, 1.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn reconstruction_never_violated(
            d in prop::sample::select(vec![2usize, 4, 8]),
            k in prop::sample::select(vec![2usize, 4]),
            depth in 1usize..=3,
            seed in any::<u64>(),
            tau in 0.0f64..0.99,
            one_hot in any::<bool>(),
        ) {
            let stack = CapsuleStack::random(&StackShape::uniform(d, d, k, depth), seed).unwrap();
            let cfg = RoutingConfig {
                tau,
                max_depth: depth,
                mode: if one_hot { RoutingMode::OneHot } else { RoutingMode::Soft },
                ..RoutingConfig::default()
            };
            let report = check_reconstruction_bound(&random_items(8, d, seed ^ 1), &stack, &cfg).unwrap();
            prop_assert_eq!(report.violations, 0);
        }

        #[test]
        fn length_bound_empirical_bound_is_exact(
            lens in prop::collection::vec((1usize..=5, 0usize..3), 1..60),
        ) {
            let sids: Vec<_> = lens
                .iter()
                .map(|&(l, c)| sid(l, if l == 5 { StopCause::Cap } else { StopCause::ALL[c.min(1)] }))
                .collect();
            let r = check_length_bound(&sids, 5, 0, 0).unwrap();
            prop_assert!(r.mean_length <= r.geometric_bound + 1e-12);
            prop_assert!(r.geometric_bound <= r.bound + 1e-12);
            if let Some(g) = r.g_hat {
                prop_assert!((0.0..=1.0).contains(&g));
            }
        }
    }
}
