use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::capsule::CapsuleStack;
use crate::error::{Error, Result};
use crate::linalg::axpy;
use crate::routing::{tokenize_batch, ItemVector, RoutingConfig};
use crate::sembpe::{collect_pair_stats, MergeGate, PairStats};

use super::grad::{evaluate_batch, StackGradient};
use super::loss::{LossContext, WarmupTargets};
use super::{EpochStats, LossWeights, TrainConfig};

/// Fitted parameters and the per-epoch loss history.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub stack: CapsuleStack,
    pub gate: Option<MergeGate>,
    pub history: Vec<EpochStats>,
}

fn validate(items: &[ItemVector], cfg: &TrainConfig) -> Result<()> {
    if items.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch size must be positive"));
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::invalid(
            "learning rate must be finite and non-negative",
        ));
    }
    if !(cfg.length_temperature > 0.0) {
        return Err(Error::invalid("surrogate temperature must be positive"));
    }
    Ok(())
}

fn apply_update(stack: &mut CapsuleStack, grad: &StackGradient, lr: f64) {
    let frozen = stack.centers_frozen;
    for (layer, g) in stack.layers.iter_mut().zip(&grad.layers) {
        for (w, gw) in layer.pose.iter_mut().zip(&g.pose) {
            axpy(-lr, gw.as_slice(), w.as_mut_slice());
        }
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            axpy(-lr, gb, b);
        }
        if let (Some(p), Some(gp)) = (&mut layer.up_projection, &g.up_projection) {
            axpy(-lr, gp.as_slice(), p.as_mut_slice());
        }
        if !frozen {
            for (c, gc) in layer.centers.iter_mut().zip(&g.centers) {
                axpy(-lr, gc, c);
            }
        }
    }
}

fn pair_stats(
    items: &[ItemVector],
    stack: &CapsuleStack,
    routing: &RoutingConfig,
) -> Result<PairStats> {
    let offsets = stack.code_offsets();
    let corpus: Vec<Vec<u32>> = tokenize_batch(items, stack, routing)?
        .iter()
        .map(|sid| sid.flat_tokens(&offsets))
        .collect();
    Ok(collect_pair_stats(&corpus))
}

/// Mini-batch SGD on the tokenizer objective. Centers follow an EMA of the
/// winning capsule outputs after every batch unless frozen. The merge gate is
/// trained only when supplied and `weights.bpe > 0`.
pub fn fit_tokenizer(
    items: &[ItemVector],
    mut stack: CapsuleStack,
    mut gate: Option<MergeGate>,
    routing: &RoutingConfig,
    cfg: &TrainConfig,
    weights: &LossWeights,
) -> Result<FitOutcome> {
    validate(items, cfg)?;
    routing.validate(&stack)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let batches_per_epoch = items.len().div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as f64;
    let mut step = 0usize;
    let mut history: Vec<EpochStats> = Vec::with_capacity(cfg.epochs);
    let n = items.len() as f64;

    for epoch in 0..cfg.epochs {
        let train_gate = gate.is_some() && weights.bpe > 0.0;
        let stats = if train_gate {
            Some(pair_stats(items, &stack, routing)?)
        } else {
            None
        };
        let margin = cfg.spread_margin.value(epoch);
        let theta = cfg.merge_threshold.value(epoch);
        order.shuffle(&mut rng);
        // Learning rate at the epoch's first step.
        let mut epoch_stats = EpochStats {
            epoch,
            learning_rate: 0.0,
            total: 0.0,
            reconstruction: 0.0,
            spread: 0.0,
            length: 0.0,
            bpe: 0.0,
        };
        for chunk in order.chunks(cfg.batch_size) {
            let lr = if cfg.cosine_decay {
                cfg.learning_rate
                    * 0.5
                    * (1.0 + (std::f64::consts::PI * step as f64 / total_steps).cos())
            } else {
                cfg.learning_rate
            };
            let batch: Vec<ItemVector> = chunk.iter().map(|&i| items[i].clone()).collect();
            let warmup = match (&gate, &stats) {
                (Some(g), Some(s)) => Some(WarmupTargets {
                    gate: g,
                    stats: s,
                    theta,
                    n_min: cfg.n_min,
                }),
                _ => None,
            };
            let ctx = LossContext {
                routing,
                length_temperature: cfg.length_temperature,
                spread_margin: margin,
                warmup,
            };
            let eval = match evaluate_batch(&batch, &stack, weights, &ctx) {
                Ok(e) if e.loss.total.is_finite() => e,
                Ok(_) | Err(Error::NonFiniteGradient(_)) => {
                    return Err(Error::Diverged { epoch, history })
                }
                Err(e) => return Err(e),
            };
            let share = batch.len() as f64 / n;
            epoch_stats.total += share * eval.loss.total;
            epoch_stats.reconstruction += share * eval.loss.reconstruction;
            epoch_stats.spread += share * eval.loss.spread;
            epoch_stats.length += share * eval.loss.length;
            epoch_stats.bpe += share * eval.loss.bpe;
            if epoch_stats.learning_rate == 0.0 {
                epoch_stats.learning_rate = lr;
            }
            apply_update(&mut stack, &eval.gradient, lr);
            if let (Some(g), Some(gg)) = (gate.as_mut(), eval.gradient.gate.as_ref()) {
                g.apply_gradient(gg, lr);
            }
            if !stack.centers_frozen {
                let decay = stack.ema_decay;
                for ((layer, sums), counts) in stack
                    .layers
                    .iter_mut()
                    .zip(&eval.center_sums)
                    .zip(&eval.center_counts)
                {
                    layer.ema_update(decay, sums, counts);
                }
            }
            step += 1;
        }
        history.push(epoch_stats);
    }
    Ok(FitOutcome {
        stack,
        gate,
        history,
    })
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::capsule::StackShape;

    fn cluster_items(n: usize, d: usize, seed: u64) -> Vec<ItemVector> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        (0..n)
            .map(|_| {
                ItemVector::new(
                    mean.iter()
                        .map(|m| m + rng.random_range(-0.1..0.1))
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let items = cluster_items(40, 4, 1);
        let mut stack = CapsuleStack::random(&StackShape::uniform(4, 4, 3, 2), 2).unwrap();
        stack.centers_frozen = true;
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 8,
            spread_margin: crate::AnnealSchedule::constant(0.5),
            merge_threshold: crate::AnnealSchedule::constant(0.7),
            ..TrainConfig::default()
        };
        let routing = RoutingConfig {
            max_depth: 2,
            ..RoutingConfig::default()
        };
        let gate = MergeGate::random(4, 4, &mut ChaCha8Rng::seed_from_u64(3));
        let out = fit_tokenizer(
            &items,
            stack.clone(),
            Some(gate.clone()),
            &routing,
            &cfg,
            &LossWeights::default(),
        )
        .unwrap();
        assert_eq!(out.stack, stack);
        assert_eq!(out.gate.unwrap(), gate);
        let first = out.history[0].total;
        assert!(out.history.iter().all(|h| (h.total - first).abs() < 1e-12));
    }

    #[test]
    fn single_cluster_reconstruction_does_not_increase() {
        let items = cluster_items(64, 4, 5);
        let stack = CapsuleStack::random(&StackShape::uniform(4, 4, 1, 1), 6).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.1,
            epochs: 15,
            batch_size: 16,
            cosine_decay: false,
            ..TrainConfig::default()
        };
        let routing = RoutingConfig {
            max_depth: 1,
            ..RoutingConfig::default()
        };
        let out = fit_tokenizer(
            &items,
            stack,
            None,
            &routing,
            &cfg,
            &LossWeights::only_reconstruction(),
        )
        .unwrap();
        let r: Vec<f64> = out.history.iter().map(|h| h.reconstruction).collect();
        for w in r.windows(2) {
            assert!(w[1] <= w[0] + 1e-3, "{r:?}");
        }
        assert!(r.last().unwrap() < &r[0]);
    }

    #[test]
    fn fitting_is_seed_deterministic() {
        let items = cluster_items(50, 4, 7);
        let stack = CapsuleStack::random(&StackShape::uniform(4, 4, 3, 2), 8).unwrap();
        let routing = RoutingConfig {
            max_depth: 2,
            ..RoutingConfig::default()
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let a = fit_tokenizer(
            &items,
            stack.clone(),
            None,
            &routing,
            &cfg,
            &LossWeights::default(),
        )
        .unwrap();
        let b =
            fit_tokenizer(&items, stack, None, &routing, &cfg, &LossWeights::default()).unwrap();
        assert_eq!(a.stack, b.stack);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn divergence_reports_history() {
        let items = cluster_items(32, 4, 9);
        let stack = CapsuleStack::random(&StackShape::uniform(4, 4, 2, 1), 10).unwrap();
        let routing = RoutingConfig {
            max_depth: 1,
            ..RoutingConfig::default()
        };
        let cfg = TrainConfig {
            learning_rate: 1e300,
            epochs: 5,
            batch_size: 8,
            cosine_decay: false,
            ..TrainConfig::default()
        };
        match fit_tokenizer(
            &items,
            stack,
            None,
            &routing,
            &cfg,
            &LossWeights::only_reconstruction(),
        ) {
            Err(Error::Diverged { epoch, history }) => assert_eq!(history.len(), epoch),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
