use capsid::sembpe::{collect_pair_stats, MergeGate};
use capsid::training::{
    assign_parameters, flatten_parameters, loss_and_gradient, LossContext, LossWeights,
    WarmupTargets,
};
use capsid::{tokenize_item, CapsuleStack, ItemVector, RoutingConfig, StackShape};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const FLOOR: f64 = 1e-6;

pub struct Instance {
    pub stack: CapsuleStack,
    pub gate: MergeGate,
    pub items: Vec<ItemVector>,
    pub routing: RoutingConfig,
}

pub fn instance(d: usize, dc: usize, k: usize, tau: f64, epsilon: f64, seed: u64) -> Instance {
    let mut stack = CapsuleStack::random(&StackShape::uniform(d, dc, k, 2), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for layer in &mut stack.layers {
        for b in &mut layer.bias {
            b.iter_mut().for_each(|v| *v = rng.random_range(-0.4..0.4));
        }
        for c in &mut layer.centers {
            c.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
    }
    let items = (0..6)
        .map(|_| ItemVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    let gate = MergeGate::random(dc, 5, &mut rng);
    let routing = RoutingConfig {
        iterations: 2,
        tau,
        epsilon,
        max_depth: 2,
        ..RoutingConfig::default()
    };
    Instance {
        stack,
        gate,
        items,
        routing,
    }
}

/// Smallest distance of any visited depth's confidence or residual norm from
/// its threshold.
pub fn threshold_margin(inst: &Instance) -> f64 {
    let mut m = f64::INFINITY;
    for x in &inst.items {
        let (_, traces) = tokenize_item(x, &inst.stack, &inst.routing).unwrap();
        for t in &traces {
            m = m.min((t.confidence - inst.routing.tau).abs());
            m = m.min((t.residual_norm_after.unwrap() - inst.routing.epsilon).abs());
        }
    }
    m
}

pub fn max_relative_error(inst: &Instance, weights: &LossWeights) -> (f64, usize) {
    let k_total = inst.stack.total_codes() as u32;
    let corpus: Vec<Vec<u32>> = (0..12)
        .map(|i| vec![i % k_total, (i * 7 + 3) % k_total, (i + 1) % k_total])
        .collect();
    let stats = collect_pair_stats(&corpus);
    let loss_at = |stack: &CapsuleStack, gate: &MergeGate| {
        let ctx = LossContext {
            routing: &inst.routing,
            length_temperature: 0.1,
            spread_margin: 1.5,
            warmup: Some(WarmupTargets {
                gate,
                stats: &stats,
                theta: 0.1,
                n_min: 2,
            }),
        };
        loss_and_gradient(&inst.items, stack, weights, &ctx).unwrap()
    };
    let (_, grad) = loss_at(&inst.stack, &inst.gate);
    let analytic = grad.flatten();
    let base = flatten_parameters(&inst.stack, Some(&inst.gate));
    assert_eq!(analytic.len(), base.len());
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let eval = |delta: f64| {
            let mut v = base.clone();
            v[i] += delta;
            let mut s = inst.stack.clone();
            let mut g = inst.gate.clone();
            assign_parameters(&mut s, Some(&mut g), &v).unwrap();
            loss_at(&s, &g).0.total
        };
        let fd = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
        let a = analytic[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(FLOOR);
        worst = worst.max(rel);
    }
    (worst, base.len())
}

/// A `d_c < d` instance whose confidences split the items between depth 1
/// and depth 2, with every threshold at least `1e-2` from its kink.
pub fn up_projection_instance() -> Option<Instance> {
    for seed in 0..40 {
        let mut inst = instance(6, 3, 4, 0.3, 0.05, 100 + seed);
        let mut qs: Vec<f64> = inst
            .items
            .iter()
            .map(|x| tokenize_item(x, &inst.stack, &inst.routing).unwrap().1[0].confidence)
            .collect();
        qs.sort_by(f64::total_cmp);
        inst.routing.tau = 0.5 * (qs[2] + qs[3]);
        if threshold_margin(&inst) < 1e-2 {
            continue;
        }
        let lengths: Vec<usize> = inst
            .items
            .iter()
            .map(|x| {
                tokenize_item(x, &inst.stack, &inst.routing)
                    .unwrap()
                    .0
                    .len()
            })
            .collect();
        if lengths.contains(&1) && lengths.contains(&2) {
            return Some(inst);
        }
    }
    None
}
