use rayon::prelude::*;

use crate::capsule::{CapsuleLayer, CapsuleStack};
use crate::error::{Error, Result};
use crate::linalg::{argmax, axpy, dot, norm, Matrix};
use crate::routing::{squash_vjp, ItemVector, RoutingMode, RoutingPass};
use crate::sembpe::{GateGradient, MergeGate, TokenEmbeddings};

use super::loss::{
    bpe_warmup_loss, forward_item, mean_spread, spread_with_grad, surrogate, validate_context,
    ItemForward, LossBreakdown, LossContext,
};
use super::LossWeights;

/// Gradient with respect to one depth's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGradient {
    pub pose: Vec<Matrix>,
    pub bias: Vec<Vec<f64>>,
    pub up_projection: Option<Matrix>,
    pub centers: Vec<Vec<f64>>,
}

impl LayerGradient {
    fn zeros_like(layer: &CapsuleLayer) -> Self {
        let (k, d, dc) = (layer.num_capsules(), layer.input_dim(), layer.capsule_dim());
        Self {
            pose: vec![Matrix::zeros(dc, d); k],
            bias: vec![vec![0.0; dc]; k],
            up_projection: layer
                .up_projection
                .as_ref()
                .map(|p| Matrix::zeros(p.rows(), p.cols())),
            centers: vec![vec![0.0; dc]; k],
        }
    }

    fn add(&mut self, other: &LayerGradient) {
        for (a, b) in self.pose.iter_mut().zip(&other.pose) {
            axpy(1.0, b.as_slice(), a.as_mut_slice());
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            axpy(1.0, b, a);
        }
        if let (Some(a), Some(b)) = (&mut self.up_projection, &other.up_projection) {
            axpy(1.0, b.as_slice(), a.as_mut_slice());
        }
        for (a, b) in self.centers.iter_mut().zip(&other.centers) {
            axpy(1.0, b, a);
        }
    }
}

/// Gradient of the tokenizer loss: per-depth blocks plus the merge gate.
#[derive(Clone, Debug, PartialEq)]
pub struct StackGradient {
    pub layers: Vec<LayerGradient>,
    pub gate: Option<GateGradient>,
}

impl StackGradient {
    pub fn zeros_like(stack: &CapsuleStack, gate: Option<&MergeGate>) -> Self {
        Self {
            layers: stack.layers.iter().map(LayerGradient::zeros_like).collect(),
            gate: gate.map(GateGradient::zeros_like),
        }
    }

    /// Same order as [`flatten_parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            for w in &l.pose {
                out.extend(w.as_slice());
            }
            for b in &l.bias {
                out.extend(b);
            }
            if let Some(p) = &l.up_projection {
                out.extend(p.as_slice());
            }
            for c in &l.centers {
                out.extend(c);
            }
        }
        if let Some(g) = &self.gate {
            out.extend(g.flatten());
        }
        out
    }

    /// Fails with the first parameter holding a non-finite entry.
    pub fn check_finite(&self) -> Result<()> {
        let bad = |v: &[f64]| v.iter().any(|x| !x.is_finite());
        for (l, g) in self.layers.iter().enumerate() {
            for (k, w) in g.pose.iter().enumerate() {
                if bad(w.as_slice()) {
                    return Err(Error::NonFiniteGradient(format!("depth {l} pose {k}")));
                }
            }
            for (k, b) in g.bias.iter().enumerate() {
                if bad(b) {
                    return Err(Error::NonFiniteGradient(format!("depth {l} bias {k}")));
                }
            }
            if g.up_projection.as_ref().is_some_and(|p| bad(p.as_slice())) {
                return Err(Error::NonFiniteGradient(format!("depth {l} up-projection")));
            }
            for (k, c) in g.centers.iter().enumerate() {
                if bad(c) {
                    return Err(Error::NonFiniteGradient(format!("depth {l} center {k}")));
                }
            }
        }
        if self.gate.as_ref().is_some_and(|g| bad(&g.flatten())) {
            return Err(Error::NonFiniteGradient("merge gate".into()));
        }
        Ok(())
    }
}

/// All trainable values in a fixed order: per depth pose, bias, up-projection,
/// centers; then the gate.
pub fn flatten_parameters(stack: &CapsuleStack, gate: Option<&MergeGate>) -> Vec<f64> {
    let mut out = Vec::new();
    for l in &stack.layers {
        for w in &l.pose {
            out.extend(w.as_slice());
        }
        for b in &l.bias {
            out.extend(b);
        }
        if let Some(p) = &l.up_projection {
            out.extend(p.as_slice());
        }
        for c in &l.centers {
            out.extend(c);
        }
    }
    if let Some(g) = gate {
        out.extend(g.flatten());
    }
    out
}

/// Inverse of [`flatten_parameters`].
pub fn assign_parameters(
    stack: &mut CapsuleStack,
    gate: Option<&mut MergeGate>,
    values: &[f64],
) -> Result<()> {
    let expected = flatten_parameters(stack, gate.as_deref()).len();
    if values.len() != expected {
        return Err(Error::DimensionMismatch {
            context: "parameter vector",
            expected,
            got: values.len(),
        });
    }
    let mut rest = values;
    let mut take = |dst: &mut [f64]| {
        let (head, tail) = rest.split_at(dst.len());
        dst.copy_from_slice(head);
        rest = tail;
    };
    for l in &mut stack.layers {
        for w in &mut l.pose {
            take(w.as_mut_slice());
        }
        for b in &mut l.bias {
            take(b);
        }
        if let Some(p) = &mut l.up_projection {
            take(p.as_mut_slice());
        }
        for c in &mut l.centers {
            take(c);
        }
    }
    if let Some(g) = gate {
        g.assign(rest);
    }
    Ok(())
}

/// Backpropagates `g_z` (on the routed output) and `g_q` (on the confidence)
/// through one routing pass. Returns the gradient on the input residual.
fn routing_backward(
    pass: &RoutingPass,
    residual: &[f64],
    layer: &CapsuleLayer,
    g_z: &[f64],
    g_q: f64,
    grad: &mut LayerGradient,
) -> Vec<f64> {
    let k = pass.votes.len();
    let dc = layer.capsule_dim();
    let iterations = pass.weights.len();
    let last = iterations - 1;
    let c_last = &pass.weights[last];
    let mut g_u = vec![vec![0.0; dc]; k];
    let mut g_c = vec![0.0; k];
    for j in 0..k {
        g_c[j] = dot(g_z, &pass.capsule_outputs[j]);
        let g_p: Vec<f64> = g_z.iter().map(|g| g * c_last[j]).collect();
        axpy(1.0, &squash_vjp(&pass.votes[j], &g_p), &mut g_u[j]);
    }
    let o_last = &pass.outputs[last];
    let o_norm = norm(o_last);
    let winner = argmax(c_last);
    g_c[winner] += g_q * o_norm;
    let mut g_o = vec![0.0; dc];
    if o_norm > 0.0 {
        axpy(g_q * c_last[winner] / o_norm, o_last, &mut g_o);
    }
    let mut g_a = vec![0.0; k];
    for t in (0..iterations).rev() {
        let o = &pass.outputs[t];
        let c = &pass.weights[t];
        for j in 0..k {
            axpy(g_a[j], o, &mut g_u[j]);
            axpy(g_a[j], &pass.votes[j], &mut g_o);
        }
        let g_v = squash_vjp(&pass.pre_squash[t], &g_o);
        for j in 0..k {
            g_c[j] += dot(&pass.votes[j], &g_v);
            axpy(c[j], &g_v, &mut g_u[j]);
        }
        let mean = dot(c, &g_c);
        for j in 0..k {
            g_a[j] += c[j] * (g_c[j] - mean);
        }
        g_c.iter_mut().for_each(|v| *v = 0.0);
        g_o.iter_mut().for_each(|v| *v = 0.0);
    }
    let mut g_r = vec![0.0; residual.len()];
    for j in 0..k {
        grad.pose[j].add_outer(1.0, &g_u[j], residual);
        axpy(1.0, &g_u[j], &mut grad.bias[j]);
        axpy(1.0, &layer.pose[j].matvec_t(&g_u[j]), &mut g_r);
    }
    g_r
}

/// Gradient of `w_recon·‖r_n‖² + w_len·S` for one item, accumulated into `grad`.
fn item_backward(
    fwd: &ItemForward,
    stack: &CapsuleStack,
    ctx: &LossContext,
    w_recon: f64,
    w_len: f64,
    grad: &mut [LayerGradient],
) -> (f64, f64) {
    let n = fwd.depth();
    let cfg = ctx.routing;
    let t = ctx.length_temperature;
    let q: Vec<f64> = (0..n).map(|i| fwd.confidence(i)).collect();
    let rn: Vec<f64> = (0..n).map(|i| fwd.residual_norm_after(i)).collect();
    let sur = surrogate(&q, &rn, cfg, t);
    let recon = dot(fwd.final_residual(), fwd.final_residual());

    let mut g_r: Vec<f64> = fwd
        .final_residual()
        .iter()
        .map(|v| 2.0 * w_recon * v)
        .collect();
    for i in (0..n).rev() {
        let mut g_q = 0.0;
        if i + 1 < n {
            let (sq, sr) = (sur.sig_q[i], sur.sig_r[i]);
            let dp = w_len * sur.dvalue[i];
            g_q = -dp * sq * (1.0 - sq) * sr / t;
            let g_norm = dp * sr * (1.0 - sr) * sq / t;
            if rn[i] > 0.0 {
                axpy(g_norm / rn[i], &fwd.residuals[i + 1], &mut g_r);
            }
        }
        let layer = &stack.layers[i];
        let g_z: Vec<f64> = match &layer.up_projection {
            Some(p) => {
                grad[i]
                    .up_projection
                    .as_mut()
                    .expect("shape matches layer")
                    .add_outer(-1.0, &g_r, &fwd.routed[i]);
                p.matvec_t(&g_r).into_iter().map(|v| -v).collect()
            }
            None => g_r.iter().map(|v| -v).collect(),
        };
        let g_in = routing_backward(
            &fwd.passes[i],
            &fwd.residuals[i],
            layer,
            &g_z,
            g_q,
            &mut grad[i],
        );
        axpy(1.0, &g_in, &mut g_r);
    }
    (recon, sur.value)
}

/// Per-item forward/backward results plus the EMA statistics of the batch.
pub(crate) struct BatchEvaluation {
    pub loss: LossBreakdown,
    pub gradient: StackGradient,
    /// Per depth, per capsule: sum of capsule outputs over items whose winner
    /// it was, and the number of such items.
    pub center_sums: Vec<Vec<Vec<f64>>>,
    pub center_counts: Vec<Vec<usize>>,
}

const GRADIENT_CHUNK: usize = 16;

struct ChunkPartial {
    reconstruction: f64,
    length: f64,
    grad: Vec<LayerGradient>,
    center_sums: Vec<Vec<Vec<f64>>>,
    center_counts: Vec<Vec<usize>>,
}

impl ChunkPartial {
    fn new(stack: &CapsuleStack) -> Self {
        Self {
            reconstruction: 0.0,
            length: 0.0,
            grad: stack.layers.iter().map(LayerGradient::zeros_like).collect(),
            center_sums: stack
                .layers
                .iter()
                .map(|l| vec![vec![0.0; l.capsule_dim()]; l.num_capsules()])
                .collect(),
            center_counts: stack
                .layers
                .iter()
                .map(|l| vec![0; l.num_capsules()])
                .collect(),
        }
    }
}

pub(crate) fn evaluate_batch(
    batch: &[ItemVector],
    stack: &CapsuleStack,
    weights: &LossWeights,
    ctx: &LossContext,
) -> Result<BatchEvaluation> {
    validate_context(batch, stack, ctx)?;
    if ctx.routing.mode != RoutingMode::Soft {
        return Err(Error::invalid("gradients require soft routing"));
    }
    let units = batch
        .iter()
        .map(ItemVector::unit)
        .collect::<Result<Vec<_>>>()?;
    let b = batch.len() as f64;
    let w_recon = weights.reconstruction / b;
    let w_len = weights.length / b;
    // Fixed chunks keep the summation order independent of the thread count.
    let partials: Vec<ChunkPartial> = units
        .par_chunks(GRADIENT_CHUNK)
        .map(|chunk| {
            let mut part = ChunkPartial::new(stack);
            for x in chunk {
                let fwd = forward_item(x, stack, ctx.routing);
                let (recon, len) = item_backward(&fwd, stack, ctx, w_recon, w_len, &mut part.grad);
                part.reconstruction += recon;
                part.length += len;
                for (depth, pass) in fwd.passes.iter().enumerate() {
                    let k = pass.token();
                    axpy(
                        1.0,
                        &pass.capsule_outputs[k],
                        &mut part.center_sums[depth][k],
                    );
                    part.center_counts[depth][k] += 1;
                }
            }
            part
        })
        .collect();

    let mut loss = LossBreakdown::default();
    let mut gradient = StackGradient::zeros_like(stack, ctx.warmup.map(|w| w.gate));
    let mut total = ChunkPartial::new(stack);
    for part in &partials {
        total.reconstruction += part.reconstruction;
        total.length += part.length;
        for (acc, g) in gradient.layers.iter_mut().zip(&part.grad) {
            acc.add(g);
        }
        for depth in 0..stack.depth() {
            for (k, sum) in part.center_sums[depth].iter().enumerate() {
                axpy(1.0, sum, &mut total.center_sums[depth][k]);
                total.center_counts[depth][k] += part.center_counts[depth][k];
            }
        }
    }
    loss.reconstruction = total.reconstruction / b;
    loss.length = total.length / b;
    let (center_sums, center_counts) = (total.center_sums, total.center_counts);

    let depth_scale = weights.spread / stack.depth() as f64;
    for (layer, acc) in stack.layers.iter().zip(&mut gradient.layers) {
        let (_, g) = spread_with_grad(layer, ctx.spread_margin);
        for (dst, src) in acc.centers.iter_mut().zip(&g) {
            axpy(depth_scale, src, dst);
        }
    }
    loss.spread = mean_spread(stack, ctx.spread_margin);

    if let Some(w) = ctx.warmup {
        let emb = TokenEmbeddings::from_stack(stack);
        let warm = bpe_warmup_loss(w.gate, w.stats, &emb, w.theta, w.n_min)?;
        loss.bpe = warm.value;
        let acc = gradient.gate.as_mut().expect("gate gradient allocated");
        acc.add_scaled(&warm.gate, weights.bpe);
        let mut rows = warm.embeddings.iter();
        for layer in &mut gradient.layers {
            for (dst, src) in layer.centers.iter_mut().zip(&mut rows) {
                axpy(weights.bpe, src, dst);
            }
        }
    }
    gradient.check_finite()?;
    Ok(BatchEvaluation {
        loss: loss.combine(weights),
        gradient,
        center_sums,
        center_counts,
    })
}

/// Tokenizer loss on a batch and its gradient with respect to every parameter
/// block. The gate block is present when `ctx.warmup` is set.
pub fn loss_and_gradient(
    batch: &[ItemVector],
    stack: &CapsuleStack,
    weights: &LossWeights,
    ctx: &LossContext,
) -> Result<(LossBreakdown, StackGradient)> {
    let eval = evaluate_batch(batch, stack, weights, ctx)?;
    Ok((eval.loss, eval.gradient))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::capsule::StackShape;
    use crate::routing::RoutingConfig;
    use crate::sembpe::collect_pair_stats;
    use crate::training::total_tokenizer_loss;

    fn setup(d: usize, dc: usize, seed: u64) -> (CapsuleStack, Vec<ItemVector>) {
        let mut stack = CapsuleStack::random(&StackShape::uniform(d, dc, 3, 2), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        for layer in &mut stack.layers {
            for b in &mut layer.bias {
                b.iter_mut().for_each(|v| *v = rng.random_range(-0.3..0.3));
            }
            for c in &mut layer.centers {
                c.iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            }
        }
        let items = (0..5)
            .map(|_| ItemVector::new((0..d).map(|_| rng.random_range(-1.0..1.0)).collect()))
            .collect();
        (stack, items)
    }

    #[test]
    fn zero_spread_weight_gives_zero_center_gradient() {
        let (stack, items) = setup(4, 4, 2);
        let cfg = RoutingConfig {
            max_depth: 2,
            iterations: 2,
            ..RoutingConfig::default()
        };
        let ctx = LossContext {
            routing: &cfg,
            length_temperature: 0.1,
            spread_margin: 0.9,
            warmup: None,
        };
        let weights = LossWeights {
            spread: 0.0,
            ..LossWeights::default()
        };
        let (_, g) = loss_and_gradient(&items, &stack, &weights, &ctx).unwrap();
        assert!(g
            .layers
            .iter()
            .flat_map(|l| l.centers.iter().flatten())
            .all(|v| *v == 0.0));
    }

    #[test]
    fn doubling_reconstruction_weight_doubles_gradient() {
        let (stack, items) = setup(4, 4, 3);
        let cfg = RoutingConfig {
            max_depth: 2,
            iterations: 2,
            tau: 0.99,
            epsilon: 0.0,
            ..RoutingConfig::default()
        };
        let ctx = LossContext {
            routing: &cfg,
            length_temperature: 0.1,
            spread_margin: 0.9,
            warmup: None,
        };
        let one = LossWeights::only_reconstruction();
        let two = LossWeights {
            reconstruction: 2.0,
            ..one
        };
        let (_, g1) = loss_and_gradient(&items, &stack, &one, &ctx).unwrap();
        let (_, g2) = loss_and_gradient(&items, &stack, &two, &ctx).unwrap();
        for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
            assert_eq!(2.0 * a, b);
        }
    }

    #[test]
    fn loss_matches_total_tokenizer_loss() {
        let (stack, items) = setup(4, 3, 4);
        let cfg = RoutingConfig {
            max_depth: 2,
            iterations: 2,
            tau: 0.5,
            ..RoutingConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gate = MergeGate::random(3, 4, &mut rng);
        let stats = collect_pair_stats(&[vec![0, 3, 1], vec![2, 4], vec![0, 3]]);
        let ctx = LossContext {
            routing: &cfg,
            length_temperature: 0.1,
            spread_margin: 0.9,
            warmup: Some(crate::training::WarmupTargets {
                gate: &gate,
                stats: &stats,
                theta: 0.2,
                n_min: 2,
            }),
        };
        let w = LossWeights::default();
        let (a, _) = loss_and_gradient(&items, &stack, &w, &ctx).unwrap();
        let b = total_tokenizer_loss(&items, &stack, &w, &ctx).unwrap();
        assert!((a.total - b.total).abs() < 1e-12);
        assert!((a.bpe - b.bpe).abs() < 1e-12);
    }

    #[test]
    fn parameter_flatten_round_trips() {
        let (mut stack, _) = setup(4, 3, 5);
        let mut gate = MergeGate::random(3, 4, &mut ChaCha8Rng::seed_from_u64(1));
        let v = flatten_parameters(&stack, Some(&gate));
        let shifted: Vec<f64> = v.iter().map(|x| x + 1.0).collect();
        assign_parameters(&mut stack, Some(&mut gate), &shifted).unwrap();
        assert_eq!(flatten_parameters(&stack, Some(&gate)), shifted);
        let g = StackGradient::zeros_like(&stack, Some(&gate));
        assert_eq!(g.flatten().len(), v.len());
        assert!(assign_parameters(&mut stack, None, &shifted).is_err());
    }
}
