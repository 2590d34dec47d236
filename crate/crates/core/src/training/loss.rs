use crate::capsule::{CapsuleLayer, CapsuleStack};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, sigmoid, sub};
use crate::routing::{
    routing_pass, stop_rule, ItemVector, LayerRoutingTrace, RoutingConfig, RoutingPass, StopCause,
};
use crate::sembpe::{GateGradient, MergeGate, PairStats, TokenEmbeddings};

use super::LossWeights;

/// Per-term values (unweighted batch means) and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub spread: f64,
    pub length: f64,
    pub bpe: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub(crate) fn combine(mut self, w: &LossWeights) -> Self {
        self.total = w.reconstruction * self.reconstruction
            + w.spread * self.spread
            + w.length * self.length
            + w.bpe * self.bpe;
        self
    }
}

/// Pair statistics and gate for the merge warm-up term.
#[derive(Clone, Copy, Debug)]
pub struct WarmupTargets<'a> {
    pub gate: &'a MergeGate,
    pub stats: &'a PairStats,
    pub theta: f64,
    pub n_min: u64,
}

/// Everything besides the batch and parameters that the loss depends on.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub routing: &'a RoutingConfig,
    pub length_temperature: f64,
    pub spread_margin: f64,
    pub warmup: Option<WarmupTargets<'a>>,
}

/// Forward pass of one item with everything the backward pass needs.
pub(crate) struct ItemForward {
    /// `r_0 = x, r_1, …, r_n`.
    pub residuals: Vec<Vec<f64>>,
    pub passes: Vec<RoutingPass>,
    /// Routed capsule-space outputs `Σ_k c_k o_k` per depth.
    pub routed: Vec<Vec<f64>>,
    pub stop_cause: StopCause,
}

impl ItemForward {
    pub fn depth(&self) -> usize {
        self.passes.len()
    }

    pub fn final_residual(&self) -> &[f64] {
        self.residuals.last().expect("nonempty")
    }

    pub fn confidence(&self, depth: usize) -> f64 {
        self.passes[depth].confidence()
    }

    pub fn residual_norm_after(&self, depth: usize) -> f64 {
        norm(&self.residuals[depth + 1])
    }
}

pub(crate) fn forward_item(x: &[f64], stack: &CapsuleStack, cfg: &RoutingConfig) -> ItemForward {
    let mut fwd = ItemForward {
        residuals: vec![x.to_vec()],
        passes: Vec::with_capacity(cfg.max_depth),
        routed: Vec::with_capacity(cfg.max_depth),
        stop_cause: StopCause::Cap,
    };
    for (depth, layer) in stack.layers.iter().take(cfg.max_depth).enumerate() {
        let r = fwd.residuals.last().expect("nonempty");
        let pass = routing_pass(r, layer, cfg.iterations, cfg.mode);
        let z = pass.routed_output();
        let next = sub(r, &layer.project_up(&z));
        let stop = stop_rule(pass.confidence(), norm(&next), depth, cfg);
        fwd.passes.push(pass);
        fwd.routed.push(z);
        fwd.residuals.push(next);
        if let Some(cause) = stop {
            fwd.stop_cause = cause;
            break;
        }
    }
    fwd
}

/// Continue probabilities `p_j` for the first `n − 1` depths and the factors
/// `σ_q`, `σ_r` they are built from.
pub(crate) struct Surrogate {
    pub sig_q: Vec<f64>,
    pub sig_r: Vec<f64>,
    pub value: f64,
    /// `∂S/∂p_j`.
    pub dvalue: Vec<f64>,
}

pub(crate) fn surrogate(
    confidences: &[f64],
    residual_norms: &[f64],
    cfg: &RoutingConfig,
    t: f64,
) -> Surrogate {
    let n = confidences.len();
    let m = n.saturating_sub(1);
    let sig_q: Vec<f64> = confidences[..m]
        .iter()
        .map(|q| sigmoid((cfg.tau - q) / t))
        .collect();
    let sig_r: Vec<f64> = residual_norms[..m]
        .iter()
        .map(|r| sigmoid((r - cfg.epsilon) / t))
        .collect();
    let p: Vec<f64> = sig_q.iter().zip(&sig_r).map(|(a, b)| a * b).collect();
    let mut value = 1.0;
    let mut prefix = vec![1.0; m + 1];
    for j in 0..m {
        prefix[j + 1] = prefix[j] * p[j];
        value += prefix[j + 1];
    }
    let mut dvalue = vec![0.0; m];
    let mut tail = 1.0;
    for j in (0..m).rev() {
        dvalue[j] = prefix[j] * tail;
        tail = 1.0 + p[j] * tail;
    }
    Surrogate {
        sig_q,
        sig_r,
        value,
        dvalue,
    }
}

/// `‖x − x̂_soft‖²` where `x̂_soft` sums the up-projected routed outputs of every
/// traced depth.
pub fn reconstruction_loss(
    x: &ItemVector,
    traces: &[LayerRoutingTrace],
    stack: &CapsuleStack,
) -> Result<f64> {
    if traces.len() > stack.depth() {
        return Err(Error::invalid("more traces than stack depths"));
    }
    let mut r = x.unit()?;
    if r.len() != stack.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "item vs stack input",
            expected: stack.input_dim(),
            got: r.len(),
        });
    }
    for (trace, layer) in traces.iter().zip(&stack.layers) {
        if trace.weights.len() != layer.num_capsules()
            || trace.capsule_outputs.len() != layer.num_capsules()
        {
            return Err(Error::invalid(
                "trace does not match the layer's capsule count",
            ));
        }
        axpy(-1.0, &layer.project_up(&trace.routed_output()), &mut r);
    }
    Ok(dot(&r, &r))
}

fn unit_or_zero(c: &[f64]) -> (Vec<f64>, f64) {
    let n = norm(c);
    if n == 0.0 {
        (vec![0.0; c.len()], 0.0)
    } else {
        (c.iter().map(|v| v / n).collect(), n)
    }
}

/// Spread loss of one layer and its gradient with respect to the centers.
pub(crate) fn spread_with_grad(layer: &CapsuleLayer, margin: f64) -> (f64, Vec<Vec<f64>>) {
    let k = layer.num_capsules();
    let dc = layer.capsule_dim();
    let mut grad = vec![vec![0.0; dc]; k];
    if k < 2 {
        return (0.0, grad);
    }
    let units: Vec<(Vec<f64>, f64)> = layer.centers.iter().map(|c| unit_or_zero(c)).collect();
    let pairs = (k * (k - 1) / 2) as f64;
    let mut g_unit = vec![vec![0.0; dc]; k];
    let mut total = 0.0;
    for a in 0..k {
        for b in a + 1..k {
            let diff = sub(&units[a].0, &units[b].0);
            let dist = norm(&diff);
            let hinge = margin - dist;
            if hinge <= 0.0 {
                continue;
            }
            total += hinge;
            if dist > 0.0 {
                axpy(-1.0 / (dist * pairs), &diff, &mut g_unit[a]);
                axpy(1.0 / (dist * pairs), &diff, &mut g_unit[b]);
            }
        }
    }
    for ((g, (u, n)), gu) in grad.iter_mut().zip(&units).zip(&g_unit) {
        if *n == 0.0 {
            continue;
        }
        let proj = dot(u, gu);
        for ((gi, ui), gui) in g.iter_mut().zip(u).zip(gu) {
            *gi = (gui - proj * ui) / n;
        }
    }
    (total / pairs, grad)
}

/// Mean hinge `max(0, margin − ‖ĉ_a − ĉ_b‖)` over unordered pairs of
/// unit-normalized centers. Zero for fewer than two capsules.
pub fn spread_loss(layer: &CapsuleLayer, margin: f64) -> Result<f64> {
    if !(0.0..=2.0).contains(&margin) {
        return Err(Error::invalid(format!(
            "spread margin must lie in [0, 2], got {margin}"
        )));
    }
    Ok(spread_with_grad(layer, margin).0)
}

/// Soft expected length `1 + Σ_ℓ Π_{j≤ℓ} p_j` over the traced depths.
pub fn length_surrogate_loss(
    traces: &[LayerRoutingTrace],
    cfg: &RoutingConfig,
    temperature: f64,
) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("surrogate temperature must be positive"));
    }
    if traces.is_empty() {
        return Err(Error::Empty("routing traces"));
    }
    let q: Vec<f64> = traces.iter().map(|t| t.confidence).collect();
    let r = traces
        .iter()
        .map(|t| {
            t.residual_norm_after
                .ok_or_else(|| Error::invalid("trace lacks the post-update residual norm"))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(surrogate(&q, &r, cfg, temperature).value)
}

/// Gradient of `cos(a, b)` with respect to `a`; zero when either is zero.
fn cosine_grad(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return vec![0.0; a.len()];
    }
    let cos = dot(a, b) / (na * nb);
    a.iter()
        .zip(b)
        .map(|(ai, bi)| bi / (na * nb) - cos * ai / (na * na))
        .collect()
}

/// Value and gradients of [`bpe_warmup_loss`].
#[derive(Clone, Debug)]
pub struct WarmupLoss {
    pub value: f64,
    pub gate: GateGradient,
    /// Gradient per embedding-table row.
    pub embeddings: Vec<Vec<f64>>,
}

/// Mean gate cross-entropy over every distinct observed pair. The target is
/// `count ≥ n_min ∧ cos > θ`.
pub fn bpe_warmup_loss(
    gate: &MergeGate,
    stats: &PairStats,
    embeddings: &TokenEmbeddings,
    theta: f64,
    n_min: u64,
) -> Result<WarmupLoss> {
    let mut out = WarmupLoss {
        value: 0.0,
        gate: GateGradient::zeros_like(gate),
        embeddings: vec![vec![0.0; embeddings.dim()]; embeddings.len()],
    };
    if stats.is_empty() {
        return Ok(out);
    }
    let scale = 1.0 / stats.counts.len() as f64;
    let dim = embeddings.dim();
    for (&pair, &count) in &stats.counts {
        let (ea, eb) = (embeddings.get(pair.0)?, embeddings.get(pair.1)?);
        let cos = embeddings.cosine(pair)?;
        let features = MergeGate::features(ea, eb, stats.normalized_frequency(pair), cos);
        let (loss, g, dfeat) =
            gate.cross_entropy_with_input(&features, count >= n_min && cos > theta)?;
        out.value += loss * scale;
        out.gate.add_scaled(&g, scale);
        let dcos = dfeat[2 * dim + 1] * scale;
        axpy(scale, &dfeat[..dim], &mut out.embeddings[pair.0 as usize]);
        axpy(
            dcos,
            &cosine_grad(ea, eb),
            &mut out.embeddings[pair.0 as usize],
        );
        axpy(
            scale,
            &dfeat[dim..2 * dim],
            &mut out.embeddings[pair.1 as usize],
        );
        axpy(
            dcos,
            &cosine_grad(eb, ea),
            &mut out.embeddings[pair.1 as usize],
        );
    }
    Ok(out)
}

pub(crate) fn validate_context(
    batch: &[ItemVector],
    stack: &CapsuleStack,
    ctx: &LossContext,
) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Empty("training batch"));
    }
    ctx.routing.validate(stack)?;
    if !(ctx.length_temperature > 0.0) {
        return Err(Error::invalid("surrogate temperature must be positive"));
    }
    if !(0.0..=2.0).contains(&ctx.spread_margin) {
        return Err(Error::invalid(format!(
            "spread margin must lie in [0, 2], got {}",
            ctx.spread_margin
        )));
    }
    for x in batch {
        if x.dim() != stack.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "item vs stack input",
                expected: stack.input_dim(),
                got: x.dim(),
            });
        }
    }
    Ok(())
}

pub(crate) fn mean_spread(stack: &CapsuleStack, margin: f64) -> f64 {
    stack
        .layers
        .iter()
        .map(|l| spread_with_grad(l, margin).0)
        .sum::<f64>()
        / stack.depth() as f64
}

/// Weighted tokenizer objective on a batch, with its components.
pub fn total_tokenizer_loss(
    batch: &[ItemVector],
    stack: &CapsuleStack,
    weights: &LossWeights,
    ctx: &LossContext,
) -> Result<LossBreakdown> {
    validate_context(batch, stack, ctx)?;
    let mut out = LossBreakdown::default();
    for x in batch {
        let (sid, traces) = crate::routing::tokenize_item(x, stack, ctx.routing)?;
        debug_assert_eq!(sid.len(), traces.len());
        out.reconstruction += reconstruction_loss(x, &traces, stack)?;
        out.length += length_surrogate_loss(&traces, ctx.routing, ctx.length_temperature)?;
    }
    let n = batch.len() as f64;
    out.reconstruction /= n;
    out.length /= n;
    out.spread = mean_spread(stack, ctx.spread_margin);
    if let Some(w) = ctx.warmup {
        let emb = TokenEmbeddings::from_stack(stack);
        out.bpe = bpe_warmup_loss(w.gate, w.stats, &emb, w.theta, w.n_min)?.value;
    }
    Ok(out.combine(weights))
}
