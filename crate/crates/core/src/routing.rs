//! The tokenizer forward pass: votes, routing by agreement, token emission,
//! soft residual update and confidence-driven stopping.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::capsule::{CapsuleLayer, CapsuleStack};
use crate::error::{Error, Result};
use crate::linalg::{argmax, axpy, dot, norm, softmax, sub};

/// Constant added to `‖z‖²` in the squash denominator.
const SQUASH_OFFSET: f64 = 0.5;

/// A raw item embedding. Tokenization normalizes it to unit length.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemVector(Vec<f64>);

impl ItemVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    /// Unit-normalized values. Rejects zero and non-finite vectors.
    pub fn unit(&self) -> Result<Vec<f64>> {
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("item vector".into()));
        }
        let n = norm(&self.0);
        if n == 0.0 {
            return Err(Error::ZeroVector);
        }
        Ok(self.0.iter().map(|v| v / n).collect())
    }
}

impl From<Vec<f64>> for ItemVector {
    fn from(values: Vec<f64>) -> Self {
        Self(values)
    }
}

/// How routing weights are formed at every agreement iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoutingMode {
    /// Softmax over agreement logits.
    #[default]
    Soft,
    /// Hard assignment: the first iteration weighs every vote equally (all
    /// logits are still zero), later iterations put all weight on the argmax
    /// of the logits. With `T ≥ 2` the residual update subtracts only the
    /// winner's output, which makes this the hard winner-only baseline.
    OneHot,
}

/// Routing and stopping hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    /// Agreement iterations `T`.
    pub iterations: usize,
    /// Confidence threshold `τ`.
    pub tau: f64,
    /// Residual-norm threshold `ε`.
    pub epsilon: f64,
    /// Maximum SID length `L_max`.
    pub max_depth: usize,
    pub mode: RoutingMode,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            iterations: 3,
            tau: 0.82,
            epsilon: 0.08,
            max_depth: 6,
            mode: RoutingMode::Soft,
        }
    }
}

impl RoutingConfig {
    pub fn validate(&self, stack: &CapsuleStack) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::invalid("routing iterations must be at least 1"));
        }
        if !(self.tau.is_finite() && self.tau < 1.0) {
            return Err(Error::invalid(format!(
                "tau must be finite and below 1, got {}",
                self.tau
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::invalid("epsilon must be non-negative"));
        }
        if self.max_depth == 0 || self.max_depth > stack.depth() {
            return Err(Error::invalid(format!(
                "max depth {} must lie in 1..={}",
                self.max_depth,
                stack.depth()
            )));
        }
        Ok(())
    }
}

/// Why a semantic ID stopped growing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StopCause {
    Confidence,
    Residual,
    Cap,
}

impl StopCause {
    pub const ALL: [StopCause; 3] = [StopCause::Confidence, StopCause::Residual, StopCause::Cap];

    pub fn as_str(self) -> &'static str {
        match self {
            StopCause::Confidence => "confidence",
            StopCause::Residual => "residual",
            StopCause::Cap => "cap",
        }
    }
}

impl fmt::Display for StopCause {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StopCause {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "confidence" => Ok(StopCause::Confidence),
            "residual" => Ok(StopCause::Residual),
            "cap" => Ok(StopCause::Cap),
            other => Err(Error::invalid(format!("unknown stop cause {other:?}"))),
        }
    }
}

/// A variable-length semantic ID. Token `p` is the capsule index chosen at
/// depth `p` (0-based).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemanticId {
    pub tokens: Vec<usize>,
    pub confidences: Vec<f64>,
    pub stop_cause: StopCause,
}

impl SemanticId {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// `(depth, capsule)` pairs.
    pub fn codes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.tokens.iter().copied().enumerate()
    }

    /// Tokens in the flat base numbering `offset(depth) + capsule`.
    pub fn flat_tokens(&self, offsets: &[usize]) -> Vec<u32> {
        self.codes().map(|(l, k)| (offsets[l] + k) as u32).collect()
    }
}

/// Everything routing produced at one depth for one item.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerRoutingTrace {
    /// Final routing weights `c^(T)`.
    pub weights: Vec<f64>,
    /// `max_k c^(t)` for `t = 1..=T`.
    pub winner_mass: Vec<f64>,
    pub token: usize,
    pub confidence: f64,
    /// `o^(T)`.
    pub aggregated_output: Vec<f64>,
    /// `squash(û_k)` per capsule.
    pub capsule_outputs: Vec<Vec<f64>>,
    pub residual_norm_before: f64,
    /// Filled once the residual update has been applied.
    pub residual_norm_after: Option<f64>,
    /// Whether `2⟨r, z⟩ ≥ ‖z‖²` held for the applied update.
    pub norm_decreasing: Option<bool>,
}

impl LayerRoutingTrace {
    /// `Σ_k c_k o_k` in capsule space.
    pub fn routed_output(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.aggregated_output.len()];
        for (w, o) in self.weights.iter().zip(&self.capsule_outputs) {
            axpy(*w, o, &mut z);
        }
        z
    }
}

/// Output of [`soft_residual_update`].
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualUpdate {
    pub residual: Vec<f64>,
    /// `P Σ_k c_k o_k`, the item-space reconstruction removed at this depth.
    pub reconstruction: Vec<f64>,
    pub norm_decreasing: bool,
}

/// `squash(z) = ‖z‖²/(0.5+‖z‖²) · z/‖z‖`, with `squash(0) = 0`.
pub fn squash(z: &[f64]) -> Result<Vec<f64>> {
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("squash input".into()));
    }
    Ok(squash_unchecked(z))
}

pub(crate) fn squash_unchecked(z: &[f64]) -> Vec<f64> {
    let n2 = dot(z, z);
    if n2 == 0.0 {
        return vec![0.0; z.len()];
    }
    let n = n2.sqrt();
    let s = n / (SQUASH_OFFSET + n2);
    z.iter().map(|v| v * s).collect()
}

/// Vector-Jacobian product of squash at `z`: `J(z)ᵀ g`. The Jacobian is
/// symmetric, `g(n) I + g'(n)/n · z zᵀ` with `g(n) = n/(0.5+n²)`.
pub(crate) fn squash_vjp(z: &[f64], grad: &[f64]) -> Vec<f64> {
    let n2 = dot(z, z);
    if n2 == 0.0 {
        return vec![0.0; z.len()];
    }
    let n = n2.sqrt();
    let denom = SQUASH_OFFSET + n2;
    let g = n / denom;
    let dg = (SQUASH_OFFSET - n2) / (denom * denom);
    let coef = dg / n * dot(z, grad);
    z.iter()
        .zip(grad)
        .map(|(zi, gi)| g * gi + coef * zi)
        .collect()
}

/// `û_k = W_k r + b_k` for every capsule.
pub fn compute_votes(residual: &[f64], layer: &CapsuleLayer) -> Result<Vec<Vec<f64>>> {
    if residual.len() != layer.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "residual vs capsule input",
            expected: layer.input_dim(),
            got: residual.len(),
        });
    }
    Ok(votes_unchecked(residual, layer))
}

fn votes_unchecked(residual: &[f64], layer: &CapsuleLayer) -> Vec<Vec<f64>> {
    layer
        .pose
        .iter()
        .zip(&layer.bias)
        .map(|(w, b)| {
            let mut u = w.matvec(residual);
            axpy(1.0, b, &mut u);
            u
        })
        .collect()
}

/// Intermediate values of one routing pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub(crate) struct RoutingPass {
    pub votes: Vec<Vec<f64>>,
    /// `c^(t)` for each iteration.
    pub weights: Vec<Vec<f64>>,
    /// `v^(t)` for each iteration.
    pub pre_squash: Vec<Vec<f64>>,
    /// `o^(t)` for each iteration.
    pub outputs: Vec<Vec<f64>>,
    pub capsule_outputs: Vec<Vec<f64>>,
}

impl RoutingPass {
    pub fn final_weights(&self) -> &[f64] {
        self.weights.last().expect("at least one iteration")
    }

    pub fn final_output(&self) -> &[f64] {
        self.outputs.last().expect("at least one iteration")
    }

    pub fn token(&self) -> usize {
        argmax(self.final_weights())
    }

    pub fn confidence(&self) -> f64 {
        let w = self.final_weights();
        w[argmax(w)] * norm(self.final_output())
    }

    pub fn routed_output(&self) -> Vec<f64> {
        let mut z = vec![0.0; self.final_output().len()];
        for (w, o) in self.final_weights().iter().zip(&self.capsule_outputs) {
            axpy(*w, o, &mut z);
        }
        z
    }
}

fn one_hot(len: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[at] = 1.0;
    v
}

pub(crate) fn routing_pass(
    residual: &[f64],
    layer: &CapsuleLayer,
    iterations: usize,
    mode: RoutingMode,
) -> RoutingPass {
    let votes = votes_unchecked(residual, layer);
    let k = votes.len();
    let mut logits = vec![0.0; k];
    let mut pass = RoutingPass {
        capsule_outputs: votes.iter().map(|u| squash_unchecked(u)).collect(),
        votes,
        weights: Vec::with_capacity(iterations),
        pre_squash: Vec::with_capacity(iterations),
        outputs: Vec::with_capacity(iterations),
    };
    for t in 0..iterations {
        let c = match mode {
            RoutingMode::Soft => softmax(&logits),
            RoutingMode::OneHot if t == 0 => vec![1.0 / k as f64; k],
            RoutingMode::OneHot => one_hot(k, argmax(&logits)),
        };
        let mut v = vec![0.0; layer.capsule_dim()];
        for (ck, u) in c.iter().zip(&pass.votes) {
            axpy(*ck, u, &mut v);
        }
        let o = squash_unchecked(&v);
        for (a, u) in logits.iter_mut().zip(&pass.votes) {
            *a += dot(u, &o);
        }
        pass.weights.push(c);
        pass.pre_squash.push(v);
        pass.outputs.push(o);
    }
    pass
}

/// Runs `iterations` rounds of soft routing by agreement on one residual.
pub fn route_layer(
    residual: &[f64],
    layer: &CapsuleLayer,
    iterations: usize,
) -> Result<LayerRoutingTrace> {
    route_layer_with(residual, layer, iterations, RoutingMode::Soft)
}

pub fn route_layer_with(
    residual: &[f64],
    layer: &CapsuleLayer,
    iterations: usize,
    mode: RoutingMode,
) -> Result<LayerRoutingTrace> {
    if layer.num_capsules() == 0 {
        return Err(Error::invalid("routing needs at least one capsule"));
    }
    if iterations == 0 {
        return Err(Error::invalid("routing iterations must be at least 1"));
    }
    if residual.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("residual".into()));
    }
    compute_votes(residual, layer)?;
    let pass = routing_pass(residual, layer, iterations, mode);
    Ok(trace_from_pass(&pass, norm(residual)))
}

fn trace_from_pass(pass: &RoutingPass, residual_norm: f64) -> LayerRoutingTrace {
    LayerRoutingTrace {
        weights: pass.final_weights().to_vec(),
        winner_mass: pass
            .weights
            .iter()
            .map(|c| c.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect(),
        token: pass.token(),
        confidence: pass.confidence(),
        aggregated_output: pass.final_output().to_vec(),
        capsule_outputs: pass.capsule_outputs.clone(),
        residual_norm_before: residual_norm,
        residual_norm_after: None,
        norm_decreasing: None,
    }
}

/// `r' = r − P Σ_k c_k o_k`, reporting whether the update shrank the residual.
pub fn soft_residual_update(
    residual: &[f64],
    trace: &LayerRoutingTrace,
    layer: &CapsuleLayer,
) -> Result<ResidualUpdate> {
    if layer.up_projection.is_none() && layer.capsule_dim() != layer.input_dim() {
        return Err(Error::invalid(
            "capsule dim differs from input dim and no up-projection is configured",
        ));
    }
    if residual.len() != layer.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "residual update",
            expected: layer.input_dim(),
            got: residual.len(),
        });
    }
    if trace.capsule_outputs.len() != layer.num_capsules()
        || trace.weights.len() != layer.num_capsules()
    {
        return Err(Error::invalid(
            "trace does not match the layer's capsule count",
        ));
    }
    let reconstruction = layer.project_up(&trace.routed_output());
    let norm_decreasing =
        2.0 * dot(residual, &reconstruction) >= dot(&reconstruction, &reconstruction);
    Ok(ResidualUpdate {
        residual: sub(residual, &reconstruction),
        reconstruction,
        norm_decreasing,
    })
}

/// Applies the stopping rules in canonical order: confidence, then residual,
/// then the depth cap.
pub fn stop_rule(
    confidence: f64,
    residual_norm: f64,
    depth: usize,
    cfg: &RoutingConfig,
) -> Option<StopCause> {
    if confidence >= cfg.tau {
        Some(StopCause::Confidence)
    } else if residual_norm <= cfg.epsilon {
        Some(StopCause::Residual)
    } else if depth + 1 >= cfg.max_depth {
        Some(StopCause::Cap)
    } else {
        None
    }
}

/// Tokenizes one item, returning its semantic ID and the per-depth traces.
pub fn tokenize_item(
    x: &ItemVector,
    stack: &CapsuleStack,
    cfg: &RoutingConfig,
) -> Result<(SemanticId, Vec<LayerRoutingTrace>)> {
    cfg.validate(stack)?;
    if x.dim() != stack.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "item vs stack input",
            expected: stack.input_dim(),
            got: x.dim(),
        });
    }
    let mut residual = x.unit()?;
    let mut traces = Vec::with_capacity(cfg.max_depth);
    let mut tokens = Vec::with_capacity(cfg.max_depth);
    let mut confidences = Vec::with_capacity(cfg.max_depth);
    for (depth, layer) in stack.layers.iter().take(cfg.max_depth).enumerate() {
        let pass = routing_pass(&residual, layer, cfg.iterations, cfg.mode);
        let mut trace = trace_from_pass(&pass, norm(&residual));
        let update = soft_residual_update(&residual, &trace, layer)?;
        residual = update.residual;
        let after = norm(&residual);
        trace.residual_norm_after = Some(after);
        trace.norm_decreasing = Some(update.norm_decreasing);
        tokens.push(trace.token);
        confidences.push(trace.confidence);
        let stop = stop_rule(trace.confidence, after, depth, cfg);
        traces.push(trace);
        if let Some(stop_cause) = stop {
            return Ok((
                SemanticId {
                    tokens,
                    confidences,
                    stop_cause,
                },
                traces,
            ));
        }
    }
    unreachable!("the depth cap always fires at max_depth")
}

/// Tokenizes items in parallel; the output order and values do not depend on
/// the thread count.
pub fn tokenize_batch(
    items: &[ItemVector],
    stack: &CapsuleStack,
    cfg: &RoutingConfig,
) -> Result<Vec<SemanticId>> {
    Ok(tokenize_batch_traced(items, stack, cfg)?
        .into_iter()
        .map(|(sid, _)| sid)
        .collect())
}

pub fn tokenize_batch_traced(
    items: &[ItemVector],
    stack: &CapsuleStack,
    cfg: &RoutingConfig,
) -> Result<Vec<(SemanticId, Vec<LayerRoutingTrace>)>> {
    if items.is_empty() {
        return Err(Error::Empty("item batch"));
    }
    cfg.validate(stack)?;
    let results: Vec<Result<_>> = items
        .par_iter()
        .map(|x| tokenize_item(x, stack, cfg))
        .collect();
    results
        .into_iter()
        .enumerate()
        .map(|(index, r)| {
            r.map_err(|e| Error::Item {
                index,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Share of applied residual updates that did not increase the residual norm.
pub fn residual_monotonicity_fraction(traces: &[Vec<LayerRoutingTrace>]) -> f64 {
    let (mut good, mut total) = (0usize, 0usize);
    for t in traces.iter().flatten() {
        if let Some(ok) = t.norm_decreasing {
            total += 1;
            good += ok as usize;
        }
    }
    if total == 0 {
        1.0
    } else {
        good as f64 / total as f64
    }
}

/// Bisects `τ` so the mean SID length over `items` is as close as possible to
/// `target_mean_length` without exceeding it. Mean length is non-decreasing in `τ`.
pub fn calibrate_tau(
    items: &[ItemVector],
    stack: &CapsuleStack,
    cfg: &RoutingConfig,
    target_mean_length: f64,
) -> Result<f64> {
    let mean_len = |tau: f64| -> Result<f64> {
        let probe = RoutingConfig { tau, ..cfg.clone() };
        let sids = tokenize_batch(items, stack, &probe)?;
        Ok(sids.iter().map(SemanticId::len).sum::<usize>() as f64 / sids.len() as f64)
    };
    let (mut lo, mut hi) = (0.0_f64, 1.0 - 1e-9);
    if mean_len(hi)? <= target_mean_length {
        return Ok(hi);
    }
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if mean_len(mid)? <= target_mean_length {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::capsule::StackShape;
    use crate::linalg::Matrix;

    fn layer_from(pose: Vec<Matrix>, bias: Vec<Vec<f64>>) -> CapsuleLayer {
        let k = pose.len();
        let dc = pose[0].rows();
        CapsuleLayer {
            pose,
            bias,
            centers: vec![vec![0.0; dc]; k],
            up_projection: None,
            center_updates: vec![0; k],
        }
    }

    #[test]
    fn squash_examples() {
        assert_eq!(squash(&[0.0, 0.0, 0.0]).unwrap(), vec![0.0, 0.0, 0.0]);
        let unit = squash(&[0.6, 0.8]).unwrap();
        assert!((norm(&unit) - 1.0 / 1.5).abs() < 1e-12);
        let s = squash(&[3.0, 0.0]).unwrap();
        assert!((s[0] - 9.0 / 9.5).abs() < 1e-12 && s[1] == 0.0);
        assert!((s[0] - 0.947368).abs() < 1e-6);
        assert!(squash(&[f64::NAN]).is_err());
    }

    #[test]
    fn squash_vjp_matches_central_differences() {
        let z = [0.3, -1.2, 0.7];
        let g = [0.5, 0.25, -1.0];
        let analytic = squash_vjp(&z, &g);
        let h = 1e-6;
        for j in 0..3 {
            let mut zp = z;
            let mut zm = z;
            zp[j] += h;
            zm[j] -= h;
            let fd =
                (dot(&squash_unchecked(&zp), &g) - dot(&squash_unchecked(&zm), &g)) / (2.0 * h);
            assert!(
                (fd - analytic[j]).abs() < 1e-8,
                "{j}: {fd} vs {}",
                analytic[j]
            );
        }
    }

    #[test]
    fn votes_identity_and_constant_cases() {
        let layer = layer_from(vec![Matrix::identity(3); 2], vec![vec![0.0; 3]; 2]);
        let r = [0.1, -0.2, 0.3];
        for u in compute_votes(&r, &layer).unwrap() {
            assert_eq!(u, r.to_vec());
        }
        let layer = layer_from(vec![Matrix::zeros(3, 3); 2], vec![vec![1.0, 2.0, 3.0]; 2]);
        for u in compute_votes(&r, &layer).unwrap() {
            assert_eq!(u, vec![1.0, 2.0, 3.0]);
        }
        assert!(compute_votes(&[1.0], &layer).is_err());
    }

    #[test]
    fn votes_match_triple_loop_oracle() {
        let stack = CapsuleStack::random(&StackShape::uniform(4, 4, 3, 1), 11).unwrap();
        let mut layer = stack.layers[0].clone();
        for (k, b) in layer.bias.iter_mut().enumerate() {
            *b = (0..4).map(|j| 0.1 * (k as f64) - 0.05 * j as f64).collect();
        }
        let r = [0.3, -0.4, 0.5, 0.1];
        let votes = compute_votes(&r, &layer).unwrap();
        for k in 0..3 {
            for i in 0..4 {
                let mut acc = layer.bias[k][i];
                for j in 0..4 {
                    acc += layer.pose[k][(i, j)] * r[j];
                }
                assert!((votes[k][i] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_capsule_always_wins() {
        let layer = layer_from(vec![Matrix::identity(2)], vec![vec![0.0; 2]]);
        for t in 1..5 {
            let trace = route_layer(&[0.6, 0.8], &layer, t).unwrap();
            assert_eq!(trace.weights, vec![1.0]);
            assert_eq!(trace.token, 0);
        }
    }

    #[test]
    fn one_iteration_gives_uniform_weights_and_lowest_index() {
        let stack = CapsuleStack::random(&StackShape::uniform(4, 4, 5, 1), 3).unwrap();
        let trace = route_layer(&[0.5, 0.5, 0.5, 0.5], &stack.layers[0], 1).unwrap();
        assert!(trace.weights.iter().all(|&w| (w - 0.2).abs() < 1e-15));
        assert_eq!(trace.token, 0);
    }

    #[test]
    fn one_hot_mode_starts_uniform_then_commits() {
        let stack = CapsuleStack::random(&StackShape::uniform(4, 4, 5, 1), 3).unwrap();
        let r = [0.1, -0.7, 0.4, 0.2];
        let first = route_layer_with(&r, &stack.layers[0], 1, RoutingMode::OneHot).unwrap();
        assert!(first.weights.iter().all(|&w| (w - 0.2).abs() < 1e-15));
        for t in 2..5 {
            let trace = route_layer_with(&r, &stack.layers[0], t, RoutingMode::OneHot).unwrap();
            assert_eq!(trace.weights.iter().filter(|&&w| w == 1.0).count(), 1);
            assert_eq!(trace.weights.iter().sum::<f64>(), 1.0);
            assert_eq!(trace.weights[trace.token], 1.0);
            assert_eq!(trace.routed_output(), trace.capsule_outputs[trace.token]);
        }
    }

    #[test]
    fn zero_capsules_is_an_error() {
        let layer = CapsuleLayer {
            pose: vec![],
            bias: vec![],
            centers: vec![],
            up_projection: None,
            center_updates: vec![],
        };
        assert!(route_layer(&[1.0], &layer, 3).is_err());
    }

    /// Votes (1,0) and (0,1) via `W_k = 0`, `b_k = vote`, evaluated as scalars.
    #[test]
    fn two_capsule_recursion_matches_scalar_transcript() {
        let layer = layer_from(
            vec![Matrix::zeros(2, 2); 2],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        );
        let trace = route_layer(&[1.0, 0.0], &layer, 3).unwrap();

        // Scalar transcript of the recursion.
        let (mut a0, mut a1) = (0.0_f64, 0.0_f64);
        let mut c = (0.0, 0.0);
        let mut o = (0.0, 0.0);
        for _ in 0..3 {
            let (e0, e1) = (a0.exp(), a1.exp());
            c = (e0 / (e0 + e1), e1 / (e0 + e1));
            let v = (c.0, c.1);
            let n2 = v.0 * v.0 + v.1 * v.1;
            let s = n2.sqrt() / (0.5 + n2);
            o = (v.0 * s, v.1 * s);
            a0 += o.0;
            a1 += o.1;
        }
        assert!((trace.weights[0] - c.0).abs() < 1e-12);
        assert!((trace.weights[1] - c.1).abs() < 1e-12);
        // Symmetric votes: the tie never breaks and the lower index wins.
        assert!((c.0 - 0.5).abs() < 1e-12);
        assert_eq!(trace.token, 0);
        let o_norm = (o.0 * o.0 + o.1 * o.1).sqrt();
        assert!((trace.confidence - 0.5 * o_norm).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_recursion_matches_scalar_transcript() {
        let layer = layer_from(
            vec![Matrix::zeros(2, 2); 2],
            vec![vec![1.0, 0.0], vec![0.0, 0.5]],
        );
        let trace = route_layer(&[1.0, 0.0], &layer, 3).unwrap();
        let votes = [(1.0, 0.0), (0.0, 0.5)];
        let mut a = [0.0_f64; 2];
        let mut masses = vec![];
        let mut c = [0.0; 2];
        for _ in 0..3 {
            let z = a[0].exp() + a[1].exp();
            c = [a[0].exp() / z, a[1].exp() / z];
            masses.push(c[0].max(c[1]));
            let v = (
                c[0] * votes[0].0 + c[1] * votes[1].0,
                c[0] * votes[0].1 + c[1] * votes[1].1,
            );
            let n2 = v.0 * v.0 + v.1 * v.1;
            let s = n2.sqrt() / (0.5 + n2);
            let o = (v.0 * s, v.1 * s);
            for k in 0..2 {
                a[k] += votes[k].0 * o.0 + votes[k].1 * o.1;
            }
        }
        assert!((trace.weights[0] - c[0]).abs() < 1e-12);
        assert!((trace.weights[1] - c[1]).abs() < 1e-12);
        for (m, e) in trace.winner_mass.iter().zip(&masses) {
            assert!((m - e).abs() < 1e-12);
        }
        assert_eq!(trace.token, 0);
    }

    #[test]
    fn one_hot_update_equals_winner_only_update() {
        let stack = CapsuleStack::random(&StackShape::uniform(4, 4, 3, 1), 5).unwrap();
        let layer = &stack.layers[0];
        let r = [0.5, -0.5, 0.5, 0.5];
        let mut trace = route_layer(&r, layer, 3).unwrap();
        let w = 2;
        trace.weights = vec![0.0, 0.0, 1.0];
        let update = soft_residual_update(&r, &trace, layer).unwrap();
        let hard = sub(&r, &trace.capsule_outputs[w]);
        assert_eq!(update.residual, hard);
    }

    #[test]
    fn zero_outputs_leave_residual_unchanged() {
        let stack = CapsuleStack::random(&StackShape::uniform(3, 3, 2, 1), 5).unwrap();
        let r = [0.2, 0.3, -0.1];
        let mut trace = route_layer(&r, &stack.layers[0], 2).unwrap();
        trace.capsule_outputs = vec![vec![0.0; 3]; 2];
        assert_eq!(
            soft_residual_update(&r, &trace, &stack.layers[0])
                .unwrap()
                .residual,
            r.to_vec()
        );
    }

    #[test]
    fn residual_update_matches_weighted_sum_oracle() {
        let stack = CapsuleStack::random(&StackShape::uniform(4, 4, 3, 1), 9).unwrap();
        let layer = &stack.layers[0];
        let r = [0.1, 0.2, -0.7, 0.4];
        let mut trace = route_layer(&r, layer, 3).unwrap();
        trace.weights = vec![0.2, 0.5, 0.3];
        trace.capsule_outputs = vec![
            vec![0.1, 0.0, 0.3, -0.2],
            vec![-0.4, 0.2, 0.0, 0.1],
            vec![0.05, 0.05, -0.6, 0.2],
        ];
        let update = soft_residual_update(&r, &trace, layer).unwrap();
        for i in 0..4 {
            let mut z = 0.0;
            for k in 0..3 {
                z += trace.weights[k] * trace.capsule_outputs[k][i];
            }
            assert!((update.residual[i] - (r[i] - z)).abs() < 1e-12);
        }
        let z = update.reconstruction;
        assert_eq!(update.norm_decreasing, 2.0 * dot(&r, &z) >= dot(&z, &z));
    }

    #[test]
    fn residual_update_without_projection_fails_on_narrow_capsules() {
        let stack = CapsuleStack::random(&StackShape::uniform(4, 2, 2, 1), 9).unwrap();
        let mut layer = stack.layers[0].clone();
        let trace = route_layer(&[1.0, 0.0, 0.0, 0.0], &layer, 2).unwrap();
        layer.up_projection = None;
        assert!(soft_residual_update(&[1.0, 0.0, 0.0, 0.0], &trace, &layer).is_err());
    }

    #[test]
    fn zero_tau_stops_at_depth_one() {
        let stack = CapsuleStack::random(&StackShape::uniform(4, 4, 3, 4), 2).unwrap();
        let cfg = RoutingConfig {
            tau: 0.0,
            max_depth: 4,
            ..RoutingConfig::default()
        };
        let (sid, traces) = tokenize_item(&vec![0.3, 0.1, -0.2, 0.9].into(), &stack, &cfg).unwrap();
        assert_eq!(sid.len(), 1);
        assert_eq!(traces.len(), 1);
        assert_eq!(sid.stop_cause, StopCause::Confidence);
    }

    #[test]
    fn unreachable_thresholds_hit_the_cap() {
        let stack = CapsuleStack::random(&StackShape::uniform(4, 4, 3, 5), 2).unwrap();
        let cfg = RoutingConfig {
            tau: 0.999,
            epsilon: 0.0,
            max_depth: 5,
            ..RoutingConfig::default()
        };
        let (sid, _) = tokenize_item(&vec![0.3, 0.1, -0.2, 0.9].into(), &stack, &cfg).unwrap();
        assert_eq!(sid.len(), 5);
        assert_eq!(sid.stop_cause, StopCause::Cap);
    }

    #[test]
    fn zero_item_is_rejected() {
        let stack = CapsuleStack::random(&StackShape::uniform(2, 2, 2, 1), 2).unwrap();
        let cfg = RoutingConfig {
            max_depth: 1,
            ..RoutingConfig::default()
        };
        assert!(matches!(
            tokenize_item(&vec![0.0, 0.0].into(), &stack, &cfg),
            Err(Error::ZeroVector)
        ));
    }

    #[test]
    fn batch_errors_carry_the_item_index() {
        let stack = CapsuleStack::random(&StackShape::uniform(2, 2, 2, 1), 2).unwrap();
        let cfg = RoutingConfig {
            max_depth: 1,
            ..RoutingConfig::default()
        };
        let items: Vec<ItemVector> = vec![vec![1.0, 0.0].into(), vec![0.0, 0.0].into()];
        match tokenize_batch(&items, &stack, &cfg) {
            Err(Error::Item { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn batch_of_one_and_duplicates_match_single_item() {
        let stack = CapsuleStack::random(&StackShape::uniform(3, 3, 4, 3), 8).unwrap();
        let cfg = RoutingConfig {
            max_depth: 3,
            tau: 0.3,
            ..RoutingConfig::default()
        };
        let x: ItemVector = vec![0.2, -0.5, 0.9].into();
        let (single, _) = tokenize_item(&x, &stack, &cfg).unwrap();
        let batch = tokenize_batch(&[x.clone(), x.clone(), x], &stack, &cfg).unwrap();
        assert!(batch.iter().all(|s| *s == single));
    }

    proptest! {
        #[test]
        fn squash_norm_below_one_and_monotone_on_rays(
            dir in prop::collection::vec(-1.0f64..1.0, 1..6),
            s1 in 0.0f64..50.0,
            s2 in 0.0f64..50.0,
        ) {
            let d = normalized_or_axis(&dir);
            let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
            let a = norm(&squash(&crate::linalg::scale(&d, lo)).unwrap());
            let b = norm(&squash(&crate::linalg::scale(&d, hi)).unwrap());
            prop_assert!(a < 1.0 && b < 1.0);
            prop_assert!(a <= b);
        }

        #[test]
        fn weights_form_a_simplex_every_iteration(seed in 0u64..500, t in 1usize..6) {
            let stack = CapsuleStack::random(&StackShape::uniform(4, 4, 4, 1), seed).unwrap();
            let r = [0.5, -0.5, 0.5, 0.5];
            let pass = routing_pass(&r, &stack.layers[0], t, RoutingMode::Soft);
            for c in &pass.weights {
                prop_assert!(c.iter().all(|&w| w >= 0.0));
                prop_assert!((c.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
            let trace = route_layer(&r, &stack.layers[0], t).unwrap();
            prop_assert_eq!(trace.token, argmax(&trace.weights));
            let expected = trace.weights[trace.token] * norm(&trace.aggregated_output);
            prop_assert!((trace.confidence - expected).abs() < 1e-15);
        }

        #[test]
        fn stop_cause_consistent_with_trace(seed in 0u64..300, tau in 0.05f64..0.95, eps in 0.0f64..0.9) {
            let stack = CapsuleStack::random(&StackShape::uniform(5, 5, 3, 4), seed).unwrap();
            let cfg = RoutingConfig { tau, epsilon: eps, max_depth: 4, ..RoutingConfig::default() };
            let x: ItemVector = vec![0.1, 0.7, -0.3, 0.2, 0.5].into();
            let (sid, traces) = tokenize_item(&x, &stack, &cfg).unwrap();
            prop_assert!(sid.len() >= 1 && sid.len() <= 4);
            let last = traces.last().unwrap();
            let after = last.residual_norm_after.unwrap();
            match sid.stop_cause {
                StopCause::Confidence => prop_assert!(last.confidence >= tau),
                StopCause::Residual => prop_assert!(last.confidence < tau && after <= eps),
                StopCause::Cap => prop_assert!(sid.len() == 4 && last.confidence < tau && after > eps),
            }
            for t in &traces[..traces.len() - 1] {
                prop_assert!(t.confidence < tau && t.residual_norm_after.unwrap() > eps);
            }
        }
    }

    fn normalized_or_axis(v: &[f64]) -> Vec<f64> {
        let n = norm(v);
        if n < 1e-9 {
            let mut e = vec![0.0; v.len()];
            e[0] = 1.0;
            e
        } else {
            crate::linalg::scale(v, 1.0 / n)
        }
    }
}
