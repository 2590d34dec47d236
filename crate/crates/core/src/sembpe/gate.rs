use rand::Rng;
use rand_distr::Gumbel;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, sigmoid, softmax, Matrix};

pub const DEFAULT_GATE_HIDDEN: usize = 16;
pub const DEFAULT_GUMBEL_TEMPERATURE: f64 = 0.5;

const LOG_PROB_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

/// Two-layer perceptron producing a two-class merge distribution
/// `π = (π_keep, π_merge)` from `(e_a, e_b, freq̂, cos)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeGate {
    pub hidden: Matrix,
    pub hidden_bias: Vec<f64>,
    pub output: Matrix,
    pub output_bias: Vec<f64>,
    /// Gumbel-Softmax temperature `τ_g`.
    pub temperature: f64,
}

/// Gradient of a scalar loss with respect to every [`MergeGate`] weight.
#[derive(Clone, Debug, PartialEq)]
pub struct GateGradient {
    pub hidden: Matrix,
    pub hidden_bias: Vec<f64>,
    pub output: Matrix,
    pub output_bias: Vec<f64>,
}

impl GateGradient {
    pub fn zeros_like(gate: &MergeGate) -> Self {
        Self {
            hidden: Matrix::zeros(gate.hidden.rows(), gate.hidden.cols()),
            hidden_bias: vec![0.0; gate.hidden_bias.len()],
            output: Matrix::zeros(2, gate.output.cols()),
            output_bias: vec![0.0; 2],
        }
    }

    pub fn add_scaled(&mut self, other: &GateGradient, s: f64) {
        axpy(s, other.hidden.as_slice(), self.hidden.as_mut_slice());
        axpy(s, &other.hidden_bias, &mut self.hidden_bias);
        axpy(s, other.output.as_slice(), self.output.as_mut_slice());
        axpy(s, &other.output_bias, &mut self.output_bias);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.hidden.as_slice().to_vec();
        v.extend(&self.hidden_bias);
        v.extend(self.output.as_slice());
        v.extend(&self.output_bias);
        v
    }
}

impl MergeGate {
    pub fn random<R: Rng>(embedding_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let input = 2 * embedding_dim + 2;
        let s1 = 1.0 / (input as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        Self {
            hidden: Matrix::from_fn(hidden, input, |_, _| {
                s1 * rng.sample::<f64, _>(rand_distr::StandardNormal)
            }),
            hidden_bias: vec![0.0; hidden],
            output: Matrix::from_fn(2, hidden, |_, _| {
                s2 * rng.sample::<f64, _>(rand_distr::StandardNormal)
            }),
            output_bias: vec![0.0; 2],
            temperature: DEFAULT_GUMBEL_TEMPERATURE,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.cols()
    }

    pub fn features(e_a: &[f64], e_b: &[f64], freq: f64, cos: f64) -> Vec<f64> {
        let mut f = Vec::with_capacity(e_a.len() + e_b.len() + 2);
        f.extend_from_slice(e_a);
        f.extend_from_slice(e_b);
        f.push(freq);
        f.push(cos);
        f
    }

    fn check(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "merge gate features",
                expected: self.input_dim(),
                got: features.len(),
            });
        }
        Ok(())
    }

    fn forward(&self, features: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut h = self.hidden.matvec(features);
        for (hi, bi) in h.iter_mut().zip(&self.hidden_bias) {
            *hi = (*hi + bi).tanh();
        }
        let mut logits = self.output.matvec(&h);
        axpy(1.0, &self.output_bias, &mut logits);
        (h, logits)
    }

    /// `π = softmax(f_φ(features))`.
    pub fn probabilities(&self, features: &[f64]) -> Result<[f64; 2]> {
        self.check(features)?;
        let (_, logits) = self.forward(features);
        let p = softmax(&logits);
        Ok([p[0], p[1]])
    }

    /// Hard inference decision `π_merge > π_keep`.
    pub fn merges(&self, features: &[f64]) -> Result<bool> {
        let p = self.probabilities(features)?;
        Ok(p[1] > p[0])
    }

    /// Relaxed merge weight `softmax((log π + g)/τ_g)_merge`.
    pub fn relaxed(&self, features: &[f64], noise: [f64; 2]) -> Result<f64> {
        relaxed_gate(self.probabilities(features)?, noise, self.temperature)
    }

    /// Cross-entropy `−log π_target` and its gradient.
    pub fn cross_entropy(
        &self,
        features: &[f64],
        merge_target: bool,
    ) -> Result<(f64, GateGradient)> {
        let (loss, grad, _) = self.cross_entropy_with_input(features, merge_target)?;
        Ok((loss, grad))
    }

    /// Like [`MergeGate::cross_entropy`], also returning the gradient with
    /// respect to the input features.
    pub fn cross_entropy_with_input(
        &self,
        features: &[f64],
        merge_target: bool,
    ) -> Result<(f64, GateGradient, Vec<f64>)> {
        self.check(features)?;
        let (h, logits) = self.forward(features);
        let p = softmax(&logits);
        let y = merge_target as usize;
        let loss = -p[y].max(1e-300).ln();
        let mut dlogits = p.clone();
        dlogits[y] -= 1.0;
        let mut grad = GateGradient::zeros_like(self);
        grad.output.add_outer(1.0, &dlogits, &h);
        grad.output_bias.copy_from_slice(&dlogits);
        let dh = self.output.matvec_t(&dlogits);
        let dpre: Vec<f64> = dh
            .iter()
            .zip(&h)
            .map(|(g, hi)| g * (1.0 - hi * hi))
            .collect();
        grad.hidden.add_outer(1.0, &dpre, features);
        grad.hidden_bias.copy_from_slice(&dpre);
        let dfeatures = self.hidden.matvec_t(&dpre);
        Ok((loss, grad, dfeatures))
    }

    pub fn num_params(&self) -> usize {
        self.hidden.as_slice().len() + self.hidden_bias.len() + self.output.as_slice().len() + 2
    }

    /// Weights in a fixed flat order: hidden, hidden bias, output, output bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.hidden.as_slice().to_vec();
        v.extend(&self.hidden_bias);
        v.extend(self.output.as_slice());
        v.extend(&self.output_bias);
        v
    }

    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "gate parameter count");
        let mut rest = flat;
        for dst in [
            self.hidden.as_mut_slice(),
            &mut self.hidden_bias[..],
            self.output.as_mut_slice(),
            &mut self.output_bias[..],
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
    }

    pub fn apply_gradient(&mut self, grad: &GateGradient, lr: f64) {
        axpy(-lr, grad.hidden.as_slice(), self.hidden.as_mut_slice());
        axpy(-lr, &grad.hidden_bias, &mut self.hidden_bias);
        axpy(-lr, grad.output.as_slice(), self.output.as_mut_slice());
        axpy(-lr, &grad.output_bias, &mut self.output_bias);
    }
}

/// Gumbel-Softmax relaxation of a two-class distribution. Zero components are
/// clamped at `log(1e-12)` before the noise is added.
pub fn relaxed_gate(pi: [f64; 2], noise: [f64; 2], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::invalid("Gumbel temperature must be positive"));
    }
    let logit = |p: f64| {
        if p > 0.0 {
            p.ln().max(LOG_PROB_FLOOR)
        } else {
            LOG_PROB_FLOOR
        }
    };
    let y0 = (logit(pi[0]) + noise[0]) / temperature;
    let y1 = (logit(pi[1]) + noise[1]) / temperature;
    Ok(sigmoid(y1 - y0))
}

/// Two i.i.d. Gumbel(0, 1) draws.
pub fn sample_gumbel_noise<R: Rng>(rng: &mut R) -> [f64; 2] {
    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    [rng.sample(g), rng.sample(g)]
}
