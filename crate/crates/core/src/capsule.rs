//! Per-depth capsule parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix};
use crate::routing::squash_unchecked;

/// Default decay for the exponential moving average that maintains centers.
pub const DEFAULT_EMA_DECAY: f64 = 0.99;

/// Capsules of one depth: pose transforms, biases, running centers and an
/// optional up-projection back to the item space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleLayer {
    /// `K` matrices of shape `d_c × d`.
    pub pose: Vec<Matrix>,
    /// `K` vectors of length `d_c`.
    pub bias: Vec<Vec<f64>>,
    /// `K` EMA centers of length `d_c`.
    pub centers: Vec<Vec<f64>>,
    /// `d × d_c` map applied to routed outputs before they are subtracted from
    /// the residual. `None` means identity and requires `d_c == d`.
    pub up_projection: Option<Matrix>,
    /// Number of EMA updates each center has received.
    pub center_updates: Vec<u64>,
}

impl CapsuleLayer {
    /// Pose entries ~ N(0, 1/d), zero biases, centers at `squash(b_k)`.
    pub fn random<R: Rng>(
        num_capsules: usize,
        input_dim: usize,
        capsule_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self::random_with_gain(num_capsules, input_dim, capsule_dim, 1.0, rng)
    }

    /// Like [`CapsuleLayer::random`] with pose entries ~ N(0, gain²/d).
    pub fn random_with_gain<R: Rng>(
        num_capsules: usize,
        input_dim: usize,
        capsule_dim: usize,
        gain: f64,
        rng: &mut R,
    ) -> Self {
        let pose_scale = gain / (input_dim as f64).sqrt();
        let pose = (0..num_capsules)
            .map(|_| {
                Matrix::from_fn(capsule_dim, input_dim, |_, _| {
                    pose_scale * rng.sample::<f64, _>(StandardNormal)
                })
            })
            .collect();
        let bias = vec![vec![0.0; capsule_dim]; num_capsules];
        let centers = bias
            .iter()
            .map(|b: &Vec<f64>| squash_unchecked(b))
            .collect();
        let up_projection = (capsule_dim != input_dim).then(|| {
            let s = 1.0 / (capsule_dim as f64).sqrt();
            Matrix::from_fn(input_dim, capsule_dim, |_, _| {
                s * rng.sample::<f64, _>(StandardNormal)
            })
        });
        Self {
            pose,
            bias,
            centers,
            up_projection,
            center_updates: vec![0; num_capsules],
        }
    }

    pub fn num_capsules(&self) -> usize {
        self.pose.len()
    }

    pub fn input_dim(&self) -> usize {
        self.pose.first().map_or(0, Matrix::cols)
    }

    pub fn capsule_dim(&self) -> usize {
        self.pose.first().map_or(0, Matrix::rows)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.num_capsules();
        if k == 0 {
            return Err(Error::invalid("capsule layer has no capsules"));
        }
        let (d, dc) = (self.input_dim(), self.capsule_dim());
        for w in &self.pose {
            if w.rows() != dc || w.cols() != d {
                return Err(Error::invalid("capsules in a layer must share shapes"));
            }
        }
        if self.bias.len() != k || self.centers.len() != k || self.center_updates.len() != k {
            return Err(Error::invalid(
                "bias/center count differs from capsule count",
            ));
        }
        for v in self.bias.iter().chain(&self.centers) {
            if v.len() != dc {
                return Err(Error::DimensionMismatch {
                    context: "capsule bias/center",
                    expected: dc,
                    got: v.len(),
                });
            }
        }
        match &self.up_projection {
            Some(p) if p.rows() != d || p.cols() != dc => Err(Error::invalid(format!(
                "up-projection must be {d}x{dc}, found {}x{}",
                p.rows(),
                p.cols()
            ))),
            None if dc != d => Err(Error::invalid(format!(
                "capsule dim {dc} differs from input dim {d} and no up-projection is configured"
            ))),
            _ => Ok(()),
        }
    }

    /// Maps a capsule-space vector into the item space.
    pub fn project_up(&self, z: &[f64]) -> Vec<f64> {
        match &self.up_projection {
            Some(p) => p.matvec(z),
            None => z.to_vec(),
        }
    }

    /// One EMA step per capsule from the mean of the supplied outputs. The first
    /// update of a center replaces the initial value outright.
    pub fn ema_update(&mut self, decay: f64, sums: &[Vec<f64>], counts: &[usize]) {
        for k in 0..self.num_capsules() {
            if counts[k] == 0 {
                continue;
            }
            let inv = 1.0 / counts[k] as f64;
            let center = &mut self.centers[k];
            if self.center_updates[k] == 0 {
                for (c, s) in center.iter_mut().zip(&sums[k]) {
                    *c = s * inv;
                }
            } else {
                for (c, s) in center.iter_mut().zip(&sums[k]) {
                    *c = decay * *c + (1.0 - decay) * s * inv;
                }
            }
            self.center_updates[k] += 1;
        }
    }

    pub fn max_center_norm(&self) -> f64 {
        self.centers.iter().map(|c| norm(c)).fold(0.0, f64::max)
    }
}

/// Shape of a capsule stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackShape {
    pub input_dim: usize,
    pub capsule_dim: usize,
    pub capsules_per_depth: Vec<usize>,
    /// Scale of the initial pose transforms; larger votes sharpen routing.
    pub pose_gain: f64,
}

impl StackShape {
    pub fn uniform(
        input_dim: usize,
        capsule_dim: usize,
        num_capsules: usize,
        depth: usize,
    ) -> Self {
        Self {
            input_dim,
            capsule_dim,
            capsules_per_depth: vec![num_capsules; depth],
            pose_gain: 1.0,
        }
    }
}

/// The full tokenizer parameter set: one [`CapsuleLayer`] per depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapsuleStack {
    pub layers: Vec<CapsuleLayer>,
    pub ema_decay: f64,
    /// Frozen centers ignore EMA and spread-gradient updates.
    pub centers_frozen: bool,
}

impl CapsuleStack {
    pub fn new(layers: Vec<CapsuleLayer>) -> Result<Self> {
        let stack = Self {
            layers,
            ema_decay: DEFAULT_EMA_DECAY,
            centers_frozen: false,
        };
        stack.validate()?;
        Ok(stack)
    }

    pub fn random(shape: &StackShape, seed: u64) -> Result<Self> {
        if shape.input_dim == 0
            || shape.capsule_dim == 0
            || !(shape.pose_gain > 0.0 && shape.pose_gain.is_finite())
        {
            return Err(Error::invalid("dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = shape
            .capsules_per_depth
            .iter()
            .map(|&k| {
                CapsuleLayer::random_with_gain(
                    k,
                    shape.input_dim,
                    shape.capsule_dim,
                    shape.pose_gain,
                    &mut rng,
                )
            })
            .collect();
        Self::new(layers)
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.layers.first().ok_or(Error::Empty("capsule stack"))?;
        let (d, dc) = (first.input_dim(), first.capsule_dim());
        for layer in &self.layers {
            layer.validate()?;
            if layer.input_dim() != d || layer.capsule_dim() != dc {
                return Err(Error::invalid(
                    "all depths must share input and capsule dims",
                ));
            }
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::invalid("EMA decay must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn capsule_dim(&self) -> usize {
        self.layers[0].capsule_dim()
    }

    pub fn capsules_per_depth(&self) -> Vec<usize> {
        self.layers.iter().map(CapsuleLayer::num_capsules).collect()
    }

    /// `Σ_ℓ K_ℓ`, the number of base SID tokens.
    pub fn total_codes(&self) -> usize {
        self.layers.iter().map(CapsuleLayer::num_capsules).sum()
    }

    /// Offset of each depth in the flat base-token numbering.
    pub fn code_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.depth());
        let mut acc = 0;
        for layer in &self.layers {
            offsets.push(acc);
            acc += layer.num_capsules();
        }
        offsets
    }

    /// Center of a flat base token, if the id is in range.
    pub fn center_of_code(&self, code: usize) -> Option<&[f64]> {
        let mut rest = code;
        for layer in &self.layers {
            if rest < layer.num_capsules() {
                return Some(&layer.centers[rest]);
            }
            rest -= layer.num_capsules();
        }
        None
    }
}
