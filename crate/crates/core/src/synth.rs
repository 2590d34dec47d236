//! Seeded synthetic catalogs: clustered unit embeddings with optional
//! boundary items, and user histories from a cluster-level Markov chain.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{EmbeddingTable, InteractionLog};
use crate::linalg::normalized;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_items: usize,
    pub dim: usize,
    pub num_clusters: usize,
    /// Per-coordinate standard deviation of the noise around a cluster mean.
    pub cluster_spread: f64,
    /// Share of items placed between two cluster means.
    pub boundary_fraction: f64,
    pub num_users: usize,
    pub history_length: usize,
    /// Probability that the next interaction stays in the current cluster.
    pub stay_probability: f64,
    /// Probability of a uniform jump; otherwise the chain moves to the next cluster.
    pub jump_probability: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_items: 2000,
            dim: 32,
            num_clusters: 8,
            cluster_spread: 0.05,
            boundary_fraction: 0.0,
            num_users: 400,
            history_length: 20,
            stay_probability: 0.5,
            jump_probability: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clusters == 0 || self.num_clusters > self.num_items {
            return Err(Error::Config(format!(
                "num_clusters must lie in 1..={}, got {}",
                self.num_items, self.num_clusters
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if !(self.cluster_spread > 0.0 && self.cluster_spread.is_finite()) {
            return Err(Error::Config("cluster_spread must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.boundary_fraction) {
            return Err(Error::Config("boundary_fraction must lie in [0, 1]".into()));
        }
        if self.boundary_fraction > 0.0 && self.num_clusters < 2 {
            return Err(Error::Config(
                "boundary items need at least two clusters".into(),
            ));
        }
        let (p, q) = (self.stay_probability, self.jump_probability);
        if !(p >= 0.0 && q >= 0.0 && p + q <= 1.0) {
            return Err(Error::Config(
                "stay and jump probabilities must be non-negative and sum to at most 1".into(),
            ));
        }
        Ok(())
    }
}

/// A generated catalog with its ground-truth structure.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub table: EmbeddingTable,
    pub log: InteractionLog,
    pub means: Vec<Vec<f64>>,
    /// Dominant cluster of every item.
    pub labels: Vec<usize>,
    pub is_boundary: Vec<bool>,
}

fn unit_gaussian(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return normalized(&v);
        }
    }
}

pub fn synth_generate(cfg: &SynthConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.cluster_spread).map_err(|e| Error::Config(e.to_string()))?;
    let means: Vec<Vec<f64>> = (0..cfg.num_clusters)
        .map(|_| unit_gaussian(cfg.dim, &mut rng))
        .collect();

    let num_boundary = (cfg.boundary_fraction * cfg.num_items as f64).round() as usize;
    let mut is_boundary = vec![false; cfg.num_items];
    for i in rand::seq::index::sample(&mut rng, cfg.num_items, num_boundary) {
        is_boundary[i] = true;
    }

    let mut values = Vec::with_capacity(cfg.num_items * cfg.dim);
    let mut labels = Vec::with_capacity(cfg.num_items);
    let mut next_core = 0usize;
    for &boundary in &is_boundary {
        let (center, label) = if boundary {
            let a = rng.random_range(0..cfg.num_clusters);
            let b = (a + rng.random_range(1..cfg.num_clusters)) % cfg.num_clusters;
            let w: f64 = rng.random_range(0.3..=0.7);
            let mix: Vec<f64> = means[a]
                .iter()
                .zip(&means[b])
                .map(|(x, y)| w * x + (1.0 - w) * y)
                .collect();
            (mix, if w >= 0.5 { a } else { b })
        } else {
            // Core items cycle through clusters so none is left empty.
            let c = next_core % cfg.num_clusters;
            next_core += 1;
            (means[c].clone(), c)
        };
        let x: Vec<f64> = center.iter().map(|m| m + noise.sample(&mut rng)).collect();
        values.extend(normalized(&x).into_iter().map(|v| v as f32));
        labels.push(label);
    }
    let ids = (0..cfg.num_items).map(|i| format!("item{i:06}")).collect();
    let table = EmbeddingTable::new(ids, cfg.dim, values)?;

    let mut members = vec![Vec::new(); cfg.num_clusters];
    for (i, &c) in labels.iter().enumerate() {
        members[c].push(i);
    }
    let mut users = Vec::with_capacity(cfg.num_users);
    for _ in 0..cfg.num_users {
        let mut cluster = rng.random_range(0..cfg.num_clusters);
        let mut seq = Vec::with_capacity(cfg.history_length);
        for _ in 0..cfg.history_length {
            let item = match members[cluster].choose(&mut rng) {
                Some(&i) => i,
                None => rng.random_range(0..cfg.num_items),
            };
            seq.push(table.ids()[item].clone());
            let u: f64 = rng.random();
            cluster = if u < cfg.stay_probability {
                cluster
            } else if u < cfg.stay_probability + cfg.jump_probability {
                rng.random_range(0..cfg.num_clusters)
            } else {
                (cluster + 1) % cfg.num_clusters
            };
        }
        users.push(seq);
    }
    Ok(SyntheticCorpus {
        table,
        log: InteractionLog { users },
        means,
        labels,
        is_boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{dot, norm};

    fn row(c: &SyntheticCorpus, i: usize) -> Vec<f64> {
        c.table.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    #[test]
    fn items_are_unit_and_seeded() {
        let cfg = SynthConfig {
            num_items: 300,
            num_users: 20,
            ..SynthConfig::default()
        };
        let a = synth_generate(&cfg).unwrap();
        assert_eq!(a, synth_generate(&cfg).unwrap());
        for i in 0..a.table.len() {
            assert!((norm(&row(&a, i)) - 1.0).abs() < 1e-6);
        }
        assert_ne!(
            a.table,
            synth_generate(&SynthConfig { seed: 1, ..cfg })
                .unwrap()
                .table
        );
        assert!(a.log.to_indices(&a.table).is_ok());
    }

    #[test]
    fn core_items_stay_near_their_mean() {
        let cfg = SynthConfig {
            num_items: 400,
            num_users: 0,
            ..SynthConfig::default()
        };
        let c = synth_generate(&cfg).unwrap();
        // Noise norm concentrates near sigma·sqrt(d).
        let radius = 3.0 * cfg.cluster_spread * (cfg.dim as f64).sqrt();
        for i in 0..c.table.len() {
            let x = row(&c, i);
            let dist = x
                .iter()
                .zip(&c.means[c.labels[i]])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(dist < radius, "item {i} at {dist}");
        }
    }

    #[test]
    fn own_mean_is_closer_than_others() {
        let cfg = SynthConfig {
            num_items: 800,
            num_users: 0,
            ..SynthConfig::default()
        };
        let c = synth_generate(&cfg).unwrap();
        let (mut own, mut other, mut n_other) = (0.0, 0.0, 0usize);
        for i in 0..c.table.len() {
            let x = row(&c, i);
            for (k, m) in c.means.iter().enumerate() {
                if k == c.labels[i] {
                    own += dot(&x, m);
                } else {
                    other += dot(&x, m);
                    n_other += 1;
                }
            }
        }
        assert!(own / c.table.len() as f64 > other / n_other as f64);
    }

    #[test]
    fn boundary_share_is_respected() {
        let cfg = SynthConfig {
            num_items: 1000,
            boundary_fraction: 0.3,
            num_users: 0,
            ..SynthConfig::default()
        };
        let c = synth_generate(&cfg).unwrap();
        assert_eq!(c.is_boundary.iter().filter(|b| **b).count(), 300);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = SynthConfig {
            num_items: 4,
            ..SynthConfig::default()
        };
        assert!(synth_generate(&base).is_err());
        assert!(synth_generate(&SynthConfig {
            boundary_fraction: 1.5,
            ..SynthConfig::default()
        })
        .is_err());
        assert!(synth_generate(&SynthConfig {
            cluster_spread: 0.0,
            ..SynthConfig::default()
        })
        .is_err());
    }
}
