//! Synthetic knowledge graphs with a planted latent geometry.
//!
//! Each entity gets a latent point `z_e ~ N(0, I)` and each relation a
//! translation `v_r`. For every `(h, r)` kept with probability `density`, the
//! tails are the `tails_per_head` entities nearest to `z_h + v_r`. The graph is
//! therefore learnable by translation-style models and every fact is implied by
//! the geometry rather than memorised noise.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Triple, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub entities: usize,
    pub relations: usize,
    pub latent_dim: usize,
    pub tails_per_head: usize,
    pub density: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            entities: 200,
            relations: 10,
            latent_dim: 4,
            tails_per_head: 2,
            density: 0.5,
            seed: 0,
        }
    }
}

pub fn synthesize(config: &SynthConfig) -> Result<KnowledgeGraph> {
    let SynthConfig {
        entities: n,
        relations: n_r,
        latent_dim: k,
        tails_per_head,
        density,
        seed,
    } = *config;
    if n < 2 || n_r == 0 || k == 0 || tails_per_head == 0 || tails_per_head >= n {
        return Err(Error::Config(format!("degenerate synthetic graph shape {config:?}")));
    }
    if !(density > 0.0 && density <= 1.0) {
        return Err(Error::Config(format!("density {density} not in (0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = |count: usize| -> Vec<f64> { (0..count).map(|_| rng.sample(StandardNormal)).collect() };
    let z = normal(n * k);
    let v = normal(n_r * k);

    let mut triples = Vec::new();
    let mut dist: Vec<(f64, usize)> = Vec::with_capacity(n);
    for h in 0..n {
        for r in 0..n_r {
            if !rng.random_bool(density) {
                continue;
            }
            let target: Vec<f64> = (0..k).map(|j| z[h * k + j] + v[r * k + j]).collect();
            dist.clear();
            dist.extend((0..n).filter(|&e| e != h).map(|e| {
                let d2 = (0..k).map(|j| (z[e * k + j] - target[j]).powi(2)).sum::<f64>();
                (d2, e)
            }));
            dist.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            triples.extend(dist[..tails_per_head].iter().map(|&(_, t)| Triple::new(h, r, t)));
        }
    }
    let entities = Vocab::from_names((0..n).map(|i| format!("e{i}")))?;
    let relations = Vocab::from_names((0..n_r).map(|i| format!("r{i}")))?;
    Ok(KnowledgeGraph::new(Arc::new(entities), Arc::new(relations), triples)?.0)
}
