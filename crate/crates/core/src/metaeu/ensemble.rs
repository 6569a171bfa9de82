//! Weighted ensembles of base learners and the ablation switches.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::context::TaskGraph;
use super::learner::{generate, raeeg_init, BaseLearner};
use crate::error::{Error, Result};
use crate::kge::EmbeddingStore;
use crate::optim::on_simplex;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

/// Tolerance for `Σ w_i = 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble<T> {
    pub learners: Vec<BaseLearner<T>>,
    pub weights: Vec<T>,
}

impl<T: Scalar> Ensemble<T> {
    /// `n` learners with uniform weights; learner `i` draws from stream `i` under `seed`.
    pub fn new(n: usize, dim: usize, layers: usize, num_relations: usize, seed: u64) -> Result<Self> {
        if n == 0 || dim == 0 {
            return Err(Error::Config("an ensemble needs at least one learner and d > 0".into()));
        }
        let learners = (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                BaseLearner::new(dim, layers, num_relations, &mut rng)
            })
            .collect();
        Ok(Self {
            learners,
            weights: vec![T::one() / T::from_usize_lossy(n); n],
        })
    }

    pub fn len(&self) -> usize {
        self.learners.len()
    }

    pub fn is_empty(&self) -> bool {
        self.learners.is_empty()
    }

    pub fn check(&self) -> Result<()> {
        if self.learners.is_empty() || self.weights.len() != self.learners.len() {
            return Err(Error::Contract("ensemble needs one weight per learner and at least one learner".into()));
        }
        if !on_simplex(&self.weights, T::lit(SIMPLEX_TOL)) {
            return Err(Error::Contract("ensemble weights are not on the simplex".into()));
        }
        let first = &self.learners[0];
        for l in &self.learners {
            l.check()?;
            if (l.dim(), l.layers(), l.num_relations()) != (first.dim(), first.layers(), first.num_relations()) {
                return Err(Error::dim("ensemble", "learners differ in shape"));
            }
        }
        Ok(())
    }

    /// Removes learner `i` and renormalizes the remaining weights.
    pub fn drop_learner(&self, i: usize) -> Result<Self> {
        if i >= self.len() {
            return Err(Error::Config(format!("no learner {} in an ensemble of {}", i + 1, self.len())));
        }
        if self.len() == 1 {
            return Err(Error::Config("cannot drop the only learner".into()));
        }
        let mut learners = self.learners.clone();
        let mut weights = self.weights.clone();
        learners.remove(i);
        weights.remove(i);
        let total: T = weights.iter().copied().sum();
        if total > T::zero() {
            weights.iter_mut().for_each(|w| *w /= total);
        } else {
            let u = T::one() / T::from_usize_lossy(weights.len());
            weights.iter_mut().for_each(|w| *w = u);
        }
        Ok(Self { learners, weights })
    }

    /// `Σ_i w_i · generate_i(init)`.
    pub fn embed(&self, graph: &TaskGraph<T>, init: &Tensor2<T>) -> Result<Tensor2<T>> {
        let mut out = Tensor2::zeros(init.rows(), init.cols());
        for (l, &w) in self.learners.iter().zip(&self.weights) {
            out.axpy(w, &generate(graph, init, l)?)?;
        }
        Ok(out)
    }
}

/// The meta-trained generator: an ensemble plus the relation tables its initializer averages.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaModel<T> {
    pub ensemble: Ensemble<T>,
    pub rel_out: Tensor2<T>,
    pub rel_in: Tensor2<T>,
}

impl<T: Scalar> MetaModel<T> {
    /// Fresh learners; the initializer tables start from `store.rel_out` / `store.rel_in`.
    pub fn new(store: &EmbeddingStore<T>, learners: usize, layers: usize, seed: u64) -> Result<Self> {
        Ok(Self {
            ensemble: Ensemble::new(learners, store.dim(), layers, store.num_relations(), seed)?,
            rel_out: store.rel_out.clone(),
            rel_in: store.rel_in.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.rel_out.cols()
    }

    pub fn check(&self) -> Result<()> {
        self.ensemble.check()?;
        let l = &self.ensemble.learners[0];
        let want = (l.num_relations(), l.dim());
        if self.rel_out.shape() != want || self.rel_in.shape() != want {
            return Err(Error::dim("meta model", "relation tables do not match the learners"));
        }
        if !self.rel_out.is_finite() || !self.rel_in.is_finite() {
            return Err(Error::Training("non-finite relation tables".into()));
        }
        Ok(())
    }

    /// Ensemble embeddings of every task entity.
    pub fn embed(&self, graph: &TaskGraph<T>) -> Result<Tensor2<T>> {
        let init = raeeg_init(graph, &self.rel_out, &self.rel_in)?;
        self.ensemble.embed(graph, &init)
    }
}

/// Pipeline switches of the component study.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Ablation {
    /// Zero-based index of a learner to remove.
    pub drop_learner: Option<usize>,
    /// Replace relation-aware initialization by seeded random vectors.
    pub disable_raeeg: bool,
    /// Use the initial embeddings as final embeddings.
    pub disable_neem: bool,
}

impl Ablation {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_none(&self) -> bool {
        *self == Self::default()
    }

    /// Applies the learner switch to `model`.
    pub fn apply<T: Scalar>(&self, model: &MetaModel<T>) -> Result<MetaModel<T>> {
        let mut out = model.clone();
        if let Some(i) = self.drop_learner {
            out.ensemble = model.ensemble.drop_learner(i)?;
        }
        Ok(out)
    }
}

impl FromStr for Ablation {
    type Err = Error;

    /// `none`, `disable-raeeg`, `disable-neem` or `drop-learner-<k>` with `k` counted from 1.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::none()),
            "disable-raeeg" => Ok(Self {
                disable_raeeg: true,
                ..Self::none()
            }),
            "disable-neem" => Ok(Self {
                disable_neem: true,
                ..Self::none()
            }),
            _ => {
                let k: usize = s
                    .strip_prefix("drop-learner-")
                    .and_then(|k| k.parse().ok())
                    .filter(|&k| k >= 1)
                    .ok_or_else(|| Error::Config(format!("unknown ablation switch {s:?}")))?;
                Ok(Self {
                    drop_learner: Some(k - 1),
                    ..Self::none()
                })
            }
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut parts = Vec::new();
        if let Some(i) = self.drop_learner {
            parts.push(format!("drop-learner-{}", i + 1));
        }
        if self.disable_raeeg {
            parts.push("disable-raeeg".to_owned());
        }
        if self.disable_neem {
            parts.push("disable-neem".to_owned());
        }
        if parts.is_empty() {
            parts.push("none".to_owned());
        }
        f.write_str(&parts.join("+"))
    }
}

/// Uniform random rows whose per-coordinate RMS matches `reference`.
pub fn random_like<T: Scalar, R: Rng + ?Sized>(rows: usize, reference: &Tensor2<T>, rng: &mut R) -> Tensor2<T> {
    let n = T::from_usize_lossy(reference.data().len().max(1));
    let rms = (reference.norm_sq() / n).sqrt();
    let bound = if rms > T::zero() { rms * T::lit(3.0).sqrt() } else { T::one() };
    Tensor2::random_uniform(rows, reference.cols(), bound, rng)
}
