use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EmbeddingStore, Scorer};
use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Triple};
use crate::scalar::Scalar;

/// Resampling bound of [`negative_sample`].
pub const MAX_NEGATIVE_RETRIES: usize = 64;

/// Corrupts the head (probability ½) or the tail of `triple` with a uniform
/// entity, resampling until the result is not a known triple.
pub fn negative_sample<R: Rng + ?Sized>(
    num_entities: usize,
    known: &HashSet<Triple>,
    triple: &Triple,
    rng: &mut R,
) -> Result<Triple> {
    corrupt(known, triple, rng, |rng| rng.random_range(0..num_entities))
}

/// [`negative_sample`] with the replacement drawn from `candidates`.
pub fn negative_sample_among<R: Rng + ?Sized>(
    candidates: &[usize],
    known: &HashSet<Triple>,
    triple: &Triple,
    rng: &mut R,
) -> Result<Triple> {
    if candidates.is_empty() {
        return Err(Error::Sampling("no candidate entities to corrupt with".into()));
    }
    corrupt(known, triple, rng, |rng| candidates[rng.random_range(0..candidates.len())])
}

fn corrupt<R: Rng + ?Sized>(
    known: &HashSet<Triple>,
    triple: &Triple,
    rng: &mut R,
    mut draw: impl FnMut(&mut R) -> usize,
) -> Result<Triple> {
    for _ in 0..MAX_NEGATIVE_RETRIES {
        let corrupt_head = rng.random_bool(0.5);
        let e = draw(rng);
        let candidate = if corrupt_head {
            Triple::new(e, triple.relation, triple.tail)
        } else {
            Triple::new(triple.head, triple.relation, e)
        };
        if !known.contains(&candidate) {
            return Ok(candidate);
        }
    }
    Err(Error::Sampling(format!(
        "no negative for ({triple}) after {MAX_NEGATIVE_RETRIES} draws"
    )))
}

/// Paired margin ranking loss `Σ max(0, γ + s(neg) − s(pos))`.
pub fn margin_loss<T: Scalar>(
    store: &EmbeddingStore<T>,
    positives: &[Triple],
    negatives: &[Triple],
    margin: T,
) -> Result<T> {
    check_pairs(positives, negatives)?;
    let mut loss = T::zero();
    for (p, n) in positives.iter().zip(negatives) {
        let term = margin + store.score(n)? - store.score(p)?;
        if term > T::zero() {
            loss += term;
        }
    }
    Ok(loss)
}

fn check_pairs(positives: &[Triple], negatives: &[Triple]) -> Result<()> {
    if positives.is_empty() {
        return Err(Error::Contract("margin loss over an empty batch".into()));
    }
    if positives.len() != negatives.len() {
        return Err(Error::Contract(format!(
            "{} positives paired with {} negatives",
            positives.len(),
            negatives.len()
        )));
    }
    Ok(())
}

/// Sparse per-row gradient accumulator, iterated in index order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowGrads<T> {
    pub entities: BTreeMap<usize, Vec<T>>,
    pub relations: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> RowGrads<T> {
    fn add(map: &mut BTreeMap<usize, Vec<T>>, row: usize, g: &[T], sign: T) {
        let slot = map.entry(row).or_insert_with(|| vec![T::zero(); g.len()]);
        for (s, &v) in slot.iter_mut().zip(g) {
            *s += sign * v;
        }
    }

    fn add_score(&mut self, t: &Triple, scorer: &Scorer, store: &EmbeddingStore<T>, sign: T) -> T {
        let sg = scorer.score_grad(
            store.entities.row(t.head),
            store.relations.row(t.relation),
            store.entities.row(t.tail),
        );
        Self::add(&mut self.entities, t.head, &sg.head, sign);
        Self::add(&mut self.relations, t.relation, &sg.relation, sign);
        Self::add(&mut self.entities, t.tail, &sg.tail, sign);
        sg.score
    }
}

/// Margin loss and its gradient with respect to every touched row.
pub fn margin_loss_grad<T: Scalar>(
    store: &EmbeddingStore<T>,
    positives: &[Triple],
    negatives: &[Triple],
    margin: T,
) -> Result<(T, RowGrads<T>)> {
    check_pairs(positives, negatives)?;
    let mut loss = T::zero();
    let mut grads = RowGrads::default();
    let scorer = store.scorer;
    for (p, n) in positives.iter().zip(negatives) {
        store.check_triple(p)?;
        store.check_triple(n)?;
        let term = margin + store.score_unchecked(n) - store.score_unchecked(p);
        if term > T::zero() {
            loss += term;
            grads.add_score(n, &scorer, store, T::one());
            grads.add_score(p, &scorer, store, -T::one());
        }
    }
    Ok((loss, grads))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig<T> {
    pub dim: usize,
    pub learning_rate: T,
    pub margin: T,
    pub epochs: usize,
    pub batch_size: usize,
    pub negatives_per_positive: usize,
    pub seed: u64,
    /// Initial embeddings are uniform in `[-init_bound, init_bound)`.
    pub init_bound: T,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            dim: 32,
            learning_rate: T::lit(1e-2),
            margin: T::one(),
            epochs: 100,
            batch_size: 64,
            negatives_per_positive: 1,
            seed: 0,
            init_bound: T::lit(0.5),
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: T| v > T::zero() && v.is_finite();
        if !positive(self.learning_rate) || !positive(self.margin) || !positive(self.init_bound) {
            return Err(Error::Config(
                "learning rate, margin and init bound must be positive".into(),
            ));
        }
        if self.dim == 0 || self.epochs == 0 || self.batch_size == 0 || self.negatives_per_positive == 0 {
            return Err(Error::Config(
                "dimension, epochs, batch size and negatives must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T> {
    pub store: EmbeddingStore<T>,
    /// Summed hinge loss of every epoch.
    pub epoch_losses: Vec<T>,
}

/// Mini-batch SGD on the margin ranking loss over `graph`'s triples.
///
/// Negatives are filtered against `graph`. After training, `rel_out`/`rel_in`
/// hold the head/tail centroids of each relation.
pub fn train_baseline<T: Scalar>(
    graph: &KnowledgeGraph,
    scorer: Scorer,
    config: &TrainConfig<T>,
) -> Result<TrainOutcome<T>> {
    config.validate()?;
    if graph.is_empty() {
        return Err(Error::EmptyGraph("training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = EmbeddingStore::random(
        scorer,
        graph.num_entities(),
        graph.num_relations(),
        config.dim,
        config.init_bound,
        &mut rng,
    )?;
    let mut order: Vec<Triple> = graph.triples().to_vec();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let k = config.negatives_per_positive;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = T::zero();
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut positives = Vec::with_capacity(batch.len() * k);
            let mut negatives = Vec::with_capacity(batch.len() * k);
            for t in batch {
                for _ in 0..k {
                    positives.push(*t);
                    negatives.push(negative_sample(
                        graph.num_entities(),
                        graph.members(),
                        t,
                        &mut rng,
                    )?);
                }
            }
            let (loss, grads) = margin_loss_grad(&store, &positives, &negatives, config.margin)?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss in epoch {epoch}, batch {b}")));
            }
            epoch_loss += loss;
            apply_sgd(&mut store, &grads, config.learning_rate);
        }
        epoch_losses.push(epoch_loss);
    }
    store.set_relation_centroids(graph.triples());
    store.check()?;
    Ok(TrainOutcome {
        store,
        epoch_losses,
    })
}

pub(crate) fn apply_sgd<T: Scalar>(store: &mut EmbeddingStore<T>, grads: &RowGrads<T>, lr: T) {
    for (&i, g) in &grads.entities {
        for (v, &gv) in store.entities.row_mut(i).iter_mut().zip(g) {
            *v -= lr * gv;
        }
    }
    for (&i, g) in &grads.relations {
        for (v, &gv) in store.relations.row_mut(i).iter_mut().zip(g) {
            *v -= lr * gv;
        }
    }
    store.wrap_phases();
}
