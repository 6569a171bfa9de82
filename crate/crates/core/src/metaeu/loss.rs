//! Objectives of meta-training and unlearning.
//!
//! `L1`/`L2` are mean margin losses of generated embeddings on retain and
//! forget queries, combined over learners with the ensemble weights. `L3`
//! trades them off with the sign that makes descent maximize the forget loss,
//! `L4` keeps regenerated rows near the original model and `L5` is a short
//! fine-tune of the regenerated rows on retained triples.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Triple;
use crate::kge::{self, negative_sample, EmbeddingStore};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

/// Positive/negative triple pairs over a table whose first rows are generated
/// embeddings and whose remaining rows are copied from a store.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryBatch {
    generated: usize,
    external: Vec<usize>,
    positives: Vec<Triple>,
    negatives: Vec<Triple>,
}

impl QueryBatch {
    /// `positives`/`negatives` use global entity ids; entities in `generated`
    /// (global → generated row) are scored with generated rows.
    pub fn new(
        positives: &[Triple],
        negatives: &[Triple],
        generated: &HashMap<usize, usize>,
        n_generated: usize,
    ) -> Result<Self> {
        if positives.len() != negatives.len() {
            return Err(Error::Contract(format!(
                "{} positives paired with {} negatives",
                positives.len(),
                negatives.len()
            )));
        }
        let mut external = Vec::new();
        let mut ext_index: HashMap<usize, usize> = HashMap::new();
        let mut map = |g: usize| -> usize {
            if let Some(&l) = generated.get(&g) {
                return l;
            }
            *ext_index.entry(g).or_insert_with(|| {
                external.push(g);
                n_generated + external.len() - 1
            })
        };
        let mut convert = |ts: &[Triple]| -> Vec<Triple> {
            ts.iter()
                .map(|t| Triple::new(map(t.head), t.relation, map(t.tail)))
                .collect()
        };
        let positives = convert(positives);
        let negatives = convert(negatives);
        Ok(Self {
            generated: n_generated,
            external,
            positives,
            negatives,
        })
    }

    /// Draws one negative per positive against `known`.
    pub fn sample<R: Rng + ?Sized>(
        positives: &[Triple],
        num_entities: usize,
        known: &HashSet<Triple>,
        generated: &HashMap<usize, usize>,
        n_generated: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let negatives = positives
            .iter()
            .map(|t| negative_sample(num_entities, known, t, rng))
            .collect::<Result<Vec<_>>>()?;
        Self::new(positives, &negatives, generated, n_generated)
    }

    pub fn len(&self) -> usize {
        self.positives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positives.is_empty()
    }

    fn check_generated<T: Scalar>(&self, generated: &Tensor2<T>) -> Result<()> {
        if generated.rows() != self.generated {
            return Err(Error::dim(
                "query batch",
                format!("{} generated rows, expected {}", generated.rows(), self.generated),
            ));
        }
        if self.is_empty() {
            return Err(Error::Contract("query loss over an empty query set".into()));
        }
        Ok(())
    }

    /// Mean margin loss with `generated` in place of the generated entities.
    pub fn mean_margin<T: Scalar>(&self, store: &EmbeddingStore<T>, generated: &Tensor2<T>, margin: T) -> Result<T> {
        self.mean_capped_margin(store, generated, margin, T::infinity())
    }

    /// [`QueryBatch::mean_margin`] with every hinge term clipped at `cap`.
    pub fn mean_capped_margin<T: Scalar>(
        &self,
        store: &EmbeddingStore<T>,
        generated: &Tensor2<T>,
        margin: T,
        cap: T,
    ) -> Result<T> {
        self.check_generated(generated)?;
        let row = |e: usize| -> &[T] {
            if e < self.generated {
                generated.row(e)
            } else {
                store.entities.row(self.external[e - self.generated])
            }
        };
        let mut total = T::zero();
        for (p, n) in self.positives.iter().zip(&self.negatives) {
            let sp = store.scorer.score_rows(row(p.head), store.relations.row(p.relation), row(p.tail));
            let sn = store.scorer.score_rows(row(n.head), store.relations.row(n.relation), row(n.tail));
            total += (margin + sn - sp).max(T::zero()).min(cap);
        }
        Ok(total / T::from_usize_lossy(self.len()))
    }

    /// [`QueryBatch::mean_margin`] recorded on a tape, differentiable in `generated`.
    pub fn mean_margin_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &EmbeddingStore<T>,
        generated: Var,
        margin: T,
    ) -> Result<Var> {
        self.mean_capped_margin_on_tape(tape, store, generated, margin, T::infinity())
    }

    /// [`QueryBatch::mean_capped_margin`] recorded on a tape.
    pub fn mean_capped_margin_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &EmbeddingStore<T>,
        generated: Var,
        margin: T,
        cap: T,
    ) -> Result<Var> {
        self.check_generated(tape.value(generated))?;
        let table = if self.external.is_empty() {
            generated
        } else {
            let ext = tape.constant(store.entities.gather_rows(&self.external)?);
            tape.concat_rows(&[generated, ext])?
        };
        let score = |tape: &mut Tape<T>, ts: &[Triple]| -> Result<Var> {
            let heads: Vec<usize> = ts.iter().map(|t| t.head).collect();
            let rels: Vec<usize> = ts.iter().map(|t| t.relation).collect();
            let tails: Vec<usize> = ts.iter().map(|t| t.tail).collect();
            let h = tape.gather_rows(table, &heads)?;
            let r = tape.constant(store.relations.gather_rows(&rels)?);
            let t = tape.gather_rows(table, &tails)?;
            kge::tape_score::score(tape, store.scorer, h, r, t)
        };
        let pos = score(tape, &self.positives)?;
        let neg = score(tape, &self.negatives)?;
        let total = if cap.is_finite() {
            // min(relu(x), cap) = relu(x) − relu(x − cap)
            let diff = tape.sub(neg, pos)?;
            let shifted = tape.add_scalar(diff, margin);
            let hinge = tape.relu(shifted);
            let over = tape.add_scalar(shifted, -cap);
            let excess = tape.relu(over);
            let clipped = tape.sub(hinge, excess)?;
            tape.sum(clipped)
        } else {
            kge::tape_score::margin_loss(tape, pos, neg, margin)?
        };
        Ok(tape.scale(total, T::one() / T::from_usize_lossy(self.len())))
    }
}

/// `Σ_i w_i ℓ_i`.
pub fn ensemble_loss<T: Scalar>(per_learner: &[T], weights: &[T]) -> Result<T> {
    if per_learner.len() != weights.len() || weights.is_empty() {
        return Err(Error::Contract(format!(
            "{} learner losses for {} weights",
            per_learner.len(),
            weights.len()
        )));
    }
    Ok(per_learner.iter().zip(weights).map(|(&l, &w)| w * l).sum())
}

/// Checks `w_a + w_b = 1` with both in `[0, 1]`.
pub fn check_combination<T: Scalar>(w_a: T, w_b: T) -> Result<()> {
    let unit = |w: T| w >= T::zero() && w <= T::one();
    if !unit(w_a) || !unit(w_b) || (w_a + w_b - T::one()).abs() > T::lit(1e-9) {
        return Err(Error::Config(format!("w_a = {w_a}, w_b = {w_b} do not form a convex combination")));
    }
    Ok(())
}

/// Descent objective `w_a·L1 − w_b·L2`: minimizing it lowers the retain loss
/// and raises the forget loss.
pub fn loss_l3<T: Scalar>(l1: T, l2: T, w_a: T, w_b: T) -> Result<T> {
    check_combination(w_a, w_b)?;
    Ok(w_a * l1 - w_b * l2)
}

/// `λ₄ · mean_e ‖generated_e − reference_e‖²`.
pub fn loss_l4<T: Scalar>(generated: &Tensor2<T>, reference: &Tensor2<T>, lambda4: T) -> Result<T> {
    if generated.shape() != reference.shape() {
        return Err(Error::Contract(format!(
            "proximity loss over {:?} generated and {:?} reference rows",
            generated.shape(),
            reference.shape()
        )));
    }
    if generated.rows() == 0 {
        return Ok(T::zero());
    }
    Ok(lambda4 * generated.sub(reference)?.norm_sq() / T::from_usize_lossy(generated.rows()))
}

/// [`loss_l4`] on a tape, differentiable in `generated`.
pub fn loss_l4_on_tape<T: Scalar>(tape: &mut Tape<T>, generated: Var, reference: &Tensor2<T>, lambda4: T) -> Result<Var> {
    if tape.value(generated).shape() != reference.shape() {
        return Err(Error::Contract("proximity loss over mismatched row sets".into()));
    }
    let rows = reference.rows().max(1);
    let r = tape.constant(reference.clone());
    let diff = tape.sub(generated, r)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, lambda4 / T::from_usize_lossy(rows)))
}

/// Full-batch SGD on the margin loss of `triples`, updating only the entity
/// rows in `rows`. Negatives are redrawn every step. Returns the loss before
/// each step.
#[allow(clippy::too_many_arguments)]
pub fn finetune<T: Scalar, R: Rng + ?Sized>(
    store: &mut EmbeddingStore<T>,
    triples: &[Triple],
    rows: &BTreeSet<usize>,
    steps: usize,
    learning_rate: T,
    margin: T,
    known: &HashSet<Triple>,
    rng: &mut R,
) -> Result<Vec<T>> {
    let mut trace = Vec::with_capacity(steps);
    if triples.is_empty() {
        return Ok(trace);
    }
    for step in 0..steps {
        let negatives = triples
            .iter()
            .map(|t| negative_sample(store.num_entities(), known, t, rng))
            .collect::<Result<Vec<_>>>()?;
        let (loss, grads) = kge::margin_loss_grad(store, triples, &negatives, margin)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("non-finite fine-tune loss at step {step}")));
        }
        trace.push(loss);
        for (e, g) in &grads.entities {
            if rows.contains(e) {
                for (v, &gv) in store.entities.row_mut(*e).iter_mut().zip(g) {
                    *v -= learning_rate * gv;
                }
            }
        }
    }
    Ok(trace)
}
