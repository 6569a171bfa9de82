//! Episodic meta-training of the generator and probes of its output on tasks.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::context::TaskGraph;
use super::ensemble::{random_like, Ablation, MetaModel};
use super::learner::{generate, raeeg_init, raeeg_on_tape, generate_on_tape, BaseLearner, LearnerVars};
use super::loss::QueryBatch;
use crate::error::{Error, Result};
use crate::eval::{rank_query, RankMode, Side};
use crate::graph::Triple;
use crate::kge::{negative_sample, negative_sample_among, EmbeddingStore};
use crate::metatask::MetaTask;
use crate::optim::{project_simplex, Adam};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

/// Tasks whose gradients are held in memory at once.
const PARALLEL_TASKS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct MetaTrainConfig<T> {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: T,
    pub margin: T,
    pub seed: u64,
    /// Component switches. Learner drops act on a trained ensemble and are rejected here.
    pub ablation: Ablation,
}

impl<T: Scalar> Default for MetaTrainConfig<T> {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            learning_rate: T::lit(1e-2),
            margin: T::one(),
            seed: 0,
            ablation: Ablation::none(),
        }
    }
}

impl<T: Scalar> MetaTrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.ablation.drop_learner.is_some() {
            return Err(Error::Config(
                "learner drops apply to a meta-trained ensemble, not to meta-training".into(),
            ));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("meta-training needs epochs > 0 and batch size > 0".into()));
        }
        if !(self.learning_rate > T::zero() && self.margin > T::zero()) {
            return Err(Error::Config("learning rate and margin must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct MetaTrainOutcome<T> {
    pub model: MetaModel<T>,
    /// Mean weighted query loss of each epoch.
    pub train_losses: Vec<T>,
    /// Mean weighted query loss on the validation tasks after each epoch; empty without them.
    pub valid_losses: Vec<T>,
    /// Ensemble weights after every update.
    pub weight_trace: Vec<Vec<T>>,
}

/// Support structure and sampled query pairs of one task.
pub fn task_episode<T: Scalar>(
    task: &MetaTask,
    num_entities: usize,
    num_relations: usize,
    known: &HashSet<Triple>,
    rng: &mut ChaCha8Rng,
) -> Result<(TaskGraph<T>, QueryBatch)> {
    let graph = TaskGraph::new(task.num_entities(), num_relations, &task.support)?;
    let positives: Vec<Triple> = task.query.iter().map(|t| task.to_global(t)).collect();
    // Corruptions stay inside the task, as if it were a KG of its own. Tasks
    // too dense for that borrow an outside entity.
    let negatives = positives
        .iter()
        .map(|t| match negative_sample_among(&task.entities, known, t, rng) {
            Err(Error::Sampling(_)) => negative_sample(num_entities, known, t, rng),
            other => other,
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = QueryBatch::new(&positives, &negatives, &task.local_index(), task.num_entities())?;
    Ok((graph, batch))
}

/// One learner's generated rows on a tape with the component switches applied.
pub(crate) struct TapeGeneration {
    pub rows: Var,
    /// `R_out`/`R_in` leaves, absent under a random initialization.
    pub relations: Option<(Var, Var)>,
    /// Learner leaves, absent when the NEEM pass is skipped.
    pub vars: Option<LearnerVars>,
}

pub(crate) fn generate_switched<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &TaskGraph<T>,
    learner: &BaseLearner<T>,
    rel_out: &Tensor2<T>,
    rel_in: &Tensor2<T>,
    random_init: Option<&Tensor2<T>>,
    neem: bool,
) -> Result<TapeGeneration> {
    let (init, relations) = match random_init {
        Some(r) => (tape.constant(r.clone()), None),
        None => {
            let ro = tape.leaf(rel_out.clone());
            let ri = tape.leaf(rel_in.clone());
            (raeeg_on_tape(tape, graph, ro, ri)?, Some((ro, ri)))
        }
    };
    if !neem {
        return Ok(TapeGeneration {
            rows: init,
            relations,
            vars: None,
        });
    }
    let vars = LearnerVars::bind(tape, graph, learner);
    let rows = generate_on_tape(tape, graph, init, learner, &vars)?;
    Ok(TapeGeneration {
        rows,
        relations,
        vars: Some(vars),
    })
}

/// Ensemble output with the component switches applied.
pub(crate) fn embed_switched<T: Scalar>(
    model: &MetaModel<T>,
    graph: &TaskGraph<T>,
    random_init: Option<&Tensor2<T>>,
    neem: bool,
) -> Result<Tensor2<T>> {
    let init = match random_init {
        Some(r) => r.clone(),
        None => raeeg_init(graph, &model.rel_out, &model.rel_in)?,
    };
    if neem {
        model.ensemble.embed(graph, &init)
    } else {
        Ok(init)
    }
}

/// Random task initialization under `disable-raeeg`, drawn after the negatives.
fn task_random_init<T: Scalar>(
    ablation: &Ablation,
    rows: usize,
    store: &EmbeddingStore<T>,
    rng: &mut ChaCha8Rng,
) -> Option<Tensor2<T>> {
    ablation.disable_raeeg.then(|| random_like(rows, &store.entities, rng))
}

/// Gradients of `weight · query loss` for one learner.
pub(crate) struct LearnerGrad<T> {
    pub loss: T,
    pub params: Vec<Option<Tensor2<T>>>,
    pub rel_out: Option<Tensor2<T>>,
    pub rel_in: Option<Tensor2<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn learner_query_grad<T: Scalar>(
    store: &EmbeddingStore<T>,
    graph: &TaskGraph<T>,
    batch: &QueryBatch,
    learner: &BaseLearner<T>,
    model: &MetaModel<T>,
    random_init: Option<&Tensor2<T>>,
    neem: bool,
    margin: T,
    weight: T,
) -> Result<LearnerGrad<T>> {
    let mut tape = Tape::new();
    let generated = generate_switched(&mut tape, graph, learner, &model.rel_out, &model.rel_in, random_init, neem)?;
    let loss = batch.mean_margin_on_tape(&mut tape, store, generated.rows, margin)?;
    let value = tape.scalar_value(loss)?;
    let objective = tape.scale(loss, weight);
    let mut grads = tape.backward(objective)?;
    let params = match &generated.vars {
        Some(vars) => vars.grads(&grads),
        None => vec![None; learner.param_shapes().len()],
    };
    let (rel_out, rel_in) = match generated.relations {
        Some((ro, ri)) => (Some(grads.take(ro)), Some(grads.take(ri))),
        None => (None, None),
    };
    Ok(LearnerGrad {
        loss: value,
        params,
        rel_out,
        rel_in,
    })
}

struct GradSum<T> {
    learners: Vec<Vec<Tensor2<T>>>,
    rel_out: Tensor2<T>,
    rel_in: Tensor2<T>,
    weights: Vec<T>,
    loss: T,
}

impl<T: Scalar> GradSum<T> {
    fn zeros(model: &MetaModel<T>) -> Self {
        Self {
            learners: model
                .ensemble
                .learners
                .iter()
                .map(|l| l.param_shapes().into_iter().map(|(r, c)| Tensor2::zeros(r, c)).collect())
                .collect(),
            rel_out: Tensor2::zeros(model.rel_out.rows(), model.rel_out.cols()),
            rel_in: Tensor2::zeros(model.rel_in.rows(), model.rel_in.cols()),
            weights: vec![T::zero(); model.ensemble.len()],
            loss: T::zero(),
        }
    }

    fn add(&mut self, task: Vec<LearnerGrad<T>>, weights: &[T]) -> Result<()> {
        for (i, g) in task.into_iter().enumerate() {
            for (acc, p) in self.learners[i].iter_mut().zip(g.params) {
                if let Some(p) = p {
                    acc.axpy(T::one(), &p)?;
                }
            }
            if let Some(ro) = &g.rel_out {
                self.rel_out.axpy(T::one(), ro)?;
            }
            if let Some(ri) = &g.rel_in {
                self.rel_in.axpy(T::one(), ri)?;
            }
            self.weights[i] += g.loss;
            self.loss += weights[i] * g.loss;
        }
        Ok(())
    }

    fn scale(&mut self, s: T) {
        for m in self.learners.iter_mut().flatten() {
            *m = m.scale(s);
        }
        self.rel_out = self.rel_out.scale(s);
        self.rel_in = self.rel_in.scale(s);
        self.weights.iter_mut().for_each(|w| *w *= s);
        self.loss *= s;
    }
}

fn epoch_rng(seed: u64, epoch: usize, task: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add((epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)));
    rng.set_stream(task as u64);
    rng
}

/// Meta-trains `model` on `train` tasks scored against `store`.
///
/// Task entities take generated embeddings; every other entity keeps its row in
/// `store`, whose relation table stays fixed. Learner parameters and the
/// initializer tables follow Adam; the ensemble weights take projected gradient
/// steps. `valid` tasks are only evaluated.
pub fn meta_train<T: Scalar>(
    store: &EmbeddingStore<T>,
    known: &HashSet<Triple>,
    train: &[MetaTask],
    valid: &[MetaTask],
    mut model: MetaModel<T>,
    config: &MetaTrainConfig<T>,
) -> Result<MetaTrainOutcome<T>> {
    config.validate()?;
    model.check()?;
    if train.is_empty() {
        return Err(Error::Config("meta-training needs at least one training task".into()));
    }
    if model.dim() != store.dim() || model.rel_out.rows() != store.num_relations() {
        return Err(Error::dim("meta_train", "model and store disagree on d or |R|"));
    }
    let (n_e, n_r) = (store.num_entities(), store.num_relations());
    let lr = config.learning_rate;
    let mut learner_opts: Vec<Adam<T>> = model
        .ensemble
        .learners
        .iter()
        .map(|l| Adam::new(lr, l.param_shapes()))
        .collect();
    let mut rel_opt = Adam::new(lr, [model.rel_out.shape(), model.rel_in.shape()]);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(u64::MAX);

    let mut train_losses = Vec::with_capacity(config.epochs);
    let mut valid_losses = Vec::new();
    let mut weight_trace = Vec::new();
    for epoch in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let mut epoch_loss = T::zero();
        for batch in order.chunks(config.batch_size) {
            let mut acc = GradSum::zeros(&model);
            for group in batch.chunks(PARALLEL_TASKS) {
                let results: Vec<Result<Vec<LearnerGrad<T>>>> = group
                    .par_iter()
                    .map(|&ti| {
                        let mut rng = epoch_rng(config.seed, epoch, ti);
                        let (graph, queries) = task_episode(&train[ti], n_e, n_r, known, &mut rng)?;
                        let init = task_random_init(&config.ablation, graph.num_entities(), store, &mut rng);
                        model
                            .ensemble
                            .learners
                            .iter()
                            .zip(&model.ensemble.weights)
                            .map(|(l, &w)| {
                                let g = learner_query_grad(
                                    store,
                                    &graph,
                                    &queries,
                                    l,
                                    &model,
                                    init.as_ref(),
                                    !config.ablation.disable_neem,
                                    config.margin,
                                    w,
                                )?;
                                if !g.loss.is_finite() {
                                    return Err(Error::Training(format!("non-finite query loss on task {ti} in epoch {epoch}")));
                                }
                                Ok(g)
                            })
                            .collect()
                    })
                    .collect();
                for r in results {
                    acc.add(r?, &model.ensemble.weights)?;
                }
            }
            acc.scale(T::one() / T::from_usize_lossy(batch.len()));
            epoch_loss += acc.loss * T::from_usize_lossy(batch.len());
            for ((learner, opt), grads) in model.ensemble.learners.iter_mut().zip(&mut learner_opts).zip(&acc.learners) {
                opt.step(&mut learner.params_mut(), grads)?;
            }
            if !config.ablation.disable_raeeg {
                rel_opt.step(&mut [&mut model.rel_out, &mut model.rel_in], &[acc.rel_out, acc.rel_in])?;
            }
            let stepped: Vec<T> = model
                .ensemble
                .weights
                .iter()
                .zip(&acc.weights)
                .map(|(&w, &g)| w - lr * g)
                .collect();
            model.ensemble.weights = project_simplex(&stepped)?;
            weight_trace.push(model.ensemble.weights.clone());
        }
        let mean = epoch_loss / T::from_usize_lossy(train.len());
        train_losses.push(mean);
        if !valid.is_empty() {
            let v = validation_loss(store, known, valid, &model, config)?;
            log::info!("meta-train epoch {epoch}: train {mean:.4}, valid {v:.4}");
            valid_losses.push(v);
        } else {
            log::info!("meta-train epoch {epoch}: train {mean:.4}");
        }
    }
    model.check()?;
    Ok(MetaTrainOutcome {
        model,
        train_losses,
        valid_losses,
        weight_trace,
    })
}

/// Mean weighted query loss over `tasks` with negatives fixed by `config.seed`.
pub fn validation_loss<T: Scalar>(
    store: &EmbeddingStore<T>,
    known: &HashSet<Triple>,
    tasks: &[MetaTask],
    model: &MetaModel<T>,
    config: &MetaTrainConfig<T>,
) -> Result<T> {
    let losses: Vec<Result<T>> = tasks
        .par_iter()
        .enumerate()
        .map(|(j, task)| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7A11_DA7E);
            rng.set_stream(j as u64);
            let (graph, queries) = task_episode(task, store.num_entities(), store.num_relations(), known, &mut rng)?;
            let random = task_random_init(&config.ablation, graph.num_entities(), store, &mut rng);
            let init = match random {
                Some(r) => r,
                None => raeeg_init(&graph, &model.rel_out, &model.rel_in)?,
            };
            if config.ablation.disable_neem {
                return queries.mean_margin(store, &init, config.margin);
            }
            let mut total = T::zero();
            for (l, &w) in model.ensemble.learners.iter().zip(&model.ensemble.weights) {
                total += w * queries.mean_margin(store, &generate(&graph, &init, l)?, config.margin)?;
            }
            Ok(total)
        })
        .collect();
    let mut sum = T::zero();
    for l in losses {
        sum += l?;
    }
    Ok(sum / T::from_usize_lossy(tasks.len().max(1)))
}

/// Ensemble embeddings of a task's entities generated from its support set.
pub fn generate_task<T: Scalar>(model: &MetaModel<T>, task: &MetaTask) -> Result<Tensor2<T>> {
    let graph = TaskGraph::new(task.num_entities(), model.rel_out.rows(), &task.support)?;
    model.embed(&graph)
}

/// Head and tail ranks of a task's query triples over all entities, with the
/// task's entities represented by `embeddings` (one row per local entity).
pub fn task_query_ranks<T: Scalar>(
    store: &EmbeddingStore<T>,
    known: &HashSet<Triple>,
    task: &MetaTask,
    embeddings: &Tensor2<T>,
    mode: RankMode,
) -> Result<Vec<usize>> {
    if embeddings.shape() != (task.num_entities(), store.dim()) {
        return Err(Error::dim("task ranks", format!("{:?} rows for a task of {}", embeddings.shape(), task.num_entities())));
    }
    let mut replaced = store.clone();
    for (l, &g) in task.entities.iter().enumerate() {
        replaced.entities.row_mut(g).copy_from_slice(embeddings.row(l));
    }
    let mut ranks = Vec::with_capacity(2 * task.query.len());
    for t in &task.query {
        let g = task.to_global(t);
        ranks.push(rank_query(&replaced, &g, Side::Head, known, mode)?.rank);
        ranks.push(rank_query(&replaced, &g, Side::Tail, known, mode)?.rank);
    }
    Ok(ranks)
}
