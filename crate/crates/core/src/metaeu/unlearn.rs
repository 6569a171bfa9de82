//! Unlearning: regenerate the embeddings of every entity touched by the
//! forget set from its retained neighbourhood, push the forgotten triples
//! down while keeping retained ones, then fine-tune the regenerated rows.

use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::context::TaskGraph;
use super::ensemble::{random_like, Ablation, MetaModel};
use super::train::{embed_switched, generate_switched};
use super::loss::{check_combination, finetune, loss_l4_on_tape, QueryBatch};
use crate::error::{Error, Result};
use crate::graph::{ForgetSplit, KnowledgeGraph, Triple};
use crate::kge::EmbeddingStore;
use crate::optim::{project_simplex, Adam};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor2;

#[derive(Clone, Debug, PartialEq)]
pub struct UnlearnConfig<T> {
    /// Weight of the retain loss.
    pub w_a: T,
    /// Weight of the (maximized) forget loss; `w_a + w_b = 1`.
    pub w_b: T,
    /// Strength of the pull towards the original rows.
    pub lambda4: T,
    /// Largest hinge value one forget pair contributes to the maximized loss.
    /// The plain margin loss has no maximum; past the cap a forgotten triple
    /// already scores below its corruption by `cap − margin`.
    pub forget_cap: T,
    /// Fixed corruptions drawn per forget triple.
    pub forget_negatives: usize,
    /// Adaptation steps on the combined objective.
    pub steps: usize,
    /// Fine-tune steps on retained triples afterwards.
    pub steps5: usize,
    pub inner_lr: T,
    pub margin: T,
    /// Share of the retained triples around affected entities used as support.
    pub support_fraction: f64,
    pub seed: u64,
}

impl<T: Scalar> Default for UnlearnConfig<T> {
    fn default() -> Self {
        Self {
            w_a: T::lit(0.5),
            w_b: T::lit(0.5),
            lambda4: T::lit(0.1),
            forget_cap: T::lit(3.0),
            forget_negatives: 8,
            steps: 500,
            steps5: 100,
            inner_lr: T::lit(1e-2),
            margin: T::one(),
            support_fraction: 0.7,
            seed: 0,
        }
    }
}

impl<T: Scalar> UnlearnConfig<T> {
    pub fn validate(&self) -> Result<()> {
        check_combination(self.w_a, self.w_b)?;
        if !(self.lambda4 >= T::zero() && self.lambda4.is_finite()) {
            return Err(Error::Config(format!("lambda4 = {} must be nonnegative", self.lambda4)));
        }
        if self.forget_negatives == 0 {
            return Err(Error::Config("forget_negatives must be at least 1".into()));
        }
        if !(self.forget_cap > T::zero()) {
            return Err(Error::Config(format!("forget cap = {} must be positive", self.forget_cap)));
        }
        if !(self.inner_lr > T::zero() && self.margin > T::zero()) {
            return Err(Error::Config("inner learning rate and margin must be positive".into()));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::Config(format!("support fraction {} not in (0, 1)", self.support_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UnlearnOutcome<T> {
    pub store: EmbeddingStore<T>,
    /// Entities incident to the forget set, ascending; the only rows that may change.
    pub affected: Vec<usize>,
    /// Weighted retain-query loss before each adaptation step.
    pub l1_trace: Vec<T>,
    /// Weighted forget-query loss before each adaptation step.
    pub l2_trace: Vec<T>,
    /// Ensemble weights after each adaptation step.
    pub weight_trace: Vec<Vec<T>>,
    /// Margin loss before each fine-tune step.
    pub finetune_trace: Vec<T>,
    /// Number of message-passing forward passes run.
    pub neem_invocations: usize,
    pub warnings: Vec<String>,
}

/// The unlearning episode built around the forget set.
struct Episode<T> {
    graph: TaskGraph<T>,
    /// Affected entities are local rows `0..a`.
    affected: Vec<usize>,
    retain_query: Option<QueryBatch>,
    forget_query: QueryBatch,
    /// Local rows of affected entities that keep retained triples, and their original rows.
    proximity_rows: Vec<usize>,
    proximity_reference: Tensor2<T>,
    incident_retain: Vec<Triple>,
    warnings: Vec<String>,
}

fn build_episode<T: Scalar>(
    graph: &KnowledgeGraph,
    raw: &EmbeddingStore<T>,
    split: &ForgetSplit,
    config: &UnlearnConfig<T>,
    rng: &mut ChaCha8Rng,
) -> Result<Episode<T>> {
    let affected: Vec<usize> = split
        .forget
        .iter()
        .flat_map(|t| [t.head, t.tail])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let is_affected: HashSet<usize> = affected.iter().copied().collect();
    let incident_retain: Vec<Triple> = split
        .retain
        .iter()
        .filter(|t| is_affected.contains(&t.head) || is_affected.contains(&t.tail))
        .copied()
        .collect();

    let mut shuffled = incident_retain.clone();
    shuffled.shuffle(rng);
    let n_support = (config.support_fraction * shuffled.len() as f64).round() as usize;
    let mut support: Vec<Triple> = shuffled[..n_support].to_vec();
    let mut covered: HashSet<usize> = support.iter().flat_map(|t| [t.head, t.tail]).collect();
    let mut query = Vec::new();
    for t in &shuffled[n_support..] {
        let needs = |e: usize| is_affected.contains(&e) && !covered.contains(&e);
        if needs(t.head) || needs(t.tail) {
            covered.extend([t.head, t.tail]);
            support.push(*t);
        } else {
            query.push(*t);
        }
    }
    support.sort();
    query.sort();

    let mut local: HashMap<usize, usize> = affected.iter().enumerate().map(|(l, &g)| (g, l)).collect();
    let others: BTreeSet<usize> = support
        .iter()
        .flat_map(|t| [t.head, t.tail])
        .filter(|e| !is_affected.contains(e))
        .collect();
    for e in others {
        let l = local.len();
        local.insert(e, l);
    }
    let to_local = |t: &Triple| Triple::new(local[&t.head], t.relation, local[&t.tail]);
    let support_local: Vec<Triple> = support.iter().map(to_local).collect();
    let fallback_local: Vec<Triple> = split.forget.iter().map(to_local).collect();
    let task_graph = TaskGraph::with_fallback(local.len(), raw.num_relations(), &support_local, &fallback_local)?;

    let retain_adjacent: HashSet<usize> = incident_retain.iter().flat_map(|t| [t.head, t.tail]).collect();
    let mut warnings = Vec::new();
    let mut proximity_rows = Vec::new();
    let mut proximity_globals = Vec::new();
    for (l, &e) in affected.iter().enumerate() {
        if retain_adjacent.contains(&e) {
            proximity_rows.push(l);
            proximity_globals.push(e);
        } else {
            warnings.push(format!(
                "entity {} keeps no retained triple; its embedding is initialized from forgotten relations only",
                graph.entities().name(e)
            ));
        }
    }

    let a = affected.len();
    let generated: HashMap<usize, usize> = affected.iter().enumerate().map(|(l, &g)| (g, l)).collect();
    let known = graph.members();
    let retain_query = if query.is_empty() {
        None
    } else {
        Some(QueryBatch::sample(&query, raw.num_entities(), known, &generated, a, rng)?)
    };
    let forget_pos: Vec<Triple> = (0..config.forget_negatives).flat_map(|_| split.forget.iter().copied()).collect();
    let forget_query = QueryBatch::sample(&forget_pos, raw.num_entities(), known, &generated, a, rng)?;
    Ok(Episode {
        graph: task_graph,
        affected,
        retain_query,
        forget_query,
        proximity_rows,
        proximity_reference: raw.entities.gather_rows(&proximity_globals)?,
        incident_retain,
        warnings,
    })
}

/// Values of the three loss terms for one learner and the tape variable of its objective.
struct LearnerObjective {
    l1: f64,
    l2: f64,
    objective: Var,
}

fn record_objective<T: Scalar>(
    tape: &mut Tape<T>,
    raw: &EmbeddingStore<T>,
    episode: &Episode<T>,
    generated: Var,
    config: &UnlearnConfig<T>,
) -> Result<LearnerObjective> {
    let all: Vec<usize> = (0..episode.affected.len()).collect();
    let rows = tape.gather_rows(generated, &all)?;
    let l2 = episode
        .forget_query
        .mean_capped_margin_on_tape(tape, raw, rows, config.margin, config.forget_cap)?;
    let near = tape.gather_rows(rows, &episode.proximity_rows)?;
    let l4 = loss_l4_on_tape(tape, near, &episode.proximity_reference, config.lambda4)?;
    let neg_l2 = tape.scale(l2, -config.w_b);
    let mut objective = tape.add(neg_l2, l4)?;
    let mut l1_value = 0.0;
    if let Some(rq) = &episode.retain_query {
        let l1 = rq.mean_margin_on_tape(tape, raw, rows, config.margin)?;
        l1_value = tape.scalar_value(l1)?.to_f64_lossy();
        let weighted = tape.scale(l1, config.w_a);
        objective = tape.add(objective, weighted)?;
    }
    Ok(LearnerObjective {
        l1: l1_value,
        l2: tape.scalar_value(l2)?.to_f64_lossy(),
        objective,
    })
}

/// Produces `E′` from `raw` without the influence of `split.forget`.
///
/// Rows of entities not incident to the forget set are copied from `raw`
/// unchanged, as are all relation tables.
pub fn unlearn<T: Scalar>(
    graph: &KnowledgeGraph,
    raw: &EmbeddingStore<T>,
    split: &ForgetSplit,
    model: &MetaModel<T>,
    ablation: &Ablation,
    config: &UnlearnConfig<T>,
) -> Result<UnlearnOutcome<T>> {
    config.validate()?;
    raw.check()?;
    model.check()?;
    if model.dim() != raw.dim() || model.rel_out.rows() != raw.num_relations() {
        return Err(Error::dim("unlearn", "meta model and store disagree on d or |R|"));
    }
    let mut outcome = UnlearnOutcome {
        store: raw.clone(),
        affected: Vec::new(),
        l1_trace: Vec::new(),
        l2_trace: Vec::new(),
        weight_trace: Vec::new(),
        finetune_trace: Vec::new(),
        neem_invocations: 0,
        warnings: Vec::new(),
    };
    if split.forget.is_empty() {
        return Ok(outcome);
    }
    if let Some(t) = split.forget.iter().find(|t| !graph.contains(t)) {
        return Err(Error::UnknownTriple(t.to_string()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let episode = build_episode(graph, raw, split, config, &mut rng)?;
    for w in &episode.warnings {
        log::warn!("{w}");
    }

    let mut m = ablation.apply(model)?;
    let n = episode.graph.num_entities();
    let random_init = ablation.disable_raeeg.then(|| {
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        init_rng.set_stream(1);
        random_like(n, &raw.entities, &mut init_rng)
    });
    let mut learner_opts: Vec<Adam<T>> = m
        .ensemble
        .learners
        .iter()
        .map(|l| Adam::new(config.inner_lr, l.param_shapes()))
        .collect();
    let mut rel_opt = Adam::new(config.inner_lr, [m.rel_out.shape(), m.rel_in.shape()]);

    for step in 0..config.steps {
        let mut rel_grads = [
            Tensor2::zeros(m.rel_out.rows(), m.rel_out.cols()),
            Tensor2::zeros(m.rel_in.rows(), m.rel_in.cols()),
        ];
        let mut objectives = Vec::with_capacity(m.ensemble.len());
        let (mut l1, mut l2) = (0.0, 0.0);
        for (i, learner) in m.ensemble.learners.iter_mut().enumerate() {
            let w = m.ensemble.weights[i];
            let mut tape = Tape::new();
            let generated = generate_switched(
                &mut tape,
                &episode.graph,
                learner,
                &m.rel_out,
                &m.rel_in,
                random_init.as_ref(),
                !ablation.disable_neem,
            )?;
            if generated.vars.is_some() {
                outcome.neem_invocations += 1;
            }
            let obj = record_objective(&mut tape, raw, &episode, generated.rows, config)?;
            let obj_value = tape.scalar_value(obj.objective)?;
            if !obj_value.is_finite() {
                return Err(Error::Training(format!("non-finite unlearning objective at step {step}")));
            }
            l1 += w.to_f64_lossy() * obj.l1;
            l2 += w.to_f64_lossy() * obj.l2;
            objectives.push(obj_value);
            let scaled = tape.scale(obj.objective, w);
            let mut grads = tape.backward(scaled)?;
            if let Some((ro, ri)) = generated.relations {
                rel_grads[0].axpy(T::one(), &grads.take(ro))?;
                rel_grads[1].axpy(T::one(), &grads.take(ri))?;
            }
            if let Some(vars) = generated.vars {
                let g: Vec<Tensor2<T>> = vars
                    .grads(&grads)
                    .into_iter()
                    .zip(learner.param_shapes())
                    .map(|(g, (r, c))| g.unwrap_or_else(|| Tensor2::zeros(r, c)))
                    .collect();
                learner_opts[i].step(&mut learner.params_mut(), &g)?;
            }
        }
        if random_init.is_none() {
            let [go, gi] = rel_grads;
            rel_opt.step(&mut [&mut m.rel_out, &mut m.rel_in], &[go, gi])?;
        }
        outcome.l1_trace.push(T::lit(l1));
        outcome.l2_trace.push(T::lit(l2));
        let stepped: Vec<T> = m
            .ensemble
            .weights
            .iter()
            .zip(&objectives)
            .map(|(&w, &g)| w - config.inner_lr * g)
            .collect();
        m.ensemble.weights = project_simplex(&stepped)?;
        outcome.weight_trace.push(m.ensemble.weights.clone());
    }

    if !ablation.disable_neem {
        outcome.neem_invocations += m.ensemble.len();
    }
    let final_rows = embed_switched(&m, &episode.graph, random_init.as_ref(), !ablation.disable_neem)?;
    let mut store = raw.clone();
    for (l, &e) in episode.affected.iter().enumerate() {
        store.entities.row_mut(e).copy_from_slice(final_rows.row(l));
    }
    let rows: BTreeSet<usize> = episode.affected.iter().copied().collect();
    outcome.finetune_trace = finetune(
        &mut store,
        &episode.incident_retain,
        &rows,
        config.steps5,
        config.inner_lr,
        config.margin,
        graph.members(),
        &mut rng,
    )?;
    store.check()?;
    outcome.store = store;
    outcome.affected = episode.affected;
    outcome.warnings = episode.warnings;
    Ok(outcome)
}
