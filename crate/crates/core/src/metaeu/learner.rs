//! One base learner: relation-aware initialization, layered neighbour
//! message passing and the integrator over all layer outputs.

use rand::Rng;

use super::context::TaskGraph;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor2;

/// Parameters of one learner.
///
/// Message weights are indexed by layer and slot; slot `2r` carries messages
/// from the tails of relation `r`, slot `2r + 1` from its heads.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseLearner<T> {
    dim: usize,
    layers: usize,
    num_relations: usize,
    relation: Vec<Tensor2<T>>,
    self_loop: Vec<Tensor2<T>>,
    hei: Tensor2<T>,
}

impl<T: Scalar> BaseLearner<T> {
    /// Message weights uniform in `±1/√d`; the integrator starts as the
    /// projection onto layer 0 plus noise of the same scale divided by 10.
    pub fn new<R: Rng + ?Sized>(dim: usize, layers: usize, num_relations: usize, rng: &mut R) -> Self {
        let bound = T::one() / T::from_usize_lossy(dim).sqrt();
        let slots = 2 * num_relations;
        let relation = (0..layers * slots)
            .map(|_| Tensor2::random_uniform(dim, dim, bound, rng))
            .collect();
        let self_loop = (0..layers)
            .map(|_| Tensor2::random_uniform(dim, dim, bound, rng))
            .collect();
        let mut hei = Tensor2::random_uniform(dim, (layers + 1) * dim, bound / T::lit(10.0), rng);
        for k in 0..dim {
            hei.set(k, k, hei.get(k, k) + T::one());
        }
        Self {
            dim,
            layers,
            num_relations,
            relation,
            self_loop,
            hei,
        }
    }

    /// Builds a learner from explicit matrices; `relation` is layer-major over `2·num_relations` slots.
    pub fn from_parts(
        dim: usize,
        num_relations: usize,
        relation: Vec<Tensor2<T>>,
        self_loop: Vec<Tensor2<T>>,
        hei: Tensor2<T>,
    ) -> Result<Self> {
        let learner = Self {
            dim,
            layers: self_loop.len(),
            num_relations,
            relation,
            self_loop,
            hei,
        };
        learner.check()?;
        Ok(learner)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    pub fn num_slots(&self) -> usize {
        2 * self.num_relations
    }

    pub fn relation_weight(&self, layer: usize, slot: usize) -> &Tensor2<T> {
        &self.relation[layer * self.num_slots() + slot]
    }

    pub fn self_weight(&self, layer: usize) -> &Tensor2<T> {
        &self.self_loop[layer]
    }

    pub fn hei(&self) -> &Tensor2<T> {
        &self.hei
    }

    /// Shapes and finiteness of every matrix.
    pub fn check(&self) -> Result<()> {
        let d = self.dim;
        let square = |m: &Tensor2<T>| m.shape() == (d, d);
        if self.relation.len() != self.layers * self.num_slots()
            || !self.relation.iter().all(square)
            || !self.self_loop.iter().all(square)
        {
            return Err(Error::dim("learner", "message weights must be d×d, one per layer and slot"));
        }
        if self.hei.shape() != (d, (self.layers + 1) * d) {
            return Err(Error::dim(
                "learner",
                format!("integrator is {:?}, expected ({d}, {})", self.hei.shape(), (self.layers + 1) * d),
            ));
        }
        if !self.params().iter().all(|m| m.is_finite()) {
            return Err(Error::Training("learner has non-finite parameters".into()));
        }
        Ok(())
    }

    /// All matrices in storage order: message weights, self-loop weights, integrator.
    pub fn params(&self) -> Vec<&Tensor2<T>> {
        self.relation
            .iter()
            .chain(&self.self_loop)
            .chain(std::iter::once(&self.hei))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2<T>> {
        self.relation
            .iter_mut()
            .chain(&mut self.self_loop)
            .chain(std::iter::once(&mut self.hei))
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|m| m.shape()).collect()
    }

    fn relation_index(&self, layer: usize, slot: usize) -> usize {
        layer * self.num_slots() + slot
    }
}

/// Initial embeddings: row `e` is the mean of `R_out` over `O(e)` and `R_in` over `I(e)`.
pub fn raeeg_init<T: Scalar>(graph: &TaskGraph<T>, rel_out: &Tensor2<T>, rel_in: &Tensor2<T>) -> Result<Tensor2<T>> {
    if let Some(e) = graph.missing_context().first() {
        return Err(Error::Contract(format!("task entity {e} has no relation context")));
    }
    graph.raeeg_out().apply(rel_out)?.add(&graph.raeeg_in().apply(rel_in)?)
}

/// Layer outputs `E⁽⁰⁾ … E⁽ᴸ⁾` of neighbour message passing from `init`.
pub fn neem_forward<T: Scalar>(graph: &TaskGraph<T>, init: &Tensor2<T>, learner: &BaseLearner<T>) -> Result<Vec<Tensor2<T>>> {
    if init.shape() != (graph.num_entities(), learner.dim()) {
        return Err(Error::dim("neem", format!("init {:?} for {} entities", init.shape(), graph.num_entities())));
    }
    check_relations(graph, learner)?;
    let mut layers = vec![init.clone()];
    for l in 0..learner.layers() {
        let h = &layers[l];
        let mut acc = h.matmul_nt(learner.self_weight(l))?;
        for (slot, adj) in graph.slots() {
            let msg = adj.apply(h)?.matmul_nt(learner.relation_weight(l, *slot))?;
            acc.axpy(T::one(), &msg)?;
        }
        layers.push(acc.relu());
    }
    Ok(layers)
}

/// `E_final = concat(E⁽⁰⁾, …, E⁽ᴸ⁾) · W_HEIᵀ`.
pub fn hei<T: Scalar>(layers: &[Tensor2<T>], w_hei: &Tensor2<T>) -> Result<Tensor2<T>> {
    let width: usize = layers.iter().map(Tensor2::cols).sum();
    if layers.is_empty() || width != w_hei.cols() {
        return Err(Error::dim(
            "hei",
            format!("{} layers of total width {width} for an integrator of width {}", layers.len(), w_hei.cols()),
        ));
    }
    let refs: Vec<&Tensor2<T>> = layers.iter().collect();
    Tensor2::concat_cols(&refs)?.matmul_nt(w_hei)
}

/// Final embeddings of one learner from `init`.
pub fn generate<T: Scalar>(graph: &TaskGraph<T>, init: &Tensor2<T>, learner: &BaseLearner<T>) -> Result<Tensor2<T>> {
    hei(&neem_forward(graph, init, learner)?, learner.hei())
}

fn check_relations<T: Scalar>(graph: &TaskGraph<T>, learner: &BaseLearner<T>) -> Result<()> {
    if graph.num_relations() != learner.num_relations() {
        return Err(Error::dim(
            "neem",
            format!("task over {} relations, learner over {}", graph.num_relations(), learner.num_relations()),
        ));
    }
    Ok(())
}

/// `raeeg_init` on a tape, differentiable in both relation tables.
pub fn raeeg_on_tape<T: Scalar>(tape: &mut Tape<T>, graph: &TaskGraph<T>, rel_out: Var, rel_in: Var) -> Result<Var> {
    if let Some(e) = graph.missing_context().first() {
        return Err(Error::Contract(format!("task entity {e} has no relation context")));
    }
    let a = tape.spmm(graph.raeeg_out().clone(), rel_out)?;
    let b = tape.spmm(graph.raeeg_in().clone(), rel_in)?;
    tape.add(a, b)
}

/// Tape leaves for the parameters of one learner that a task actually uses.
#[derive(Clone, Debug)]
pub struct LearnerVars {
    relation: Vec<Option<Var>>,
    self_loop: Vec<Var>,
    hei: Var,
}

impl LearnerVars {
    pub fn bind<T: Scalar>(tape: &mut Tape<T>, graph: &TaskGraph<T>, learner: &BaseLearner<T>) -> Self {
        let mut relation = vec![None; learner.relation.len()];
        for l in 0..learner.layers() {
            for (slot, _) in graph.slots() {
                let k = learner.relation_index(l, *slot);
                relation[k] = Some(tape.leaf(learner.relation[k].clone()));
            }
        }
        let self_loop = learner.self_loop.iter().map(|w| tape.leaf(w.clone())).collect();
        let hei = tape.leaf(learner.hei.clone());
        Self {
            relation,
            self_loop,
            hei,
        }
    }

    /// Gradients in [`BaseLearner::params`] order; `None` for matrices the task does not touch.
    pub fn grads<T: Scalar>(&self, grads: &Gradients<T>) -> Vec<Option<Tensor2<T>>> {
        self.relation
            .iter()
            .map(|v| v.map(|v| grads.wrt(v)))
            .chain(self.self_loop.iter().map(|&v| Some(grads.wrt(v))))
            .chain(std::iter::once(Some(grads.wrt(self.hei))))
            .collect()
    }
}

/// Message passing and integration on a tape.
pub fn generate_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    graph: &TaskGraph<T>,
    init: Var,
    learner: &BaseLearner<T>,
    vars: &LearnerVars,
) -> Result<Var> {
    check_relations(graph, learner)?;
    let mut layers = vec![init];
    let mut h = init;
    for l in 0..learner.layers() {
        let mut acc = tape.matmul_nt(h, vars.self_loop[l])?;
        for (slot, adj) in graph.slots() {
            let w = vars.relation[learner.relation_index(l, *slot)].expect("bound for every slot of the task");
            let msg = tape.rel_message(h, w, adj.clone())?;
            acc = tape.add(acc, msg)?;
        }
        h = tape.relu(acc);
        layers.push(h);
    }
    let stacked = tape.concat_cols(&layers)?;
    tape.matmul_nt(stacked, vars.hei)
}
