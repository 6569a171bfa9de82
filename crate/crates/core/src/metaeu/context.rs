//! Sparse structure of a task's support graph: relation context for the
//! initializer and per-slot neighbour averages for message passing.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::Triple;
use crate::scalar::Scalar;
use crate::tensor::SparseRows;

/// Message slot of relation `r` as seen from the head (neighbours are tails).
pub fn out_slot(r: usize) -> usize {
    2 * r
}

/// Message slot of relation `r` as seen from the tail (neighbours are heads).
pub fn in_slot(r: usize) -> usize {
    2 * r + 1
}

/// Support-graph structure over `n` task-local entities.
#[derive(Clone, Debug)]
pub struct TaskGraph<T> {
    n: usize,
    num_relations: usize,
    out_context: Vec<BTreeSet<usize>>,
    in_context: Vec<BTreeSet<usize>>,
    raeeg_out: Arc<SparseRows<T>>,
    raeeg_in: Arc<SparseRows<T>>,
    slots: Vec<(usize, Arc<SparseRows<T>>)>,
    missing_context: Vec<usize>,
}

impl<T: Scalar> TaskGraph<T> {
    pub fn new(n: usize, num_relations: usize, support: &[Triple]) -> Result<Self> {
        Self::with_fallback(n, num_relations, support, &[])
    }

    /// Like [`TaskGraph::new`], but entities without any support triple take
    /// their relation context from `fallback` instead. Neighbourhoods always
    /// come from `support` alone.
    pub fn with_fallback(n: usize, num_relations: usize, support: &[Triple], fallback: &[Triple]) -> Result<Self> {
        for t in support.iter().chain(fallback) {
            if t.head >= n || t.tail >= n || t.relation >= num_relations {
                return Err(Error::Index {
                    what: "task triple",
                    index: t.head.max(t.tail),
                    size: n,
                });
            }
        }
        let mut out_context = vec![BTreeSet::new(); n];
        let mut in_context = vec![BTreeSet::new(); n];
        let mut neighbours: BTreeMap<usize, Vec<BTreeSet<usize>>> = BTreeMap::new();
        for t in support {
            out_context[t.head].insert(t.relation);
            in_context[t.tail].insert(t.relation);
            neighbours
                .entry(out_slot(t.relation))
                .or_insert_with(|| vec![BTreeSet::new(); n])[t.head]
                .insert(t.tail);
            neighbours
                .entry(in_slot(t.relation))
                .or_insert_with(|| vec![BTreeSet::new(); n])[t.tail]
                .insert(t.head);
        }
        let has_support: Vec<bool> = (0..n)
            .map(|e| !out_context[e].is_empty() || !in_context[e].is_empty())
            .collect();
        for t in fallback {
            if !has_support[t.head] {
                out_context[t.head].insert(t.relation);
            }
            if !has_support[t.tail] {
                in_context[t.tail].insert(t.relation);
            }
        }

        let mut out_entries = Vec::new();
        let mut in_entries = Vec::new();
        let mut missing_context = Vec::new();
        for e in 0..n {
            let k = out_context[e].len() + in_context[e].len();
            if k == 0 {
                missing_context.push(e);
                continue;
            }
            let inv = T::one() / T::from_usize_lossy(k);
            out_entries.extend(out_context[e].iter().map(|&r| (e, r, inv)));
            in_entries.extend(in_context[e].iter().map(|&r| (e, r, inv)));
        }
        let slots = neighbours
            .into_iter()
            .map(|(slot, per_entity)| {
                let entries: Vec<(usize, usize, T)> = per_entity
                    .iter()
                    .enumerate()
                    .flat_map(|(e, nb)| {
                        let inv = T::one() / T::from_usize_lossy(nb.len().max(1));
                        nb.iter().map(move |&u| (e, u, inv))
                    })
                    .collect();
                Ok((slot, Arc::new(SparseRows::from_entries(n, n, &entries)?)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            n,
            num_relations,
            out_context,
            in_context,
            raeeg_out: Arc::new(SparseRows::from_entries(n, num_relations, &out_entries)?),
            raeeg_in: Arc::new(SparseRows::from_entries(n, num_relations, &in_entries)?),
            slots,
            missing_context,
        })
    }

    pub fn num_entities(&self) -> usize {
        self.n
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// `(O(e), I(e))`: relations with `e` as head, resp. tail.
    pub fn relation_context(&self, e: usize) -> (&BTreeSet<usize>, &BTreeSet<usize>) {
        (&self.out_context[e], &self.in_context[e])
    }

    /// Row `e` averages `R_out` over `O(e)` jointly with [`TaskGraph::raeeg_in`] over `I(e)`.
    pub fn raeeg_out(&self) -> &Arc<SparseRows<T>> {
        &self.raeeg_out
    }

    pub fn raeeg_in(&self) -> &Arc<SparseRows<T>> {
        &self.raeeg_in
    }

    /// Nonempty message slots with their row-normalized adjacency, by slot id.
    pub fn slots(&self) -> &[(usize, Arc<SparseRows<T>>)] {
        &self.slots
    }

    /// Entities without relation context, which cannot be initialized.
    pub fn missing_context(&self) -> &[usize] {
        &self.missing_context
    }
}
