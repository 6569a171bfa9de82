//! Filtered and raw ranks against an exhaustive sort of every candidate.

use kgeu::eval::rank_all;
use kgeu::graph::Triple;
use kgeu::{EmbeddingStore, KnowledgeGraph, ModelKind, NormKind, RankMode, Scorer, Side, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Check, Fallible};

/// Entries on a half-integer grid so that distinct candidates often tie exactly.
fn quantized(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-2i32..=2) as f64 / 2.0).collect();
    Tensor::from_vec(rows, cols, data).expect("shape")
}

/// Sorts all surviving candidates by score and averages the positions of the
/// true entity's tie group, rounding up.
fn sorted_rank(store: &EmbeddingStore<f64>, graph: &KnowledgeGraph, t: &Triple, side: Side, mode: RankMode) -> usize {
    let target = match side {
        Side::Head => t.head,
        Side::Tail => t.tail,
    };
    let mut scored: Vec<(f64, usize)> = Vec::new();
    for e in 0..store.num_entities() {
        let c = match side {
            Side::Head => Triple::new(e, t.relation, t.tail),
            Side::Tail => Triple::new(t.head, t.relation, e),
        };
        if e != target && mode == RankMode::Filtered && graph.contains(&c) {
            continue;
        }
        scored.push((store.score(&c).expect("valid"), e));
    }
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite"));
    let truth = scored.iter().find(|(_, e)| *e == target).expect("true entity kept").0;
    let first = scored.iter().position(|(s, _)| *s == truth).expect("present") + 1;
    let last = scored.iter().rposition(|(s, _)| *s == truth).expect("present") + 1;
    (first + last).div_ceil(2)
}

pub fn criterion() -> Fallible<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let scorers = [
        Scorer::new(ModelKind::TransE, NormKind::L1),
        Scorer::new(ModelKind::DistMult, NormKind::L1),
        Scorer::new(ModelKind::ComplEx, NormKind::L1),
    ];
    let mut queries = 0usize;
    let mut mismatches = 0usize;
    let mut ties = 0usize;
    let mut graphs = 0usize;
    for n in 2..=50 {
        for scorer in scorers {
            let n_r = rng.random_range(1..4);
            let m = rng.random_range(1..=3 * n);
            let triples: Vec<Triple> = (0..m)
                .map(|_| Triple::new(rng.random_range(0..n), rng.random_range(0..n_r), rng.random_range(0..n)))
                .collect();
            let graph = KnowledgeGraph::from_indexed(n, n_r, triples)?;
            let d = 4;
            let store = EmbeddingStore {
                scorer,
                entities: quantized(&mut rng, n, d),
                relations: quantized(&mut rng, n_r, d),
                rel_out: Tensor::zeros(n_r, d),
                rel_in: Tensor::zeros(n_r, d),
            };
            graphs += 1;
            for mode in [RankMode::Filtered, RankMode::Raw] {
                for r in rank_all(&store, graph.triples(), graph.members(), mode)? {
                    let want = sorted_rank(&store, &graph, &r.triple, r.side, mode);
                    queries += 1;
                    if r.rank != want {
                        mismatches += 1;
                    }
                    let truth = store.score(&r.triple)?;
                    let tied = (0..n).any(|e| {
                        let c = match r.side {
                            Side::Head => Triple::new(e, r.triple.relation, r.triple.tail),
                            Side::Tail => Triple::new(r.triple.head, r.triple.relation, e),
                        };
                        c != r.triple && store.score(&c).ok() == Some(truth)
                    });
                    ties += tied as usize;
                }
            }
        }
    }
    Ok(Check::new(
        mismatches == 0 && ties > 0,
        format!("{queries} queries on {graphs} graphs with 2..=50 entities, {ties} with exact ties, {mismatches} mismatches"),
    ))
}
