//! Library formulas against plain scalar loops over raw triple lists.

use std::collections::{BTreeSet, HashMap};

use kgeu::graph::Triple;
use kgeu::metaeu::loss::check_combination;
use kgeu::metaeu::{ensemble_loss, hei, loss_l3, loss_l4, neem_forward, raeeg_init, BaseLearner, QueryBatch, TaskGraph};
use kgeu::{hits_at, mrr, EmbeddingStore, ModelKind, NormKind, Scorer, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Check, Fallible};

const TOLERANCE: f64 = 1e-12;
const INSTANCES: usize = 50;

type Matrix = Vec<Vec<f64>>;

fn to_matrix(t: &Tensor) -> Matrix {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// Largest entrywise gap, relative to the magnitude when that exceeds one.
fn gap(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len());
        for (u, v) in x.iter().zip(y) {
            worst = worst.max(scalar_gap(*u, *v));
        }
    }
    worst
}

fn scalar_gap(u: f64, v: f64) -> f64 {
    (u - v).abs() / u.abs().max(v.abs()).max(1.0)
}

/// `W v` for a `d × d` weight.
fn apply(w: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..w.rows()).map(|i| (0..w.cols()).map(|j| w.get(i, j) * v[j]).sum()).collect()
}

fn random_support(rng: &mut ChaCha8Rng, n: usize, n_r: usize, m: usize) -> Vec<Triple> {
    loop {
        let triples: Vec<Triple> = (0..m)
            .map(|_| Triple::new(rng.random_range(0..n), rng.random_range(0..n_r), rng.random_range(0..n)))
            .collect();
        let touched: BTreeSet<usize> = triples.iter().flat_map(|t| [t.head, t.tail]).collect();
        if touched.len() == n {
            return triples;
        }
    }
}

fn oracle_raeeg(n: usize, triples: &[Triple], rel_out: &Matrix, rel_in: &Matrix) -> Matrix {
    let d = rel_out[0].len();
    let mut out = vec![vec![0.0; d]; n];
    for (e, row) in out.iter_mut().enumerate() {
        let mut outs = Vec::new();
        let mut ins = Vec::new();
        for t in triples {
            if t.head == e && !outs.contains(&t.relation) {
                outs.push(t.relation);
            }
            if t.tail == e && !ins.contains(&t.relation) {
                ins.push(t.relation);
            }
        }
        let k = (outs.len() + ins.len()) as f64;
        for &r in &outs {
            for j in 0..d {
                row[j] += rel_out[r][j] / k;
            }
        }
        for &r in &ins {
            for j in 0..d {
                row[j] += rel_in[r][j] / k;
            }
        }
    }
    out
}

fn oracle_neem(triples: &[Triple], n_r: usize, init: &Matrix, learner: &BaseLearner<f64>) -> Vec<Matrix> {
    let n = init.len();
    let d = init[0].len();
    let mut layers = vec![init.clone()];
    for l in 0..learner.layers() {
        let h = &layers[l];
        let mut next = vec![vec![0.0; d]; n];
        for e in 0..n {
            let mut acc = apply(learner.self_weight(l), &h[e]);
            for r in 0..n_r {
                // tails of e under r, then heads of e under r, each without repeats
                for (slot, outgoing) in [(2 * r, true), (2 * r + 1, false)] {
                    let mut nb: Vec<usize> = Vec::new();
                    for t in triples.iter().filter(|t| t.relation == r) {
                        let u = if outgoing && t.head == e {
                            Some(t.tail)
                        } else if !outgoing && t.tail == e {
                            Some(t.head)
                        } else {
                            None
                        };
                        if let Some(u) = u {
                            if !nb.contains(&u) {
                                nb.push(u);
                            }
                        }
                    }
                    if nb.is_empty() {
                        continue;
                    }
                    let mut mean = vec![0.0; d];
                    for &u in &nb {
                        for j in 0..d {
                            mean[j] += h[u][j] / nb.len() as f64;
                        }
                    }
                    let msg = apply(learner.relation_weight(l, slot), &mean);
                    for j in 0..d {
                        acc[j] += msg[j];
                    }
                }
            }
            next[e] = acc.into_iter().map(|x| x.max(0.0)).collect();
        }
        layers.push(next);
    }
    layers
}

fn oracle_hei(layers: &[Matrix], w: &Tensor) -> Matrix {
    let n = layers[0].len();
    let mut out = vec![vec![0.0; w.rows()]; n];
    for e in 0..n {
        let stacked: Vec<f64> = layers.iter().flat_map(|l| l[e].iter().copied()).collect();
        out[e] = apply(w, &stacked);
    }
    out
}

/// Scores written out component by component.
fn oracle_score(kind: ModelKind, norm: NormKind, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    let d = h.len();
    match kind {
        ModelKind::TransE => {
            let mut s = 0.0;
            for k in 0..d {
                let x = h[k] + r[k] - t[k];
                s += if norm == NormKind::L1 { x.abs() } else { x * x };
            }
            if norm == NormKind::L1 {
                -s
            } else {
                -s.sqrt()
            }
        }
        ModelKind::DistMult => {
            let mut s = 0.0;
            for k in 0..d {
                s += h[k] * r[k] * t[k];
            }
            s
        }
        ModelKind::ComplEx => {
            let m = d / 2;
            let mut s = 0.0;
            for k in 0..m {
                // Re(h · r · conj(t))
                let (hr_re, hr_im) = (h[k] * r[k] - h[m + k] * r[m + k], h[k] * r[m + k] + h[m + k] * r[k]);
                s += hr_re * t[k] + hr_im * t[m + k];
            }
            s
        }
        ModelKind::RotatE => {
            let m = d / 2;
            let mut s = 0.0;
            for k in 0..m {
                let (c, sn) = (r[k].cos(), r[k].sin());
                let re = h[k] * c - h[m + k] * sn - t[k];
                let im = h[k] * sn + h[m + k] * c - t[m + k];
                s += re * re + im * im;
            }
            -s.sqrt()
        }
    }
}

pub fn criterion() -> Fallible<Check> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: HashMap<&str, f64> = HashMap::new();
    let mut note = |k: &'static str, g: f64| {
        let w = worst.entry(k).or_insert(0.0);
        *w = w.max(g);
    };

    for _ in 0..INSTANCES {
        let n = rng.random_range(3..10);
        let n_r = rng.random_range(1..4);
        let d = 2 * rng.random_range(1..4);
        let m = rng.random_range(n..3 * n);
        let support = random_support(&mut rng, n, n_r, m);
        let graph = TaskGraph::<f64>::new(n, n_r, &support)?;

        let rel_out = Tensor::random_uniform(n_r, d, 1.0, &mut rng);
        let rel_in = Tensor::random_uniform(n_r, d, 1.0, &mut rng);
        let init = raeeg_init(&graph, &rel_out, &rel_in)?;
        note(
            "raeeg_init",
            gap(&to_matrix(&init), &oracle_raeeg(n, &support, &to_matrix(&rel_out), &to_matrix(&rel_in))),
        );

        let layers = rng.random_range(1..4);
        let learner = BaseLearner::new(d, layers, n_r, &mut rng);
        let lib = neem_forward(&graph, &init, &learner)?;
        let ora = oracle_neem(&support, n_r, &to_matrix(&init), &learner);
        for (a, b) in lib.iter().zip(&ora) {
            note("neem_forward", gap(&to_matrix(a), b));
        }
        note("hei", gap(&to_matrix(&hei(&lib, learner.hei())?), &oracle_hei(&ora, learner.hei())));

        // query losses of one learner and their ensemble combination
        let kind = ModelKind::ALL[rng.random_range(0..4)];
        let norm = if rng.random_bool(0.5) { NormKind::L1 } else { NormKind::L2 };
        let n_ext = rng.random_range(1..6);
        let store = EmbeddingStore::random(Scorer::new(kind, norm), n + n_ext, n_r, d, 1.0, &mut rng)?;
        let local: HashMap<usize, usize> = (0..n).map(|e| (e, e)).collect();
        let draw = |rng: &mut ChaCha8Rng| {
            Triple::new(rng.random_range(0..n + n_ext), rng.random_range(0..n_r), rng.random_range(0..n))
        };
        let pairs = rng.random_range(1..8);
        let pos: Vec<Triple> = (0..pairs).map(|_| draw(&mut rng)).collect();
        let neg: Vec<Triple> = (0..pairs).map(|_| draw(&mut rng)).collect();
        let batch = QueryBatch::new(&pos, &neg, &local, n)?;
        let cap = rng.random_range(0.5..3.0);
        let n_learners = rng.random_range(1..5);
        let mut per_learner = Vec::new();
        let mut per_learner_oracle = Vec::new();
        for _ in 0..n_learners {
            let generated = Tensor::random_uniform(n, d, 1.0, &mut rng);
            let row = |e: usize| -> &[f64] {
                if e < n {
                    generated.row(e)
                } else {
                    store.entities.row(e)
                }
            };
            let mut plain = 0.0;
            let mut capped = 0.0;
            for (p, q) in pos.iter().zip(&neg) {
                let sp = oracle_score(kind, norm, row(p.head), store.relations.row(p.relation), row(p.tail));
                let sq = oracle_score(kind, norm, row(q.head), store.relations.row(q.relation), row(q.tail));
                let h = (1.0 + sq - sp).max(0.0);
                plain += h;
                capped += h.min(cap);
            }
            plain /= pairs as f64;
            capped /= pairs as f64;
            note("query margin", scalar_gap(batch.mean_margin(&store, &generated, 1.0)?, plain));
            note(
                "capped query margin",
                scalar_gap(batch.mean_capped_margin(&store, &generated, 1.0, cap)?, capped),
            );
            per_learner.push(batch.mean_margin(&store, &generated, 1.0)?);
            per_learner_oracle.push(plain);

            let reference = Tensor::random_uniform(n, d, 1.0, &mut rng);
            let lambda = rng.random_range(0.0..2.0);
            let mut sq = 0.0;
            for e in 0..n {
                for j in 0..d {
                    sq += (generated.get(e, j) - reference.get(e, j)).powi(2);
                }
            }
            note("L4", scalar_gap(loss_l4(&generated, &reference, lambda)?, lambda * sq / n as f64));
        }
        let raw_w: Vec<f64> = (0..n_learners).map(|_| rng.random_range(0.0..1.0)).collect();
        let total: f64 = raw_w.iter().sum();
        let w: Vec<f64> = raw_w.iter().map(|x| x / total).collect();
        let mut combined = 0.0;
        for i in 0..n_learners {
            combined += w[i] * per_learner_oracle[i];
        }
        note("ensemble loss", scalar_gap(ensemble_loss(&per_learner, &w)?, combined));

        let (l1, l2) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let w_a: f64 = rng.random_range(0.0..1.0);
        check_combination(w_a, 1.0 - w_a)?;
        note("L3", scalar_gap(loss_l3(l1, l2, w_a, 1.0 - w_a)?, w_a * l1 - (1.0 - w_a) * l2));

        // metrics over a random rank list
        let q = rng.random_range(1..40);
        let ranks: Vec<usize> = (0..q).map(|_| rng.random_range(1..60)).collect();
        let mut rr = 0.0;
        for &r in &ranks {
            rr += 1.0 / r as f64;
        }
        note("mrr", scalar_gap(mrr(&ranks)?, rr / q as f64));
        for cut in [1, 3, 5, 10] {
            let mut hit = 0usize;
            for &r in &ranks {
                if r <= cut {
                    hit += 1;
                }
            }
            note("hits", scalar_gap(hits_at(&ranks, cut)?, hit as f64 / q as f64));
        }
    }

    let worst_all = worst.values().copied().fold(0.0, f64::max);
    let mut parts: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    parts.sort();
    Ok(Check::new(
        worst_all <= TOLERANCE,
        format!("worst gap {worst_all:.1e} over {INSTANCES} instances; {}", parts.join(", ")),
    ))
}
