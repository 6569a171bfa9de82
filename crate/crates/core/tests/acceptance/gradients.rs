//! Analytic gradients against central finite differences.

use std::collections::HashMap;

use kgeu::graph::Triple;
use kgeu::kge::tape_score;
use kgeu::metaeu::learner::{generate_on_tape, raeeg_on_tape, LearnerVars};
use kgeu::metaeu::loss::loss_l4_on_tape;
use kgeu::metaeu::{ensemble_loss, BaseLearner, QueryBatch, TaskGraph};
use kgeu::{EmbeddingStore, ModelKind, NormKind, Scorer, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Check, Fallible};

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Instances whose nondifferentiable points lie closer than this are redrawn.
const KINK: f64 = 1e-3;
const INSTANCES: usize = 100;

/// Objective value, gradient per parameter and distance to the nearest kink.
type Eval = (f64, Vec<Tensor>, f64);

/// Norm-wise relative error of the analytic gradient, `None` if the instance
/// sits too close to a kink.
fn fd_error(params: &[Tensor], f: &dyn Fn(&[Tensor]) -> Fallible<Eval>) -> Fallible<Option<f64>> {
    let (_, analytic, kink) = f(params)?;
    if kink < KINK {
        return Ok(None);
    }
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    let mut work = params.to_vec();
    for (i, p) in params.iter().enumerate() {
        for j in 0..p.data().len() {
            let x = p.data()[j];
            work[i].data_mut()[j] = x + STEP;
            let up = f(&work)?.0;
            work[i].data_mut()[j] = x - STEP;
            let down = f(&work)?.0;
            work[i].data_mut()[j] = x;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic[i].data()[j];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let scale = na.sqrt().max(nn.sqrt());
    Ok(Some(if scale == 0.0 { 0.0 } else { diff.sqrt() / scale }))
}

/// Draws instances until `INSTANCES` of them avoid kinks; returns the worst error.
fn sweep(name: &str, seed: u64, mut draw: impl FnMut(&mut ChaCha8Rng) -> Fallible<(Vec<Tensor>, Box<dyn Fn(&[Tensor]) -> Fallible<Eval>>)>) -> Fallible<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut done = 0;
    let mut rejected = 0;
    while done < INSTANCES {
        let (params, f) = draw(&mut rng)?;
        match fd_error(&params, f.as_ref())? {
            Some(e) => {
                worst = worst.max(e);
                done += 1;
            }
            None => rejected += 1,
        }
        if rejected > 20 * INSTANCES {
            return Err(format!("{name}: could not draw kink-free instances").into());
        }
    }
    Ok((worst, rejected))
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::random_uniform(rows, cols, bound, rng)
}

/// Tape objective `Σ out ⊙ c` from leaves over `params`.
fn tape_eval(
    params: &[Tensor],
    project: &Tensor,
    build: &dyn Fn(&mut Tape<f64>, &[Var]) -> kgeu::Result<Var>,
) -> Fallible<Eval> {
    let mut tape = Tape::new();
    let leaves: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = build(&mut tape, &leaves)?;
    let out = if tape.value(out).shape() == (1, 1) {
        out
    } else {
        let c = tape.constant(project.clone());
        let weighted = tape.mul(out, c)?;
        tape.sum(weighted)
    };
    let grads = tape.backward(out)?;
    let value = tape.scalar_value(out)?;
    Ok((value, leaves.iter().map(|&v| grads.wrt(v)).collect(), tape.kink_margin()))
}

fn scorers() -> Vec<Scorer> {
    vec![
        Scorer::new(ModelKind::TransE, NormKind::L1),
        Scorer::new(ModelKind::TransE, NormKind::L2),
        Scorer::new(ModelKind::DistMult, NormKind::L1),
        Scorer::new(ModelKind::ComplEx, NormKind::L1),
        Scorer::new(ModelKind::RotatE, NormKind::L1),
    ]
}

fn scorer_name(s: Scorer) -> String {
    match s.kind {
        ModelKind::TransE => format!("TransE-{}", s.norm),
        k => k.name().to_owned(),
    }
}

/// Random support graph where every entity has relation context.
fn support_graph(rng: &mut ChaCha8Rng, n: usize, n_r: usize, m: usize) -> (Vec<Triple>, TaskGraph<f64>) {
    loop {
        let triples: Vec<Triple> = (0..m)
            .map(|_| Triple::new(rng.random_range(0..n), rng.random_range(0..n_r), rng.random_range(0..n)))
            .collect();
        let g = TaskGraph::new(n, n_r, &triples).expect("in range");
        if g.missing_context().is_empty() {
            return (triples, g);
        }
    }
}

/// Learner matrices from a flat parameter list in [`BaseLearner::params`] order.
fn learner_from(params: &[Tensor], dim: usize, layers: usize, n_r: usize) -> kgeu::Result<BaseLearner<f64>> {
    let slots = 2 * n_r * layers;
    BaseLearner::from_parts(
        dim,
        n_r,
        params[..slots].to_vec(),
        params[slots..slots + layers].to_vec(),
        params[slots + layers].clone(),
    )
}

/// Gradients of a bound learner in params order, zero for unused slots.
fn learner_grads(vars: &LearnerVars, grads: &kgeu::Gradients<f64>, learner: &BaseLearner<f64>) -> Vec<Tensor> {
    vars.grads(grads)
        .into_iter()
        .zip(learner.param_shapes())
        .map(|(g, (r, c))| g.unwrap_or_else(|| Tensor::zeros(r, c)))
        .collect()
}

/// Query batch over `n_gen` generated entities and `n_ext` store entities.
fn random_batch(rng: &mut ChaCha8Rng, n_gen: usize, n_ext: usize, n_r: usize, pairs: usize) -> kgeu::Result<QueryBatch> {
    let n = n_gen + n_ext;
    let pick = |rng: &mut ChaCha8Rng| {
        // every triple touches a generated entity
        let g = rng.random_range(0..n_gen);
        let o = rng.random_range(0..n);
        let r = rng.random_range(0..n_r);
        if rng.random_bool(0.5) {
            Triple::new(g, r, o)
        } else {
            Triple::new(o, r, g)
        }
    };
    let pos: Vec<Triple> = (0..pairs).map(|_| pick(rng)).collect();
    let neg: Vec<Triple> = (0..pairs).map(|_| pick(rng)).collect();
    // generated entities are global ids 0..n_gen, store entities n_gen..n
    let local: HashMap<usize, usize> = (0..n_gen).map(|e| (e, e)).collect();
    QueryBatch::new(&pos, &neg, &local, n_gen)
}

fn random_store(rng: &mut ChaCha8Rng, scorer: Scorer, n: usize, n_r: usize, d: usize) -> EmbeddingStore<f64> {
    EmbeddingStore::random(scorer, n, n_r, d, 1.0, rng).expect("valid shape")
}

pub fn criterion() -> Fallible<Check> {
    let mut report = Vec::new();
    let mut worst_all: f64 = 0.0;
    let mut record = |name: String, (worst, rejected): (f64, usize)| {
        worst_all = worst_all.max(worst);
        report.push(format!("{name} {worst:.1e} (redrawn {rejected})"));
    };
    const D: usize = 6;

    for (k, scorer) in scorers().into_iter().enumerate() {
        // tape program of the scorer
        let res = sweep("scorer", 100 + k as u64, |rng| {
            let params = vec![uniform(rng, 3, D, 1.0), uniform(rng, 3, D, 1.0), uniform(rng, 3, D, 1.0)];
            let project = uniform(rng, 3, 1, 1.0);
            let f = move |p: &[Tensor]| {
                tape_eval(p, &project, &|tape, v| tape_score::score(tape, scorer, v[0], v[1], v[2]))
            };
            Ok((params, Box::new(f) as Box<dyn Fn(&[Tensor]) -> Fallible<Eval>>))
        })?;
        record(format!("{}/tape", scorer_name(scorer)), res);

        // closed-form gradient
        let res = sweep("score_grad", 200 + k as u64, |rng| {
            let params = vec![uniform(rng, 1, D, 1.0), uniform(rng, 1, D, 1.0), uniform(rng, 1, D, 1.0)];
            let f = move |p: &[Tensor]| -> Fallible<Eval> {
                let (h, r, t) = (p[0].row(0), p[1].row(0), p[2].row(0));
                let g = scorer.score_grad(h, r, t);
                let kink = score_kink(scorer, h, r, t);
                let grads = [g.head, g.relation, g.tail]
                    .into_iter()
                    .map(|v| Tensor::from_vec(1, D, v))
                    .collect::<kgeu::Result<Vec<_>>>()?;
                Ok((scorer.score_rows(h, r, t), grads, kink))
            };
            Ok((params, Box::new(f) as Box<dyn Fn(&[Tensor]) -> Fallible<Eval>>))
        })?;
        record(format!("{}/closed-form", scorer_name(scorer)), res);
    }

    // initializer, wrt both relation tables
    let res = sweep("raeeg", 300, |rng| {
        let (n, n_r, d) = (6, 3, 4);
        let (_, graph) = support_graph(rng, n, n_r, 8);
        let params = vec![uniform(rng, n_r, d, 1.0), uniform(rng, n_r, d, 1.0)];
        let project = uniform(rng, n, d, 1.0);
        let f = move |p: &[Tensor]| tape_eval(p, &project, &|tape, v| raeeg_on_tape(tape, &graph, v[0], v[1]));
        Ok((params, Box::new(f) as Box<dyn Fn(&[Tensor]) -> Fallible<Eval>>))
    })?;
    record("RAEEG".into(), res);

    // message passing with three layers and the integrator, wrt every weight and the input rows
    let res = sweep("neem", 400, |rng| {
        let (n, n_r, d, layers) = (6, 2, 4, 3);
        let (_, graph) = support_graph(rng, n, n_r, 9);
        let learner = BaseLearner::new(d, layers, n_r, rng);
        let mut params: Vec<Tensor> = learner.params().into_iter().cloned().collect();
        params.push(uniform(rng, n, d, 1.0));
        let project = uniform(rng, n, d, 1.0);
        let f = move |p: &[Tensor]| -> Fallible<Eval> {
            let learner = learner_from(p, d, layers, n_r)?;
            let mut tape = Tape::new();
            let vars = LearnerVars::bind(&mut tape, &graph, &learner);
            let init = tape.leaf(p[p.len() - 1].clone());
            let out = generate_on_tape(&mut tape, &graph, init, &learner, &vars)?;
            let c = tape.constant(project.clone());
            let weighted = tape.mul(out, c)?;
            let total = tape.sum(weighted);
            let grads = tape.backward(total)?;
            let mut g = learner_grads(&vars, &grads, &learner);
            g.push(grads.wrt(init));
            Ok((tape.scalar_value(total)?, g, tape.kink_margin()))
        };
        Ok((params, Box::new(f) as Box<dyn Fn(&[Tensor]) -> Fallible<Eval>>))
    })?;
    record("NEEM+HEI (L=3)".into(), res);

    // integrator alone, wrt layer outputs and its matrix
    let res = sweep("hei", 500, |rng| {
        let (n, d, layers) = (5, 4, 3);
        let mut params: Vec<Tensor> = (0..=layers).map(|_| uniform(rng, n, d, 1.0)).collect();
        params.push(uniform(rng, d, (layers + 1) * d, 1.0));
        let project = uniform(rng, n, d, 1.0);
        let f = move |p: &[Tensor]| {
            tape_eval(p, &project, &|tape, v| {
                let stacked = tape.concat_cols(&v[..=layers])?;
                tape.matmul_nt(stacked, v[layers + 1])
            })
        };
        Ok((params, Box::new(f) as Box<dyn Fn(&[Tensor]) -> Fallible<Eval>>))
    })?;
    record("HEI".into(), res);

    // query losses wrt generated rows, for each scorer
    for (k, scorer) in scorers().into_iter().enumerate() {
        for (cap, label) in [(f64::INFINITY, "L1/L2"), (1.0, "L2 capped")] {
            let res = sweep("query loss", 600 + 10 * k as u64 + cap.is_finite() as u64, |rng| {
                let (n_gen, n_ext, n_r) = (4, 5, 3);
                let store = random_store(rng, scorer, n_gen + n_ext, n_r, D);
                let batch = random_batch(rng, n_gen, n_ext, n_r, 6)?;
                let params = vec![uniform(rng, n_gen, D, 1.0)];
                let unit = Tensor::zeros(1, 1);
                let f = move |p: &[Tensor]| {
                    tape_eval(p, &unit, &|tape, v| batch.mean_capped_margin_on_tape(tape, &store, v[0], 1.0, cap))
                };
                Ok((params, Box::new(f) as Box<dyn Fn(&[Tensor]) -> Fallible<Eval>>))
            })?;
            record(format!("{label}/{}", scorer_name(scorer)), res);
        }
    }

    // proximity term
    let res = sweep("l4", 700, |rng| {
        let reference = uniform(rng, 5, D, 1.0);
        let lambda = rng.random_range(0.01..2.0);
        let params = vec![uniform(rng, 5, D, 1.0)];
        let unit = Tensor::zeros(1, 1);
        let f = move |p: &[Tensor]| tape_eval(p, &unit, &|tape, v| loss_l4_on_tape(tape, v[0], &reference, lambda));
        Ok((params, Box::new(f) as Box<dyn Fn(&[Tensor]) -> Fallible<Eval>>))
    })?;
    record("L4".into(), res);

    // combined objective through the whole generator: w_a·L1 − w_b·L2 + L4,
    // wrt both relation tables and every learner matrix
    let res = sweep("l3", 800, |rng| {
        let (n_gen, n_ext, n_r, d, layers) = (5, 4, 2, 4, 3);
        let scorer = Scorer::new(ModelKind::TransE, NormKind::L1);
        let (_, graph) = support_graph(rng, n_gen, n_r, 7);
        let store = random_store(rng, scorer, n_gen + n_ext, n_r, d);
        let retain = random_batch(rng, n_gen, n_ext, n_r, 5)?;
        let forget = random_batch(rng, n_gen, n_ext, n_r, 4)?;
        let reference = uniform(rng, n_gen, d, 1.0);
        let w_a: f64 = rng.random_range(0.0..1.0);
        let learner = BaseLearner::new(d, layers, n_r, rng);
        let mut params = vec![uniform(rng, n_r, d, 1.0), uniform(rng, n_r, d, 1.0)];
        params.extend(learner.params().into_iter().cloned());
        let f = move |p: &[Tensor]| -> Fallible<Eval> {
            let learner = learner_from(&p[2..], d, layers, n_r)?;
            let mut tape = Tape::new();
            let ro = tape.leaf(p[0].clone());
            let ri = tape.leaf(p[1].clone());
            let vars = LearnerVars::bind(&mut tape, &graph, &learner);
            let init = raeeg_on_tape(&mut tape, &graph, ro, ri)?;
            let gen = generate_on_tape(&mut tape, &graph, init, &learner, &vars)?;
            let l1 = retain.mean_margin_on_tape(&mut tape, &store, gen, 1.0)?;
            let l2 = forget.mean_capped_margin_on_tape(&mut tape, &store, gen, 1.0, 1.5)?;
            let l4 = loss_l4_on_tape(&mut tape, gen, &reference, 0.3)?;
            let a = tape.scale(l1, w_a);
            let b = tape.scale(l2, -(1.0 - w_a));
            let ab = tape.add(a, b)?;
            let total = tape.add(ab, l4)?;
            let grads = tape.backward(total)?;
            let mut g = vec![grads.wrt(ro), grads.wrt(ri)];
            g.extend(learner_grads(&vars, &grads, &learner));
            Ok((tape.scalar_value(total)?, g, tape.kink_margin()))
        };
        Ok((params, Box::new(f) as Box<dyn Fn(&[Tensor]) -> Fallible<Eval>>))
    })?;
    record("L3 through generator".into(), res);

    // ensemble combination wrt the simplex weights
    let res = sweep("ensemble", 900, |rng| {
        let losses: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..3.0)).collect();
        let params = vec![uniform(rng, 1, 4, 1.0)];
        let f = move |p: &[Tensor]| -> Fallible<Eval> {
            let value = ensemble_loss(&losses, p[0].data())?;
            Ok((value, vec![Tensor::from_vec(1, 4, losses.clone())?], f64::INFINITY))
        };
        Ok((params, Box::new(f) as Box<dyn Fn(&[Tensor]) -> Fallible<Eval>>))
    })?;
    record("ensemble weights".into(), res);

    Ok(Check::new(
        worst_all < TOLERANCE,
        format!("worst relative error {worst_all:.2e} over {INSTANCES} instances each; {}", report.join(", ")),
    ))
}

/// Distance of a closed-form score from the kinks of its norm.
fn score_kink(scorer: Scorer, h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    let d = h.len();
    match scorer.kind {
        ModelKind::TransE => {
            let diff: Vec<f64> = (0..d).map(|k| h[k] + r[k] - t[k]).collect();
            match scorer.norm {
                NormKind::L1 => diff.iter().fold(f64::INFINITY, |m, x| m.min(x.abs())),
                NormKind::L2 => diff.iter().map(|x| x * x).sum::<f64>().sqrt(),
            }
        }
        ModelKind::RotatE => -scorer.score_rows(h, r, t),
        _ => f64::INFINITY,
    }
}
