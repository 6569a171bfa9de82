//! Desk-scale benchmark shared by the ordering, generalization, invariant,
//! determinism and ablation criteria.
//!
//! Per seed: a 200-entity synthetic graph, 10% held out as test, 5% of the
//! rest forgotten. RAW trains on everything else, Retrained on the retained
//! triples only, Unlearned applies the meta-trained ensemble to RAW.

use std::collections::HashSet;
use std::time::{Duration, Instant};

use kgeu::eval::rank_all;
use kgeu::graph::{split_forget, ForgetSpec, ForgetSplit, Triple};
use kgeu::kge::checkpoint::encode_store;
use kgeu::kge::{train_baseline, TrainConfig};
use kgeu::metaeu::checkpoint::encode_model;
use kgeu::metaeu::ensemble::{random_like, SIMPLEX_TOL};
use kgeu::metaeu::loss::check_combination;
use kgeu::metaeu::{generate_task, meta_train, task_query_ranks, unlearn, MetaTrainConfig, MetaTrainOutcome, UnlearnConfig, UnlearnOutcome};
use kgeu::optim::on_simplex;
use kgeu::synth::{synthesize, SynthConfig};
use kgeu::{
    hits_at, mrr, task_stream, Ablation, EmbeddingStore, EvalReport, KnowledgeGraph, MetaModel, Metrics, ModelKind,
    NormKind, RankMode, Scorer, Split, TaskParams, TaskStream,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Check, Fallible};

const SEEDS: u64 = 5;
const KINDS: [ModelKind; 2] = [ModelKind::TransE, ModelKind::DistMult];
const LEARNERS: usize = 4;
const LAYERS: usize = 3;

fn unlearn_config(seed: u64) -> UnlearnConfig<f64> {
    UnlearnConfig {
        steps: 100,
        steps5: 30,
        seed,
        ..Default::default()
    }
}

struct Setup {
    full: KnowledgeGraph,
    train: KnowledgeGraph,
    test: Vec<Triple>,
    split: ForgetSplit,
}

impl Setup {
    fn new(seed: u64) -> Fallible<Self> {
        let full = synthesize(&SynthConfig { seed, ..Default::default() })?;
        let held = split_forget(&full, &ForgetSpec::Fraction(0.1), seed)?;
        let train = full.with_triples(held.retain)?;
        let split = split_forget(&train, &ForgetSpec::Fraction(0.05), seed + 1)?;
        Ok(Self {
            full,
            train,
            test: held.forget,
            split,
        })
    }
}

/// Ranks-level checks over every evaluation of a run.
#[derive(Default)]
struct EvalAudit {
    queries: usize,
    filtered_above_raw: usize,
    inconsistent: usize,
}

pub struct Run {
    kind: ModelKind,
    seed: u64,
    setup: Setup,
    raw: EmbeddingStore<f64>,
    retrained: EmbeddingStore<f64>,
    stream: TaskStream,
    meta: MetaTrainOutcome<f64>,
    meta_time: Duration,
    outcome: UnlearnOutcome<f64>,
    report: EvalReport,
    audit: EvalAudit,
}

fn evaluate_into(
    report: &mut EvalReport,
    audit: &mut EvalAudit,
    condition: &str,
    store: &EmbeddingStore<f64>,
    setup: &Setup,
) -> Fallible<()> {
    for (split, triples) in [(Split::Test, &setup.test), (Split::Forget, &setup.split.forget)] {
        let known = setup.full.members();
        let filtered = rank_all(store, triples, known, RankMode::Filtered)?;
        let raw = rank_all(store, triples, known, RankMode::Raw)?;
        for (f, r) in filtered.iter().zip(&raw) {
            audit.queries += 1;
            audit.filtered_above_raw += (f.rank > r.rank) as usize;
        }
        let ranks: Vec<usize> = filtered.iter().map(|r| r.rank).collect();
        let metrics = Metrics::from_ranks(&ranks)?;
        let mut monotone = metrics.is_consistent();
        let mut previous = 0.0;
        for n in 1..=store.num_entities() {
            let h = hits_at(&ranks, n)?;
            monotone &= h >= previous;
            previous = h;
        }
        audit.inconsistent += !monotone as usize;
        report.push(condition, split, metrics);
    }
    Ok(())
}

fn train_meta(raw: &EmbeddingStore<f64>, setup: &Setup, stream: &TaskStream, seed: u64, ablation: Ablation) -> Fallible<MetaTrainOutcome<f64>> {
    let config = MetaTrainConfig {
        seed,
        ablation,
        ..Default::default()
    };
    let model = MetaModel::new(raw, LEARNERS, LAYERS, seed)?;
    Ok(meta_train(raw, setup.train.members(), &stream.train, &stream.valid, model, &config)?)
}

impl Run {
    fn new(kind: ModelKind, seed: u64) -> Fallible<Self> {
        let setup = Setup::new(seed)?;
        let scorer = Scorer::new(kind, NormKind::L1);
        let config = TrainConfig { seed, ..Default::default() };
        let raw = train_baseline(&setup.train, scorer, &config)?.store;
        let retain_graph = setup.train.with_triples(setup.split.retain.clone())?;
        let retrained = train_baseline(&retain_graph, scorer, &config)?.store;
        let stream = task_stream(&setup.train, 500, 50, &TaskParams::default(), seed)?;
        let start = Instant::now();
        let meta = train_meta(&raw, &setup, &stream, seed, Ablation::none())?;
        let meta_time = start.elapsed();
        let outcome = unlearn(&setup.train, &raw, &setup.split, &meta.model, &Ablation::none(), &unlearn_config(seed))?;
        let mut report = EvalReport::default();
        let mut audit = EvalAudit::default();
        evaluate_into(&mut report, &mut audit, "RAW", &raw, &setup)?;
        evaluate_into(&mut report, &mut audit, "Retrained", &retrained, &setup)?;
        evaluate_into(&mut report, &mut audit, "Unlearned", &outcome.store, &setup)?;
        Ok(Self {
            kind,
            seed,
            setup,
            raw,
            retrained,
            stream,
            meta,
            meta_time,
            outcome,
            report,
            audit,
        })
    }

    fn mrr(&self, condition: &str, split: Split) -> f64 {
        self.report.get(condition, split).expect("evaluated").mrr
    }

    /// Every artifact of the pipeline as bytes.
    fn fingerprint(&self) -> Vec<(&'static str, Vec<u8>)> {
        vec![
            ("raw checkpoint", encode_store(&self.raw)),
            ("retrained checkpoint", encode_store(&self.retrained)),
            ("meta checkpoint", encode_model(&self.meta.model)),
            ("unlearned checkpoint", encode_store(&self.outcome.store)),
            ("report", self.report.to_csv().into_bytes()),
        ]
    }
}

struct AblationRun {
    label: String,
    test_mrr: f64,
    weight_trace: Vec<Vec<f64>>,
    audit: EvalAudit,
}

fn ablation_runs(base: &Run) -> Fallible<Vec<AblationRun>> {
    let mut switches: Vec<Ablation> = (0..LEARNERS)
        .map(|k| Ablation {
            drop_learner: Some(k),
            ..Ablation::none()
        })
        .collect();
    switches.push("disable-raeeg".parse()?);
    switches.push("disable-neem".parse()?);
    let mut out = Vec::new();
    for ablation in switches {
        let mut traces = Vec::new();
        let model = if ablation.drop_learner.is_some() {
            base.meta.model.clone()
        } else {
            let meta = train_meta(&base.raw, &base.setup, &base.stream, base.seed, ablation)?;
            traces.extend(meta.weight_trace);
            meta.model
        };
        let outcome = unlearn(&base.setup.train, &base.raw, &base.setup.split, &model, &ablation, &unlearn_config(base.seed))?;
        traces.extend(outcome.weight_trace);
        let mut report = EvalReport::default();
        let mut audit = EvalAudit::default();
        let label = ablation.to_string();
        evaluate_into(&mut report, &mut audit, &label, &outcome.store, &base.setup)?;
        out.push(AblationRun {
            test_mrr: report.get(&label, Split::Test).expect("evaluated").mrr,
            label,
            weight_trace: traces,
            audit,
        });
    }
    Ok(out)
}

pub struct Suite {
    runs: Result<Vec<Run>, String>,
    rerun: Result<Run, String>,
    ablations: Result<Vec<AblationRun>, String>,
}

impl Suite {
    pub fn run() -> Self {
        let mut runs = Vec::new();
        let mut failure = None;
        'outer: for kind in KINDS {
            for seed in 0..SEEDS {
                let start = Instant::now();
                match Run::new(kind, seed) {
                    Ok(r) => {
                        eprintln!(
                            "benchmark {kind} seed {seed}: forget MRR {:.4} / {:.4} / {:.4}, test MRR {:.4} / {:.4} / {:.4} ({:.0}s)",
                            r.mrr("RAW", Split::Forget),
                            r.mrr("Retrained", Split::Forget),
                            r.mrr("Unlearned", Split::Forget),
                            r.mrr("RAW", Split::Test),
                            r.mrr("Retrained", Split::Test),
                            r.mrr("Unlearned", Split::Test),
                            start.elapsed().as_secs_f64()
                        );
                        runs.push(r)
                    }
                    Err(e) => {
                        failure = Some(format!("{kind} seed {seed}: {e}"));
                        break 'outer;
                    }
                }
            }
        }
        let runs = match failure {
            Some(e) => Err(e),
            None => Ok(runs),
        };
        let rerun = Run::new(KINDS[0], 0).map_err(|e| e.to_string());
        let ablations = match &runs {
            Ok(r) => ablation_runs(&r[0]).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        Self { runs, rerun, ablations }
    }

    fn runs(&self) -> Fallible<&[Run]> {
        self.runs.as_deref().map_err(|e| e.clone().into())
    }
}

pub fn ordering(suite: &Suite) -> Fallible<Check> {
    let runs = suite.runs()?;
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in KINDS {
        let of: Vec<&Run> = runs.iter().filter(|r| r.kind == kind).collect();
        let mean = |c: &str, s: Split| of.iter().map(|r| r.mrr(c, s)).sum::<f64>() / of.len() as f64;
        let (fr, ft, fu) = (mean("RAW", Split::Forget), mean("Retrained", Split::Forget), mean("Unlearned", Split::Forget));
        let (tr, tt, tu) = (mean("RAW", Split::Test), mean("Retrained", Split::Test), mean("Unlearned", Split::Test));
        let ok = fr - ft >= 0.02 && ft - fu >= 0.02 && tu >= tt - 0.01 && tu >= 0.9 * tr;
        pass &= ok;
        parts.push(format!(
            "{kind} over {} seeds: forget {fr:.4} > {ft:.4} > {fu:.4}, test RAW {tr:.4} Retrained {tt:.4} Unlearned {tu:.4} ({})",
            of.len(),
            if ok { "ok" } else { "violated" }
        ));
    }
    Ok(Check::new(pass, parts.join("; ")))
}

pub fn generalization(suite: &Suite) -> Fallible<Check> {
    let run = &suite.runs()?[0];
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut generated = Vec::new();
    let mut random = Vec::new();
    for task in &run.stream.valid {
        let emb = generate_task(&run.meta.model, task)?;
        generated.extend(task_query_ranks(&run.raw, run.setup.full.members(), task, &emb, RankMode::Filtered)?);
        let noise = random_like(task.num_entities(), &run.raw.entities, &mut rng);
        random.extend(task_query_ranks(&run.raw, run.setup.full.members(), task, &noise, RankMode::Filtered)?);
    }
    let (g, r) = (mrr(&generated)?, mrr(&random)?);
    let time = run.meta_time + start.elapsed();
    Ok(Check::new(
        g >= 3.0 * r && time < Duration::from_secs(600),
        format!(
            "{} held-out tasks of {} seed {}: generated MRR {g:.4} vs random {r:.4} ({:.1}x); meta-training + scoring {:.0}s",
            run.stream.valid.len(),
            run.kind,
            run.seed,
            g / r,
            time.as_secs_f64()
        ),
    ))
}

pub fn invariants(suite: &Suite) -> Fallible<Check> {
    let runs = suite.runs()?;
    let mut steps = 0usize;
    let mut off_simplex = 0usize;
    let mut audit = EvalAudit::default();
    let mut absorb = |trace: &[Vec<f64>], a: &EvalAudit| {
        for w in trace {
            steps += 1;
            off_simplex += !on_simplex(w, SIMPLEX_TOL) as usize;
        }
        audit.queries += a.queries;
        audit.filtered_above_raw += a.filtered_above_raw;
        audit.inconsistent += a.inconsistent;
    };
    for r in runs {
        absorb(&r.meta.weight_trace, &r.audit);
        absorb(&r.outcome.weight_trace, &EvalAudit::default());
    }
    if let Ok(abl) = &suite.ablations {
        for a in abl {
            absorb(&a.weight_trace, &a.audit);
        }
    }
    let config = unlearn_config(0);
    let combination = check_combination(config.w_a, config.w_b).is_ok();

    let setup = Setup::new(0)?;
    let tasks = task_stream(&setup.train, 1000, 0, &TaskParams::default(), 17)?.train;
    let n_r = setup.train.num_relations();
    let mut bad_tasks = 0usize;
    for task in &tasks {
        let inside = task
            .support
            .iter()
            .chain(&task.query)
            .all(|t| setup.train.contains(&task.to_global(t)));
        let support: HashSet<&Triple> = task.support.iter().collect();
        let disjoint = task.query.iter().all(|t| !support.contains(t));
        if task.check(n_r).is_err() || !inside || !disjoint {
            bad_tasks += 1;
        }
    }

    let pass = off_simplex == 0
        && steps > 0
        && combination
        && bad_tasks == 0
        && tasks.len() == 1000
        && audit.filtered_above_raw == 0
        && audit.inconsistent == 0;
    Ok(Check::new(
        pass,
        format!(
            "{steps} weight updates, {off_simplex} off the simplex, w_a + w_b = 1: {combination}; {} tasks, {bad_tasks} violating partition/coverage; {} eval queries, {} filtered rank above raw, {} metric sets non-monotone",
            tasks.len(),
            audit.queries,
            audit.filtered_above_raw,
            audit.inconsistent
        ),
    ))
}

pub fn determinism(suite: &Suite) -> Fallible<Check> {
    let first = &suite.runs()?[0];
    let second = suite.rerun.as_ref().map_err(|e| e.clone())?;
    let a = first.fingerprint();
    let b = second.fingerprint();
    let differing: Vec<&str> = a.iter().zip(&b).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0).collect();
    let bytes: usize = a.iter().map(|(_, v)| v.len()).sum();
    Ok(Check::new(
        differing.is_empty(),
        if differing.is_empty() {
            format!("{} seed 0 pipeline run twice: {} artifacts, {bytes} bytes identical", first.kind, a.len())
        } else {
            format!("artifacts differ between runs: {}", differing.join(", "))
        },
    ))
}

pub fn ablations(suite: &Suite) -> Fallible<Check> {
    let base = &suite.runs()?[0];
    let abl = suite.ablations.as_ref().map_err(|e| e.clone())?;
    let full = base.mrr("Unlearned", Split::Test);
    let mut pass = true;
    let mut parts = vec![format!("full ensemble test MRR {full:.4}")];
    for a in abl {
        let delta = a.test_mrr - full;
        let ok = if a.label.starts_with("drop-learner") {
            delta.abs() < 0.05
        } else {
            -delta >= 0.02
        };
        pass &= ok;
        parts.push(format!("{} {:.4} ({delta:+.4}, {})", a.label, a.test_mrr, if ok { "ok" } else { "violated" }));
    }
    Ok(Check::new(pass, parts.join(", ")))
}
