//! One function per subcommand. Every stage reads its inputs from the run
//! directory and records what it writes in the manifest.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use anyhow::Result;
use kgeu::graph::{load_triples, read_tsv, resolve_named, split_forget, ForgetSpec, ForgetSplit, Triple, Vocab};
use kgeu::kge::checkpoint::{decode_store, encode_store};
use kgeu::kge::train_baseline;
use kgeu::metaeu::checkpoint::{decode_model, encode_model};
use kgeu::metaeu::{meta_train as run_meta_train, unlearn as run_unlearn};
use kgeu::metatask::dump_tasks;
use kgeu::synth::{synthesize, SynthConfig};
use kgeu::{evaluate, task_stream, Ablation, EmbeddingStore, EvalReport, KnowledgeGraph, MetaModel, Split};
use log::{info, warn};

use crate::config::RunConfig;
use crate::errors::{tagged, Tagged};
use crate::rundir::{digest, RunDir};

const ENTITIES: &str = "entities.txt";
const RELATIONS: &str = "relations.txt";
const TRAIN: &str = "train.tsv";
const TEST: &str = "test.tsv";
const FORGET: &str = "forget.tsv";
const TASKS: &str = "tasks.txt";
const RAW: &str = "raw.ckpt";
const RETRAINED: &str = "retrained.ckpt";
pub const REPORT_CSV: &str = "report.csv";
pub const REPORT_TXT: &str = "report.txt";

/// The ingested splits.
struct Data {
    /// Training and test triples together; the ranking filter.
    full: KnowledgeGraph,
    train: KnowledgeGraph,
    test: Vec<Triple>,
    split: ForgetSplit,
}

fn names(v: &Vocab) -> Vec<u8> {
    let mut out = String::new();
    for n in v.names() {
        out.push_str(n);
        out.push('\n');
    }
    out.into_bytes()
}

fn tsv(graph: &KnowledgeGraph, triples: &[Triple]) -> Vec<u8> {
    let mut out = String::new();
    for t in triples {
        out.push_str(&graph.display_triple(t));
        out.push('\n');
    }
    out.into_bytes()
}

fn parse_tsv(text: &str) -> Vec<(String, String, String)> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut f = l.splitn(3, '\t');
            let mut next = || f.next().unwrap_or_default().to_owned();
            (next(), next(), next())
        })
        .collect()
}

fn load_data(dir: &RunDir) -> Result<Data> {
    let vocab = |name: &str| -> Result<Arc<Vocab>> {
        let text = dir.read_string(name, "ingest")?;
        Ok(Arc::new(Vocab::from_names(text.lines())?))
    };
    let (entities, relations) = (vocab(ENTITIES)?, vocab(RELATIONS)?);
    let (empty, _) = KnowledgeGraph::new(entities, relations, [])?;
    let triples = |name: &str| -> Result<Vec<Triple>> {
        Ok(resolve_named(&empty, &parse_tsv(&dir.read_string(name, "ingest")?))?)
    };
    let train = empty.with_triples(triples(TRAIN)?)?;
    let test = triples(TEST)?;
    let forget = triples(FORGET)?;
    let full = train.with_triples(train.triples().iter().chain(&test).copied())?;
    let split = split_forget(&train, &ForgetSpec::Explicit(forget), 0)?;
    Ok(Data { full, train, test, split })
}

fn load_store(dir: &RunDir, name: &str, producer: &str) -> Result<EmbeddingStore<f64>> {
    Ok(decode_store(&dir.read(name, producer)?)?)
}

fn meta_name(ablation: &Ablation) -> String {
    if ablation.disable_raeeg || ablation.disable_neem {
        format!("meta-{ablation}.ckpt")
    } else {
        "meta.ckpt".to_owned()
    }
}

fn meta_producer(ablation: &Ablation) -> String {
    if ablation.disable_raeeg || ablation.disable_neem {
        format!("meta-train --ablate {ablation}")
    } else {
        "meta-train".to_owned()
    }
}

fn unlearned_name(ablation: &Ablation) -> String {
    if ablation.is_none() {
        "unlearned.ckpt".to_owned()
    } else {
        format!("unlearned-{ablation}.ckpt")
    }
}

pub fn ingest(config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let path = &config.data.path;
    let bytes = fs::read(path)
        .map_err(|e| tagged("io", format!("reading dataset {}: {e}", path.display())))?;
    dir.record_input("dataset", digest(&bytes))?;
    let ingested = load_triples(path)?;
    if ingested.duplicates > 0 {
        warn!("dropped {} duplicate triples from {}", ingested.duplicates, path.display());
    }
    let graph = ingested.graph;
    let held = split_forget(&graph, &ForgetSpec::Fraction(config.data.test_fraction), config.seed)?;
    let train = graph.with_triples(held.retain.iter().copied())?;
    let spec = match &config.unlearn.forget_path {
        Some(p) => {
            dir.record_input("forget", digest(&fs::read(p)?))?;
            ForgetSpec::Explicit(resolve_named(&train, &read_tsv(p)?)?)
        }
        None => ForgetSpec::Fraction(config.unlearn.forget_fraction),
    };
    let split = split_forget(&train, &spec, config.seed + 1)?;
    if split.forget.is_empty() || held.forget.is_empty() {
        return Err(tagged("config", "the test or forget split is empty; raise the fractions"));
    }
    dir.write(ENTITIES, &names(graph.entities()), "ingest")?;
    dir.write(RELATIONS, &names(graph.relations()), "ingest")?;
    dir.write(TRAIN, &tsv(&graph, train.triples()), "ingest")?;
    dir.write(TEST, &tsv(&graph, &held.forget), "ingest")?;
    dir.write(FORGET, &tsv(&graph, &split.forget), "ingest")?;
    println!(
        "{} entities, {} relations; {} train ({} to forget), {} test",
        graph.num_entities(),
        graph.num_relations(),
        train.len(),
        split.forget.len(),
        held.forget.len()
    );
    Ok(())
}

pub fn train_raw(config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let data = load_data(dir)?;
    let out = train_baseline(&data.train, config.scorer()?, &config.train_config())?;
    info!("RAW final epoch loss {:?}", out.epoch_losses.last());
    dir.write(RAW, &encode_store(&out.store), "train-raw")
}

pub fn retrain(config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let data = load_data(dir)?;
    let retained = data.train.with_triples(data.split.retain.iter().copied())?;
    let out = train_baseline(&retained, config.scorer()?, &config.train_config())?;
    info!("Retrained final epoch loss {:?}", out.epoch_losses.last());
    dir.write(RETRAINED, &encode_store(&out.store), "retrain")
}

pub fn meta_train(config: &RunConfig, dir: &mut RunDir, ablation: Ablation) -> Result<()> {
    if ablation.drop_learner.is_some() {
        return Err(tagged(
            "config",
            format!("{ablation} acts on a trained ensemble; use `kgeu unlearn --ablate {ablation}` or `kgeu ablate`"),
        ));
    }
    let data = load_data(dir)?;
    let raw = load_store(dir, RAW, "train-raw")?;
    let stream = task_stream(
        &data.train,
        config.tasks.train,
        config.tasks.valid,
        &config.task_params(),
        config.seed,
    )?;
    let tasks: Vec<_> = stream.train.iter().chain(&stream.valid).cloned().collect();
    dir.write(TASKS, dump_tasks(&data.train, &tasks)?.as_bytes(), "meta-train")?;
    let model = MetaModel::new(&raw, config.meta.learners, config.meta.layers, config.seed)?;
    let out = run_meta_train(
        &raw,
        data.train.members(),
        &stream.train,
        &stream.valid,
        model,
        &config.meta_config(ablation),
    )?;
    if let (Some(t), v) = (out.train_losses.last(), out.valid_losses.last()) {
        println!("meta-training loss {t:.4}, validation {}", v.map_or("-".to_owned(), |v| format!("{v:.4}")));
    }
    dir.write(&meta_name(&ablation), &encode_model(&out.model), "meta-train")
}

pub fn unlearn(config: &RunConfig, dir: &mut RunDir, ablation: Ablation) -> Result<()> {
    let data = load_data(dir)?;
    let raw = load_store(dir, RAW, "train-raw")?;
    let model: MetaModel<f64> = decode_model(&dir.read(&meta_name(&ablation), &meta_producer(&ablation))?)?;
    let out = run_unlearn(&data.train, &raw, &data.split, &model, &ablation, &config.unlearn_config())?;
    for w in &out.warnings {
        warn!("{w}");
    }
    println!(
        "forgot {} triples; {} entity rows regenerated",
        data.split.forget.len(),
        out.affected.len()
    );
    dir.write(&unlearned_name(&ablation), &encode_store(&out.store), "unlearn")
}

pub fn ablate(config: &RunConfig, dir: &mut RunDir, ablation: Ablation) -> Result<()> {
    if ablation.is_none() {
        return Err(tagged("usage", "ablate needs --ablate <switch>"));
    }
    if !dir.has(&meta_name(&ablation)) {
        // Dropping a learner acts on the ensemble trained without switches.
        meta_train(config, dir, Ablation { drop_learner: None, ..ablation })?;
    }
    unlearn(config, dir, ablation)
}

/// Evaluated conditions: label and checkpoint, in report order.
fn conditions(dir: &RunDir) -> Vec<(String, String)> {
    let mut out = vec![
        ("RAW".to_owned(), RAW.to_owned()),
        ("Retrained".to_owned(), RETRAINED.to_owned()),
        ("Unlearned".to_owned(), "unlearned.ckpt".to_owned()),
    ];
    for name in dir.artifacts() {
        if let Some(switch) = name.strip_prefix("unlearned-").and_then(|s| s.strip_suffix(".ckpt")) {
            out.push((format!("Unlearned[{switch}]"), name.to_owned()));
        }
    }
    out.retain(|(_, ckpt)| dir.has(ckpt));
    out
}

fn eval_name(ckpt: &str) -> String {
    format!("eval-{}.csv", ckpt.trim_end_matches(".ckpt"))
}

fn merge(parts: &[EvalReport]) -> EvalReport {
    let mut all = EvalReport::default();
    for p in parts {
        all.rows.extend(p.rows.iter().cloned());
    }
    all
}

pub fn eval(config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let present = conditions(dir);
    if present.is_empty() {
        return Err(tagged(
            "missing-artifact",
            format!("no checkpoints to evaluate in {}; run `kgeu train-raw` first", dir.root().display()),
        ));
    }
    let data = load_data(dir)?;
    let mode = config.rank_mode()?;
    let mut parts = Vec::new();
    for (label, ckpt) in &present {
        let name = eval_name(ckpt);
        let report = if dir.has(&name) {
            EvalReport::from_csv(&dir.read_string(&name, "eval")?)?
        } else {
            let store = load_store(dir, ckpt, "train-raw")?;
            let mut report = EvalReport::default();
            for (split, triples) in [(Split::Test, &data.test), (Split::Forget, &data.split.forget)] {
                report.push(label.clone(), split, evaluate(&store, triples, data.full.members(), mode)?);
            }
            dir.write(&name, report.to_csv().as_bytes(), "eval")?;
            report
        };
        parts.push(report);
    }
    print!("{}", merge(&parts).to_table());
    Ok(())
}

pub fn report(_config: &RunConfig, dir: &mut RunDir) -> Result<()> {
    let mut parts = Vec::new();
    for (_, ckpt) in conditions(dir) {
        let name = eval_name(&ckpt);
        if dir.has(&name) {
            parts.push(EvalReport::from_csv(&dir.read_string(&name, "eval")?)?);
        }
    }
    if parts.is_empty() {
        return Err(tagged(
            "missing-artifact",
            format!("no evaluations in {}; run `kgeu eval` first", dir.root().display()),
        ));
    }
    let all = merge(&parts);
    let table = all.to_table();
    let mut text = String::new();
    writeln!(text, "run {} seed {}", &dir.manifest().config_hash[..12], dir.manifest().seed).ok();
    text.push_str(&table);
    dir.write(REPORT_CSV, all.to_csv().as_bytes(), "report")?;
    dir.write(REPORT_TXT, text.as_bytes(), "report")?;
    print!("{table}");
    Ok(())
}

/// Writes a synthetic graph as TSV, refusing to replace a different file.
pub fn synth(out: &Path, config: &SynthConfig) -> Result<()> {
    let graph = synthesize(config)?;
    let bytes = tsv(&graph, graph.triples());
    if out.exists() && fs::read(out).tag("io")? != bytes {
        return Err(tagged("exists", format!("{} exists with different content", out.display())));
    }
    fs::write(out, &bytes).tag("io")?;
    let entities: HashSet<usize> = graph.triples().iter().flat_map(|t| [t.head, t.tail]).collect();
    println!(
        "{}: {} triples over {} entities and {} relations",
        out.display(),
        graph.len(),
        entities.len(),
        graph.num_relations()
    );
    Ok(())
}
