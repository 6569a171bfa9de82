//! Unlearning leaves every row outside the forget set's endpoints untouched.

use std::collections::BTreeSet;

use kgeu::graph::{split_forget, ForgetSpec, ForgetSplit};
use kgeu::kge::{train_baseline, TrainConfig};
use kgeu::metaeu::{meta_train, unlearn, MetaTrainConfig, UnlearnConfig};
use kgeu::synth::{synthesize, SynthConfig};
use kgeu::{task_stream, Ablation, EmbeddingStore, MetaModel, ModelKind, NormKind, Scorer, TaskParams};

use crate::{Check, Fallible};

fn same_bits(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Entity rows that differ bitwise, plus whether any relation table changed.
fn changed(a: &EmbeddingStore<f64>, b: &EmbeddingStore<f64>) -> (BTreeSet<usize>, bool) {
    let rows = (0..a.num_entities())
        .filter(|&e| !same_bits(a.entities.row(e), b.entities.row(e)))
        .collect();
    let tables = !same_bits(a.relations.data(), b.relations.data())
        || !same_bits(a.rel_out.data(), b.rel_out.data())
        || !same_bits(a.rel_in.data(), b.rel_in.data());
    (rows, tables)
}

pub fn criterion() -> Fallible<Check> {
    let graph = synthesize(&SynthConfig {
        entities: 30,
        relations: 3,
        seed: 5,
        ..Default::default()
    })?;
    let scorer = Scorer::new(ModelKind::TransE, NormKind::L1);
    let raw = train_baseline(&graph, scorer, &TrainConfig { dim: 8, epochs: 30, seed: 5, ..Default::default() })?.store;
    let params = TaskParams {
        n_entities: 8,
        max_triples: 40,
        support_fraction: 0.7,
    };
    let stream = task_stream(&graph, 20, 0, &params, 5)?;
    let model = meta_train(
        &raw,
        graph.members(),
        &stream.train,
        &[],
        MetaModel::new(&raw, 2, 2, 5)?,
        &MetaTrainConfig { epochs: 1, seed: 5, ..Default::default() },
    )?
    .model;
    let config = UnlearnConfig {
        steps: 3,
        steps5: 3,
        seed: 5,
        ..Default::default()
    };
    let none = Ablation::none();

    let empty = unlearn(&graph, &raw, &ForgetSplit::empty(&graph), &model, &none, &config)?;
    let (rows, tables) = changed(&raw, &empty.store);
    let identity = rows.is_empty() && !tables && empty.store == raw;

    let mut splits: Vec<ForgetSplit> = graph
        .triples()
        .iter()
        .map(|t| split_forget(&graph, &ForgetSpec::Explicit(vec![*t]), 0))
        .collect::<kgeu::Result<_>>()?;
    splits.push(split_forget(&graph, &ForgetSpec::Fraction(0.1), 5)?);
    let mut violations = 0usize;
    let mut moved = 0usize;
    for split in &splits {
        let out = unlearn(&graph, &raw, split, &model, &none, &config)?;
        let incident: BTreeSet<usize> = split.forget.iter().flat_map(|t| [t.head, t.tail]).collect();
        let (rows, tables) = changed(&raw, &out.store);
        if tables || !rows.is_subset(&incident) || out.affected.iter().copied().collect::<BTreeSet<_>>() != incident {
            violations += 1;
        }
        moved += !rows.is_empty() as usize;
    }
    Ok(Check::new(
        identity && violations == 0 && moved == splits.len(),
        format!(
            "empty forget set identical: {identity}; {} forget sets ({} single triples + 1 random), {violations} locality violations, {moved} changed some incident row",
            splits.len(),
            splits.len() - 1
        ),
    ))
}
