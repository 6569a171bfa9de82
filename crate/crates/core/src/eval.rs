//! Link-prediction ranking, MRR / Hits@n and the comparison report.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::Triple;
use crate::kge::EmbeddingStore;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Head,
    Tail,
}

/// Whether other known true triples are removed from the candidate list.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum RankMode {
    #[default]
    Filtered,
    Raw,
}

impl FromStr for RankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filtered" => Ok(RankMode::Filtered),
            "raw" => Ok(RankMode::Raw),
            _ => Err(Error::Config(format!("unknown ranking mode {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RankResult {
    pub triple: Triple,
    pub side: Side,
    /// 1-based rank, in `1..=|E|`.
    pub rank: usize,
}

fn replace(t: &Triple, side: Side, e: usize) -> Triple {
    match side {
        Side::Head => Triple::new(e, t.relation, t.tail),
        Side::Tail => Triple::new(t.head, t.relation, e),
    }
}

/// Ranks the true entity of `triple` on `side` against every replacement.
///
/// Ties count half: `rank = 1 + higher + ⌈ties / 2⌉`.
pub fn rank_query<T: Scalar>(
    store: &EmbeddingStore<T>,
    triple: &Triple,
    side: Side,
    known: &HashSet<Triple>,
    mode: RankMode,
) -> Result<RankResult> {
    let truth = store.score(triple)?;
    let target = match side {
        Side::Head => triple.head,
        Side::Tail => triple.tail,
    };
    let mut higher = 0usize;
    let mut ties = 0usize;
    for e in 0..store.num_entities() {
        if e == target {
            continue;
        }
        let candidate = replace(triple, side, e);
        if mode == RankMode::Filtered && known.contains(&candidate) {
            continue;
        }
        let s = store.score_unchecked(&candidate);
        if s > truth {
            higher += 1;
        } else if s == truth {
            ties += 1;
        }
    }
    Ok(RankResult {
        triple: *triple,
        side,
        rank: 1 + higher + ties.div_ceil(2),
    })
}

pub fn mrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("MRR of an empty rank list".into()));
    }
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn hits_at(ranks: &[usize], n: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::Contract("Hits@n of an empty rank list".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mrr: f64,
    pub hits1: f64,
    pub hits5: f64,
    pub hits10: f64,
    pub count: usize,
}

impl Metrics {
    pub fn from_ranks(ranks: &[usize]) -> Result<Self> {
        Ok(Self {
            mrr: mrr(ranks)?,
            hits1: hits_at(ranks, 1)?,
            hits5: hits_at(ranks, 5)?,
            hits10: hits_at(ranks, 10)?,
            count: ranks.len(),
        })
    }

    /// `(name, value)` pairs in report order.
    pub fn named(&self) -> [(&'static str, f64); 4] {
        [
            ("MRR", self.mrr),
            ("Hits@1", self.hits1),
            ("Hits@5", self.hits5),
            ("Hits@10", self.hits10),
        ]
    }

    /// Range and ordering invariants: values in `[0,1]`, Hits monotone in n, MRR ≥ Hits@1.
    pub fn is_consistent(&self) -> bool {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        self.named().iter().all(|(_, v)| unit(*v))
            && self.hits1 <= self.hits5
            && self.hits5 <= self.hits10
            && self.mrr >= self.hits1
    }
}

/// Head and tail ranks for every triple, in input order.
pub fn rank_all<T: Scalar>(
    store: &EmbeddingStore<T>,
    triples: &[Triple],
    known: &HashSet<Triple>,
    mode: RankMode,
) -> Result<Vec<RankResult>> {
    let per_triple: Vec<Result<[RankResult; 2]>> = triples
        .par_iter()
        .map(|t| {
            Ok([
                rank_query(store, t, Side::Head, known, mode)?,
                rank_query(store, t, Side::Tail, known, mode)?,
            ])
        })
        .collect();
    let mut out = Vec::with_capacity(2 * triples.len());
    for pair in per_triple {
        out.extend(pair?);
    }
    Ok(out)
}

/// Metrics over both-sided queries of `triples`.
pub fn evaluate<T: Scalar>(
    store: &EmbeddingStore<T>,
    triples: &[Triple],
    known: &HashSet<Triple>,
    mode: RankMode,
) -> Result<Metrics> {
    if triples.is_empty() {
        return Err(Error::Contract("evaluation split is empty".into()));
    }
    let ranks: Vec<usize> = rank_all(store, triples, known, mode)?
        .iter()
        .map(|r| r.rank)
        .collect();
    Metrics::from_ranks(&ranks)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Test,
    Forget,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Test => "test",
            Split::Forget => "forget",
        }
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "test" => Ok(Split::Test),
            "forget" => Ok(Split::Forget),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub condition: String,
    pub split: Split,
    pub metrics: Metrics,
}

/// Metrics per condition (RAW, Retrained, Unlearned, ablations) and split.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

pub const CSV_HEADER: &str = "condition,split,metric,value,count";

impl EvalReport {
    pub fn push(&mut self, condition: impl Into<String>, split: Split, metrics: Metrics) {
        self.rows.push(ReportRow {
            condition: condition.into(),
            split,
            metrics,
        });
    }

    pub fn get(&self, condition: &str, split: Split) -> Option<&Metrics> {
        self.rows
            .iter()
            .find(|r| r.condition == condition && r.split == split)
            .map(|r| &r.metrics)
    }

    /// Conditions in first-appearance order.
    pub fn conditions(&self) -> Vec<&str> {
        let mut seen: Vec<&str> = Vec::new();
        for r in &self.rows {
            if !seen.contains(&r.condition.as_str()) {
                seen.push(&r.condition);
            }
        }
        seen
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            for (name, value) in row.metrics.named() {
                writeln!(
                    out,
                    "{},{},{},{},{}",
                    row.condition, row.split, name, value, row.metrics.count
                )
                .expect("write to string");
            }
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some(CSV_HEADER) {
            return Err(Error::Config("report CSV has an unexpected header".into()));
        }
        let mut report = EvalReport::default();
        let mut pending: Vec<(String, Split, usize, [Option<f64>; 4])> = Vec::new();
        for (i, line) in lines.enumerate() {
            let bad = || Error::Config(format!("report CSV line {}: {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let split: Split = f[1].parse()?;
            let value: f64 = f[3].parse().map_err(|_| bad())?;
            let count: usize = f[4].parse().map_err(|_| bad())?;
            let slot = ["MRR", "Hits@1", "Hits@5", "Hits@10"]
                .iter()
                .position(|m| *m == f[2])
                .ok_or_else(bad)?;
            let idx = match pending.iter().position(|p| p.0 == f[0] && p.1 == split) {
                Some(i) => i,
                None => {
                    pending.push((f[0].to_owned(), split, count, [None; 4]));
                    pending.len() - 1
                }
            };
            pending[idx].3[slot] = Some(value);
        }
        for (condition, split, count, v) in pending {
            let get = |k: usize| {
                v[k].ok_or_else(|| Error::Config(format!("missing metric for {condition}/{split}")))
            };
            let metrics = Metrics {
                mrr: get(0)?,
                hits1: get(1)?,
                hits5: get(2)?,
                hits10: get(3)?,
                count,
            };
            report.push(condition, split, metrics);
        }
        Ok(report)
    }

    /// Aligned text table: one block per condition, metrics as rows, splits as columns.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self
            .conditions()
            .iter()
            .map(|c| c.len())
            .max()
            .unwrap_or(0)
            .max(10);
        writeln!(out, "{:<width$}  {:>8}  {:>8}", "", "Test", "Forget").ok();
        for cond in self.conditions() {
            writeln!(out, "{cond}").ok();
            let test = self.get(cond, Split::Test);
            let forget = self.get(cond, Split::Forget);
            for (k, name) in ["MRR", "Hits@1", "Hits@5", "Hits@10"].iter().enumerate() {
                let cell = |m: Option<&Metrics>| {
                    m.map_or_else(|| "-".to_owned(), |m| format!("{:.4}", m.named()[k].1))
                };
                writeln!(
                    out,
                    "  {:<w$}  {:>8}  {:>8}",
                    name,
                    cell(test),
                    cell(forget),
                    w = width - 2
                )
                .ok();
            }
        }
        out
    }
}
