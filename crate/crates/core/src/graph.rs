//! Multi-relational graph store, TSV ingestion and forget/retain partitioning.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// A `(head, relation, tail)` fact over dense entity and relation indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
}

impl Triple {
    pub const fn new(head: usize, relation: usize, tail: usize) -> Self {
        Self {
            head,
            relation,
            tail,
        }
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.head, self.relation, self.tail)
    }
}

/// Ordered string vocabulary; indices follow first appearance.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    /// Vocabulary of anonymous names `"0", "1", …`.
    pub fn numbered(n: usize) -> Self {
        let mut v = Self::new();
        for i in 0..n {
            v.intern(&i.to_string());
        }
        v
    }

    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut v = Self::new();
        for name in names {
            let name = name.as_ref();
            if v.index.contains_key(name) {
                return Err(Error::Config(format!("duplicate vocabulary entry {name:?}")));
            }
            v.intern(name);
        }
        Ok(v)
    }

    pub fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_owned());
        self.index.insert(name.to_owned(), i);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

type Adjacency = Vec<BTreeMap<usize, Vec<usize>>>;

/// Immutable directed multi-relational graph with in/out adjacency indices.
#[derive(Clone, Debug)]
pub struct KnowledgeGraph {
    entities: Arc<Vocab>,
    relations: Arc<Vocab>,
    triples: Vec<Triple>,
    members: HashSet<Triple>,
    out_adj: Adjacency,
    in_adj: Adjacency,
    neighbors: Vec<Vec<usize>>,
}

impl PartialEq for KnowledgeGraph {
    fn eq(&self, other: &Self) -> bool {
        self.entities == other.entities
            && self.relations == other.relations
            && self.triples == other.triples
    }
}

/// Result of reading a triple file.
#[derive(Clone, Debug)]
pub struct Ingested {
    pub graph: KnowledgeGraph,
    /// Number of duplicate lines dropped.
    pub duplicates: usize,
}

impl KnowledgeGraph {
    /// Builds a graph over fixed vocabularies. Duplicate triples are dropped and counted.
    pub fn new(
        entities: Arc<Vocab>,
        relations: Arc<Vocab>,
        triples: impl IntoIterator<Item = Triple>,
    ) -> Result<(Self, usize)> {
        let (n_e, n_r) = (entities.len(), relations.len());
        let mut members = HashSet::new();
        let mut kept = Vec::new();
        let mut duplicates = 0;
        for t in triples {
            if t.head >= n_e || t.tail >= n_e {
                return Err(Error::Index {
                    what: "entity",
                    index: t.head.max(t.tail),
                    size: n_e,
                });
            }
            if t.relation >= n_r {
                return Err(Error::Index {
                    what: "relation",
                    index: t.relation,
                    size: n_r,
                });
            }
            if members.insert(t) {
                kept.push(t);
            } else {
                duplicates += 1;
            }
        }
        let mut out_adj: Adjacency = vec![BTreeMap::new(); n_e];
        let mut in_adj: Adjacency = vec![BTreeMap::new(); n_e];
        let mut neighbors: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n_e];
        for t in &kept {
            out_adj[t.head].entry(t.relation).or_default().push(t.tail);
            in_adj[t.tail].entry(t.relation).or_default().push(t.head);
            if t.head != t.tail {
                neighbors[t.head].insert(t.tail);
                neighbors[t.tail].insert(t.head);
            }
        }
        Ok((
            Self {
                entities,
                relations,
                triples: kept,
                members,
                out_adj,
                in_adj,
                neighbors: neighbors.into_iter().map(|s| s.into_iter().collect()).collect(),
            },
            duplicates,
        ))
    }

    /// Graph over anonymous vocabularies of the given sizes.
    pub fn from_indexed(
        num_entities: usize,
        num_relations: usize,
        triples: impl IntoIterator<Item = Triple>,
    ) -> Result<Self> {
        Ok(Self::new(
            Arc::new(Vocab::numbered(num_entities)),
            Arc::new(Vocab::numbered(num_relations)),
            triples,
        )?
        .0)
    }

    /// Interns names in first-appearance order (head, relation, tail per line).
    pub fn from_named<'a, I>(rows: I) -> Result<Ingested>
    where
        I: IntoIterator<Item = (&'a str, &'a str, &'a str)>,
    {
        let mut entities = Vocab::new();
        let mut relations = Vocab::new();
        let mut triples = Vec::new();
        for (h, r, t) in rows {
            let h = entities.intern(h);
            let r = relations.intern(r);
            let t = entities.intern(t);
            triples.push(Triple::new(h, r, t));
        }
        let (graph, duplicates) = Self::new(Arc::new(entities), Arc::new(relations), triples)?;
        Ok(Ingested { graph, duplicates })
    }

    /// Graph over the same vocabularies restricted to `triples`.
    pub fn with_triples(&self, triples: impl IntoIterator<Item = Triple>) -> Result<Self> {
        Ok(Self::new(self.entities.clone(), self.relations.clone(), triples)?.0)
    }

    pub fn entities(&self) -> &Vocab {
        &self.entities
    }

    pub fn relations(&self) -> &Vocab {
        &self.relations
    }

    pub fn shared_entities(&self) -> Arc<Vocab> {
        self.entities.clone()
    }

    pub fn shared_relations(&self) -> Arc<Vocab> {
        self.relations.clone()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, t: &Triple) -> bool {
        self.members.contains(t)
    }

    pub fn members(&self) -> &HashSet<Triple> {
        &self.members
    }

    fn check_entity(&self, e: usize) -> Result<()> {
        if e >= self.num_entities() {
            return Err(Error::Index {
                what: "entity",
                index: e,
                size: self.num_entities(),
            });
        }
        Ok(())
    }

    /// Outgoing and ingoing relation sets `(O(e), I(e))`.
    pub fn relation_context(&self, e: usize) -> Result<(BTreeSet<usize>, BTreeSet<usize>)> {
        self.check_entity(e)?;
        Ok((
            self.out_adj[e].keys().copied().collect(),
            self.in_adj[e].keys().copied().collect(),
        ))
    }

    /// Tails `x` with `(e, r, x)` in the graph.
    pub fn out_neighbors(&self, e: usize, r: usize) -> &[usize] {
        self.out_adj[e].get(&r).map_or(&[], Vec::as_slice)
    }

    /// Heads `x` with `(x, r, e)` in the graph.
    pub fn in_neighbors(&self, e: usize, r: usize) -> &[usize] {
        self.in_adj[e].get(&r).map_or(&[], Vec::as_slice)
    }

    /// Distinct entities adjacent to `e` in either direction, ascending.
    pub fn neighbors(&self, e: usize) -> &[usize] {
        &self.neighbors[e]
    }

    /// Triples with head `e`, ordered by relation.
    pub fn out_triples(&self, e: usize) -> impl Iterator<Item = Triple> + '_ {
        self.out_adj[e]
            .iter()
            .flat_map(move |(&r, tails)| tails.iter().map(move |&t| Triple::new(e, r, t)))
    }

    /// Triples with tail `e`, ordered by relation.
    pub fn in_triples(&self, e: usize) -> impl Iterator<Item = Triple> + '_ {
        self.in_adj[e]
            .iter()
            .flat_map(move |(&r, heads)| heads.iter().map(move |&h| Triple::new(h, r, e)))
    }

    pub fn degree(&self, e: usize) -> usize {
        self.out_adj[e].values().map(Vec::len).sum::<usize>()
            + self.in_adj[e].values().map(Vec::len).sum::<usize>()
    }

    /// Triples incident to `e`, in graph order.
    pub fn incident(&self, e: usize) -> impl Iterator<Item = &Triple> + '_ {
        self.triples
            .iter()
            .filter(move |t| t.head == e || t.tail == e)
    }

    pub fn display_triple(&self, t: &Triple) -> String {
        format!(
            "{}\t{}\t{}",
            self.entities.name(t.head),
            self.relations.name(t.relation),
            self.entities.name(t.tail)
        )
    }
}

/// Reads `head<TAB>relation<TAB>tail` lines. Blank lines are skipped.
pub fn read_tsv(path: &Path) -> Result<Vec<(String, String, String)>> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_owned(),
                line: i + 1,
                message: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        rows.push((fields[0].to_owned(), fields[1].to_owned(), fields[2].to_owned()));
    }
    Ok(rows)
}

/// Loads a TSV triple file into a fresh graph.
pub fn load_triples(path: &Path) -> Result<Ingested> {
    let rows = read_tsv(path)?;
    if rows.is_empty() {
        return Err(Error::EmptyGraph(path.display().to_string()));
    }
    KnowledgeGraph::from_named(rows.iter().map(|(h, r, t)| (h.as_str(), r.as_str(), t.as_str())))
}

/// Writes triples as TSV using the graph's vocabularies.
pub fn write_triples(path: &Path, graph: &KnowledgeGraph, triples: &[Triple]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    for t in triples {
        writeln!(out, "{}", graph.display_triple(t))?;
    }
    out.flush()?;
    Ok(())
}

/// Resolves named triples against the graph's vocabularies.
pub fn resolve_named(
    graph: &KnowledgeGraph,
    rows: &[(String, String, String)],
) -> Result<Vec<Triple>> {
    rows.iter()
        .map(|(h, r, t)| {
            let lookup = |v: &Vocab, name: &str| {
                v.get(name)
                    .ok_or_else(|| Error::UnknownTriple(format!("{h}\t{r}\t{t}")))
            };
            Ok(Triple::new(
                lookup(graph.entities(), h)?,
                lookup(graph.relations(), r)?,
                lookup(graph.entities(), t)?,
            ))
        })
        .collect()
}

/// Partition of a graph's triples into a forget set and a retain set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ForgetSplit {
    pub forget: Vec<Triple>,
    pub retain: Vec<Triple>,
}

impl ForgetSplit {
    /// No triples to forget.
    pub fn empty(graph: &KnowledgeGraph) -> Self {
        Self {
            forget: Vec::new(),
            retain: graph.triples().to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ForgetSpec {
    Fraction(f64),
    Explicit(Vec<Triple>),
}

/// Splits `graph` into forget and retain sets. Both keep graph order.
pub fn split_forget(graph: &KnowledgeGraph, spec: &ForgetSpec, seed: u64) -> Result<ForgetSplit> {
    let chosen: HashSet<Triple> = match spec {
        ForgetSpec::Fraction(p) => {
            if !(*p > 0.0 && *p < 1.0) {
                return Err(Error::Config(format!("forget fraction {p} not in (0, 1)")));
            }
            let k = (p * graph.len() as f64).round() as usize;
            let mut order: Vec<usize> = (0..graph.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            order[..k].iter().map(|&i| graph.triples()[i]).collect()
        }
        ForgetSpec::Explicit(list) => {
            if let Some(bad) = list.iter().find(|t| !graph.contains(t)) {
                return Err(Error::UnknownTriple(bad.to_string()));
            }
            list.iter().copied().collect()
        }
    };
    let (forget, retain) = graph.triples().iter().partition(|t| chosen.contains(t));
    Ok(ForgetSplit { forget, retain })
}
