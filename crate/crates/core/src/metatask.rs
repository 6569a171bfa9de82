//! Episodes for meta-training: small connected subgraphs whose entities are
//! treated as unseen, split into support and query triples.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{KnowledgeGraph, Triple};

/// Attempts per task before giving up.
pub const MAX_TASK_ATTEMPTS: usize = 32;

/// Probability that the walk jumps back to a random visited entity.
const TELEPORT: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskParams {
    pub n_entities: usize,
    pub max_triples: usize,
    /// Target share of a task's triples placed in the support set.
    pub support_fraction: f64,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            n_entities: 20,
            max_triples: 200,
            support_fraction: 0.7,
        }
    }
}

impl TaskParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_entities < 2 {
            return Err(Error::Config("tasks need at least 2 entities".into()));
        }
        if self.max_triples < self.n_entities {
            return Err(Error::Config(format!(
                "max_triples {} below n_entities {}",
                self.max_triples, self.n_entities
            )));
        }
        if !(self.support_fraction > 0.0 && self.support_fraction < 1.0) {
            return Err(Error::Config(format!(
                "support fraction {} not in (0, 1)",
                self.support_fraction
            )));
        }
        Ok(())
    }
}

/// One episode. Triples use task-local entity ids and global relation ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaTask {
    /// Local id → global entity id.
    pub entities: Vec<usize>,
    pub support: Vec<Triple>,
    pub query: Vec<Triple>,
}

impl MetaTask {
    pub fn num_entities(&self) -> usize {
        self.entities.len()
    }

    /// Global id → local id.
    pub fn local_index(&self) -> HashMap<usize, usize> {
        self.entities.iter().enumerate().map(|(l, &g)| (g, l)).collect()
    }

    pub fn to_global(&self, t: &Triple) -> Triple {
        Triple::new(self.entities[t.head], t.relation, self.entities[t.tail])
    }

    /// Relations appearing in the task.
    pub fn relations(&self) -> BTreeSet<usize> {
        self.support.iter().chain(&self.query).map(|t| t.relation).collect()
    }

    /// Partition and coverage invariants plus id ranges.
    pub fn check(&self, num_relations: usize) -> Result<()> {
        let n = self.num_entities();
        let distinct: HashSet<usize> = self.entities.iter().copied().collect();
        if distinct.len() != n {
            return Err(Error::Contract("task lists an entity twice".into()));
        }
        for t in self.support.iter().chain(&self.query) {
            if t.head >= n || t.tail >= n || t.relation >= num_relations {
                return Err(Error::Contract(format!("task triple ({t}) out of range")));
            }
        }
        let support: HashSet<Triple> = self.support.iter().copied().collect();
        if support.len() != self.support.len() || self.query.iter().any(|t| support.contains(t)) {
            return Err(Error::Contract("support and query overlap".into()));
        }
        if self.query.is_empty() {
            return Err(Error::Contract("task has an empty query set".into()));
        }
        let covered = endpoints(&self.support);
        if let Some(t) = self.query.iter().find(|t| !covered.contains(&t.head) || !covered.contains(&t.tail)) {
            return Err(Error::Contract(format!("query triple ({t}) lacks support coverage")));
        }
        if covered.len() != n {
            return Err(Error::Contract("task entity without support triples".into()));
        }
        Ok(())
    }

    /// Whether the task's triples connect all its entities, ignoring direction.
    pub fn is_connected(&self) -> bool {
        let n = self.num_entities();
        let mut adj = vec![Vec::new(); n];
        for t in self.support.iter().chain(&self.query) {
            adj[t.head].push(t.tail);
            adj[t.tail].push(t.head);
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &adj[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

fn endpoints(triples: &[Triple]) -> HashSet<usize> {
    triples.iter().flat_map(|t| [t.head, t.tail]).collect()
}

fn non_isolated(graph: &KnowledgeGraph) -> Vec<usize> {
    (0..graph.num_entities())
        .filter(|&e| !graph.neighbors(e).is_empty())
        .collect()
}

/// Samples one task with a seed entity drawn from all non-isolated entities.
pub fn sample_task<R: Rng + ?Sized>(graph: &KnowledgeGraph, params: &TaskParams, rng: &mut R) -> Result<MetaTask> {
    params.validate()?;
    sample_from_pool(graph, params, &non_isolated(graph), rng)
}

fn sample_from_pool<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    params: &TaskParams,
    pool: &[usize],
    rng: &mut R,
) -> Result<MetaTask> {
    if pool.is_empty() {
        return Err(Error::Sampling("no non-isolated seed entity".into()));
    }
    for _ in 0..MAX_TASK_ATTEMPTS {
        let seed = pool[rng.random_range(0..pool.len())];
        if let Some(task) = build_task(graph, params, seed, rng) {
            return Ok(task);
        }
    }
    Err(Error::Sampling(format!(
        "no task with a nonempty query set after {MAX_TASK_ATTEMPTS} attempts"
    )))
}

fn connecting_triple(graph: &KnowledgeGraph, a: usize, b: usize) -> Triple {
    graph
        .out_triples(a)
        .find(|t| t.tail == b)
        .or_else(|| graph.in_triples(a).find(|t| t.head == b))
        .expect("neighbors share a triple")
}

fn build_task<R: Rng + ?Sized>(
    graph: &KnowledgeGraph,
    params: &TaskParams,
    seed: usize,
    rng: &mut R,
) -> Option<MetaTask> {
    let n = params.n_entities;
    let mut visited = vec![seed];
    let mut local: HashMap<usize, usize> = HashMap::from([(seed, 0)]);
    let mut discovery = Vec::new();
    let mut current = seed;
    let mut stale = 0;
    for _ in 0..100 * n {
        if visited.len() >= n {
            break;
        }
        let nb = graph.neighbors(current);
        if nb.is_empty() || rng.random_bool(TELEPORT) {
            current = visited[rng.random_range(0..visited.len())];
        } else {
            let next = nb[rng.random_range(0..nb.len())];
            if let std::collections::hash_map::Entry::Vacant(slot) = local.entry(next) {
                slot.insert(visited.len());
                visited.push(next);
                discovery.push(connecting_triple(graph, current, next));
                stale = 0;
            }
            current = next;
        }
        stale += 1;
        if stale > 4 * n {
            let frontier_empty = visited
                .iter()
                .all(|&v| graph.neighbors(v).iter().all(|u| local.contains_key(u)));
            if frontier_empty {
                break;
            }
            stale = 0;
        }
    }
    if visited.len() < 2 {
        return None;
    }

    let tree: HashSet<Triple> = discovery.iter().copied().collect();
    let mut rest: Vec<Triple> = visited
        .iter()
        .flat_map(|&v| graph.out_triples(v))
        .filter(|t| local.contains_key(&t.tail) && !tree.contains(t))
        .collect();
    rest.shuffle(rng);
    let keep = params.max_triples.saturating_sub(discovery.len());
    let mut chosen: Vec<Triple> = discovery;
    chosen.extend(rest.into_iter().take(keep));
    let mut triples: Vec<Triple> = chosen
        .iter()
        .map(|t| Triple::new(local[&t.head], t.relation, local[&t.tail]))
        .collect();

    triples.shuffle(rng);
    let m = triples.len();
    let n_support = ((params.support_fraction * m as f64).round() as usize).clamp(1, m);
    let mut support: Vec<Triple> = triples[..n_support].to_vec();
    let mut covered = endpoints(&support);
    let mut query = Vec::new();
    for t in &triples[n_support..] {
        if covered.contains(&t.head) && covered.contains(&t.tail) {
            query.push(*t);
        } else {
            covered.extend([t.head, t.tail]);
            support.push(*t);
        }
    }
    if query.is_empty() {
        return None;
    }
    support.sort();
    query.sort();
    Some(MetaTask {
        entities: visited,
        support,
        query,
    })
}

/// Ordered training and validation episodes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskStream {
    pub train: Vec<MetaTask>,
    pub valid: Vec<MetaTask>,
    /// Seed entities available to training tasks.
    pub train_pool: Vec<usize>,
    /// Seed entities available to validation tasks, disjoint from `train_pool`.
    pub valid_pool: Vec<usize>,
}

/// Samples `train + valid` tasks. Task `i` uses its own ChaCha8 stream `i` under `seed`.
pub fn task_stream(
    graph: &KnowledgeGraph,
    train: usize,
    valid: usize,
    params: &TaskParams,
    seed: u64,
) -> Result<TaskStream> {
    params.validate()?;
    let mut pool = non_isolated(graph);
    let mut pool_rng = ChaCha8Rng::seed_from_u64(seed);
    pool_rng.set_stream(u64::MAX);
    pool.shuffle(&mut pool_rng);
    let total = train + valid;
    let n_valid = match valid {
        0 => 0,
        _ => ((pool.len() as f64 * valid as f64 / total as f64).round() as usize).max(1),
    };
    if n_valid > pool.len() || (train > 0 && n_valid == pool.len()) {
        return Err(Error::Config(format!(
            "{} non-isolated entities cannot form disjoint train and validation seed pools",
            pool.len()
        )));
    }
    let valid_pool = pool.split_off(pool.len() - n_valid);
    let train_pool = pool;

    let sample = |index: usize, pool: &[usize]| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(index as u64);
        sample_from_pool(graph, params, pool, &mut rng)
    };
    let train_tasks = (0..train)
        .into_par_iter()
        .map(|i| sample(i, &train_pool))
        .collect::<Result<Vec<_>>>()?;
    let valid_tasks = (0..valid)
        .into_par_iter()
        .map(|i| sample(train + i, &valid_pool))
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskStream {
        train: train_tasks,
        valid: valid_tasks,
        train_pool,
        valid_pool,
    })
}

/// One line per task: `task <i>`, then tab-separated `entities`, `support` and
/// `query` fields holding comma-separated global entity ids and graph triple indices.
pub fn dump_tasks(graph: &KnowledgeGraph, tasks: &[MetaTask]) -> Result<String> {
    let index: HashMap<Triple, usize> = graph.triples().iter().enumerate().map(|(i, t)| (*t, i)).collect();
    let mut out = String::new();
    for (i, task) in tasks.iter().enumerate() {
        let ids = |set: &[Triple]| -> Result<String> {
            let v = set
                .iter()
                .map(|t| {
                    let g = task.to_global(t);
                    index
                        .get(&g)
                        .map(|k| k.to_string())
                        .ok_or_else(|| Error::UnknownTriple(g.to_string()))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(v.join(","))
        };
        let entities: Vec<String> = task.entities.iter().map(|e| e.to_string()).collect();
        writeln!(
            out,
            "task {i}\tentities {}\tsupport {}\tquery {}",
            entities.join(","),
            ids(&task.support)?,
            ids(&task.query)?
        )
        .expect("write to string");
    }
    Ok(out)
}

/// Inverse of [`dump_tasks`].
pub fn parse_tasks(graph: &KnowledgeGraph, text: &str) -> Result<Vec<MetaTask>> {
    let mut tasks = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let bad = |what: &str| Error::Parse {
            path: "<task dump>".into(),
            line: lineno + 1,
            message: what.to_owned(),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 || !fields[0].starts_with("task ") {
            return Err(bad("expected 4 tab-separated fields"));
        }
        let list = |field: &str, key: &str| -> Result<Vec<usize>> {
            let body = field.strip_prefix(key).ok_or_else(|| bad(key))?.trim_start();
            if body.is_empty() {
                return Ok(Vec::new());
            }
            body.split(',').map(|s| s.parse().map_err(|_| bad("bad integer"))).collect()
        };
        let entities = list(fields[1], "entities")?;
        let local: HashMap<usize, usize> = entities.iter().enumerate().map(|(l, &g)| (g, l)).collect();
        let to_local = |ids: Vec<usize>| -> Result<Vec<Triple>> {
            ids.into_iter()
                .map(|k| {
                    let t = graph.triples().get(k).ok_or_else(|| bad("triple index out of range"))?;
                    match (local.get(&t.head), local.get(&t.tail)) {
                        (Some(&h), Some(&tl)) => Ok(Triple::new(h, t.relation, tl)),
                        _ => Err(bad("triple outside the task's entities")),
                    }
                })
                .collect()
        };
        let support = to_local(list(fields[2], "support")?)?;
        let query = to_local(list(fields[3], "query")?)?;
        tasks.push(MetaTask {
            entities,
            support,
            query,
        });
    }
    Ok(tasks)
}
