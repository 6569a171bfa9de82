//! `KGEU1` embedding checkpoints and vocabulary sidecars.
//!
//! Layout: the lines `KGEU1`, model kind (e.g. `TransE-L1`), `|E|`, `|R|`
//! and `d`, followed by the row-major little-endian `f64` values of `E`,
//! `R`, `R_out` and `R_in`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::graph::Vocab;
use crate::scalar::Scalar;

use super::{EmbeddingStore, ModelKind, NormKind, Scorer};

pub const MAGIC: &str = "KGEU1";

fn scorer_tag(s: Scorer) -> String {
    format!("{}-{}", s.kind, s.norm)
}

fn parse_scorer(tag: &str) -> Result<Scorer> {
    let (kind, norm) = tag
        .split_once('-')
        .ok_or_else(|| Error::Checkpoint(format!("bad model kind {tag:?}")))?;
    Ok(Scorer::new(kind.parse::<ModelKind>()?, norm.parse::<NormKind>()?))
}

pub fn encode_store<T: Scalar>(store: &EmbeddingStore<T>) -> Vec<u8> {
    let mut w = Writer::new(MAGIC);
    w.line(scorer_tag(store.scorer));
    w.line(store.num_entities());
    w.line(store.num_relations());
    w.line(store.dim());
    w.tensor(&store.entities);
    w.tensor(&store.relations);
    w.tensor(&store.rel_out);
    w.tensor(&store.rel_in);
    w.finish()
}

pub fn decode_store<T: Scalar>(bytes: &[u8]) -> Result<EmbeddingStore<T>> {
    let mut r = Reader::new(bytes, MAGIC)?;
    let scorer = parse_scorer(r.line()?)?;
    let n_e = r.number("entity count")?;
    let n_r = r.number("relation count")?;
    let d = r.number("dimension")?;
    let store = EmbeddingStore {
        scorer,
        entities: r.tensor(n_e, d)?,
        relations: r.tensor(n_r, d)?,
        rel_out: r.tensor(n_r, d)?,
        rel_in: r.tensor(n_r, d)?,
    };
    r.finish()?;
    store.check()?;
    Ok(store)
}

pub fn save_store<T: Scalar>(path: &Path, store: &EmbeddingStore<T>) -> Result<()> {
    fs::write(path, encode_store(store))?;
    Ok(())
}

pub fn load_store<T: Scalar>(path: &Path) -> Result<EmbeddingStore<T>> {
    decode_store(&fs::read(path)?)
}

/// Sidecar paths `<checkpoint>.entities.tsv` and `<checkpoint>.relations.tsv`.
pub fn sidecar_paths(checkpoint: &Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".entities.tsv"), with(".relations.tsv"))
}

/// Writes `index<TAB>name` lines.
pub fn save_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut text = String::new();
    for (i, name) in vocab.names().iter().enumerate() {
        text.push_str(&format!("{i}\t{name}\n"));
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn load_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path)?;
    let mut names = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let bad = |message: String| Error::Parse {
            path: path.to_owned(),
            line: i + 1,
            message,
        };
        let (idx, name) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected index<TAB>name".into()))?;
        if idx.parse::<usize>().ok() != Some(i) {
            return Err(bad(format!("index {idx:?} out of sequence")));
        }
        names.push(name.to_owned());
    }
    Vocab::from_names(names)
}

/// Saves the checkpoint together with both vocabulary sidecars.
pub fn save_store_with_vocab<T: Scalar>(
    path: &Path,
    store: &EmbeddingStore<T>,
    entities: &Vocab,
    relations: &Vocab,
) -> Result<()> {
    if entities.len() != store.num_entities() || relations.len() != store.num_relations() {
        return Err(Error::Contract(
            "vocabulary sizes do not match the embedding tables".into(),
        ));
    }
    save_store(path, store)?;
    let (e, r) = sidecar_paths(path);
    save_vocab(&e, entities)?;
    save_vocab(&r, relations)
}
