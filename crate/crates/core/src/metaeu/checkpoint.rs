//! `MEU1` checkpoints of a meta-trained generator.
//!
//! Layout: the lines `MEU1`, `N`, `L`, `d` and `|R|`, followed by little-endian
//! `f64` values of the `N` ensemble weights, then per learner its message
//! weights (layer-major over `2|R|` slots), self-loop weights and integrator,
//! then `R_out` and `R_in`.

use std::fs;
use std::path::Path;

use super::ensemble::{Ensemble, MetaModel};
use super::learner::BaseLearner;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &str = "MEU1";

pub fn encode_model<T: Scalar>(model: &MetaModel<T>) -> Vec<u8> {
    let first = &model.ensemble.learners[0];
    let mut w = Writer::new(MAGIC);
    w.line(model.ensemble.len());
    w.line(first.layers());
    w.line(first.dim());
    w.line(first.num_relations());
    w.values(&model.ensemble.weights);
    for learner in &model.ensemble.learners {
        for m in learner.params() {
            w.tensor(m);
        }
    }
    w.tensor(&model.rel_out);
    w.tensor(&model.rel_in);
    w.finish()
}

pub fn decode_model<T: Scalar>(bytes: &[u8]) -> Result<MetaModel<T>> {
    let mut r = Reader::new(bytes, MAGIC)?;
    let n = r.number("learner count")?;
    let layers = r.number("layer count")?;
    let d = r.number("dimension")?;
    let n_r = r.number("relation count")?;
    if n == 0 {
        return Err(Error::Checkpoint("ensemble without learners".into()));
    }
    let weights = r.values(n)?;
    let mut learners = Vec::with_capacity(n);
    for _ in 0..n {
        let relation = (0..layers * 2 * n_r)
            .map(|_| r.tensor(d, d))
            .collect::<Result<Vec<_>>>()?;
        let self_loop = (0..layers).map(|_| r.tensor(d, d)).collect::<Result<Vec<_>>>()?;
        let hei = r.tensor(d, (layers + 1) * d)?;
        learners.push(BaseLearner::from_parts(d, n_r, relation, self_loop, hei)?);
    }
    let model = MetaModel {
        ensemble: Ensemble { learners, weights },
        rel_out: r.tensor(n_r, d)?,
        rel_in: r.tensor(n_r, d)?,
    };
    r.finish()?;
    model
        .check()
        .map_err(|e| Error::Checkpoint(format!("inconsistent generator: {e}")))?;
    Ok(model)
}

pub fn save_model<T: Scalar>(path: &Path, model: &MetaModel<T>) -> Result<()> {
    fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<MetaModel<T>> {
    decode_model(&fs::read(path)?)
}
