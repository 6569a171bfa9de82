//! Knowledge graph embedding models: TransE, DistMult, ComplEx and RotatE.
//!
//! Every scorer returns a plausibility where higher is better. ComplEx and
//! RotatE split an entity row of width `d` into real parts (first half) and
//! imaginary parts (second half). RotatE reads the first `d/2` coordinates of
//! a relation row as rotation phases; the remaining coordinates are unused and
//! stay at zero.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::Triple;
use crate::scalar::Scalar;
use crate::tensor::Tensor2;

pub mod checkpoint;
pub mod tape_score;
mod train;

pub use train::{
    margin_loss, margin_loss_grad, negative_sample, negative_sample_among, train_baseline, RowGrads, TrainConfig,
    TrainOutcome, MAX_NEGATIVE_RETRIES,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    TransE,
    DistMult,
    ComplEx,
    RotatE,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::TransE,
        ModelKind::DistMult,
        ModelKind::ComplEx,
        ModelKind::RotatE,
    ];

    pub fn is_complex(self) -> bool {
        matches!(self, ModelKind::ComplEx | ModelKind::RotatE)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TransE => "TransE",
            ModelKind::DistMult => "DistMult",
            ModelKind::ComplEx => "ComplEx",
            ModelKind::RotatE => "RotatE",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model kind {s:?}")))
    }
}

/// Distance norm used by TransE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum NormKind {
    #[default]
    L1,
    L2,
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L1" => Ok(NormKind::L1),
            "L2" => Ok(NormKind::L2),
            _ => Err(Error::Config(format!("unknown norm {s:?}"))),
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormKind::L1 => "L1",
            NormKind::L2 => "L2",
        })
    }
}

/// Scoring function: model kind plus the norm (only TransE uses it).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Scorer {
    pub kind: ModelKind,
    pub norm: NormKind,
}

impl Scorer {
    pub fn new(kind: ModelKind, norm: NormKind) -> Self {
        Self { kind, norm }
    }

    /// Score of one triple given its three embedding rows.
    pub fn score_rows<T: Scalar>(&self, h: &[T], r: &[T], t: &[T]) -> T {
        let d = h.len();
        match self.kind {
            ModelKind::TransE => {
                let diff = (0..d).map(|k| h[k] + r[k] - t[k]);
                match self.norm {
                    NormKind::L1 => -diff.map(T::abs).sum::<T>(),
                    NormKind::L2 => -diff.map(|x| x * x).sum::<T>().sqrt(),
                }
            }
            ModelKind::DistMult => (0..d).map(|k| h[k] * r[k] * t[k]).sum(),
            ModelKind::ComplEx => {
                let m = d / 2;
                (0..m)
                    .map(|k| {
                        let (a, b) = (h[k], h[m + k]);
                        let (c, e) = (r[k], r[m + k]);
                        let (f, g) = (t[k], t[m + k]);
                        a * c * f + b * c * g + a * e * g - b * e * f
                    })
                    .sum()
            }
            ModelKind::RotatE => {
                let m = d / 2;
                -(0..m)
                    .map(|k| {
                        let (a, b) = (h[k], h[m + k]);
                        let (s, c) = r[k].sin_cos();
                        let re = a * c - b * s - t[k];
                        let im = a * s + b * c - t[m + k];
                        re * re + im * im
                    })
                    .sum::<T>()
                    .sqrt()
            }
        }
    }

    /// Score and its analytic gradient with respect to the three rows.
    ///
    /// At the kinks of the L1/L2 norms the subgradient zero is used.
    pub fn score_grad<T: Scalar>(&self, h: &[T], r: &[T], t: &[T]) -> ScoreGrad<T> {
        let d = h.len();
        let zero = T::zero();
        let mut gh = vec![zero; d];
        let mut gr = vec![zero; d];
        let mut gt = vec![zero; d];
        let score = match self.kind {
            ModelKind::TransE => {
                let diff: Vec<T> = (0..d).map(|k| h[k] + r[k] - t[k]).collect();
                match self.norm {
                    NormKind::L1 => {
                        for k in 0..d {
                            let s = sign(diff[k]);
                            gh[k] = -s;
                            gr[k] = -s;
                            gt[k] = s;
                        }
                        -diff.iter().map(|x| x.abs()).sum::<T>()
                    }
                    NormKind::L2 => {
                        let n = diff.iter().map(|&x| x * x).sum::<T>().sqrt();
                        if n > zero {
                            for k in 0..d {
                                let g = diff[k] / n;
                                gh[k] = -g;
                                gr[k] = -g;
                                gt[k] = g;
                            }
                        }
                        -n
                    }
                }
            }
            ModelKind::DistMult => {
                for k in 0..d {
                    gh[k] = r[k] * t[k];
                    gr[k] = h[k] * t[k];
                    gt[k] = h[k] * r[k];
                }
                (0..d).map(|k| h[k] * r[k] * t[k]).sum()
            }
            ModelKind::ComplEx => {
                let m = d / 2;
                let mut s = zero;
                for k in 0..m {
                    let (a, b) = (h[k], h[m + k]);
                    let (c, e) = (r[k], r[m + k]);
                    let (f, g) = (t[k], t[m + k]);
                    s += a * c * f + b * c * g + a * e * g - b * e * f;
                    gh[k] = c * f + e * g;
                    gh[m + k] = c * g - e * f;
                    gr[k] = a * f + b * g;
                    gr[m + k] = a * g - b * f;
                    gt[k] = a * c - b * e;
                    gt[m + k] = a * e + b * c;
                }
                s
            }
            ModelKind::RotatE => {
                let m = d / 2;
                let mut rot = vec![(zero, zero); m];
                let mut diff = vec![(zero, zero); m];
                let mut sq = zero;
                for k in 0..m {
                    let (a, b) = (h[k], h[m + k]);
                    let (s, c) = r[k].sin_cos();
                    rot[k] = (a * c - b * s, a * s + b * c);
                    diff[k] = (rot[k].0 - t[k], rot[k].1 - t[m + k]);
                    sq += diff[k].0 * diff[k].0 + diff[k].1 * diff[k].1;
                }
                let n = sq.sqrt();
                if n > zero {
                    for k in 0..m {
                        let (s, c) = r[k].sin_cos();
                        // derivative of -n with respect to the rotated point
                        let u = -diff[k].0 / n;
                        let v = -diff[k].1 / n;
                        gh[k] = u * c + v * s;
                        gh[m + k] = -u * s + v * c;
                        gr[k] = -u * rot[k].1 + v * rot[k].0;
                        gt[k] = -u;
                        gt[m + k] = -v;
                    }
                }
                -n
            }
        };
        ScoreGrad {
            score,
            head: gh,
            relation: gr,
            tail: gt,
        }
    }
}

#[inline]
fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoreGrad<T> {
    pub score: T,
    pub head: Vec<T>,
    pub relation: Vec<T>,
    pub tail: Vec<T>,
}

/// Entity and relation embedding tables of one trained model.
///
/// `relations` is the scoring table. `rel_out` and `rel_in` only seed the
/// relation-aware initialization of unseen entities.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore<T> {
    pub scorer: Scorer,
    pub entities: Tensor2<T>,
    pub relations: Tensor2<T>,
    pub rel_out: Tensor2<T>,
    pub rel_in: Tensor2<T>,
}

impl<T: Scalar> EmbeddingStore<T> {
    /// Uniform initialization in `[-bound, bound)`; RotatE phases uniform in `[-π, π)`.
    pub fn random<R: Rng + ?Sized>(
        scorer: Scorer,
        num_entities: usize,
        num_relations: usize,
        dim: usize,
        bound: T,
        rng: &mut R,
    ) -> Result<Self> {
        check_dim(scorer.kind, dim)?;
        let entities = Tensor2::random_uniform(num_entities, dim, bound, rng);
        let mut relations = Tensor2::random_uniform(num_relations, dim, bound, rng);
        if scorer.kind == ModelKind::RotatE {
            let m = dim / 2;
            for i in 0..num_relations {
                let row = relations.row_mut(i);
                for (k, v) in row.iter_mut().enumerate() {
                    *v = if k < m {
                        T::lit(rng.random_range(-PI..PI))
                    } else {
                        T::zero()
                    };
                }
            }
        }
        let rel_out = Tensor2::random_uniform(num_relations, dim, bound, rng);
        let rel_in = Tensor2::random_uniform(num_relations, dim, bound, rng);
        Ok(Self {
            scorer,
            entities,
            relations,
            rel_out,
            rel_in,
        })
    }

    pub fn dim(&self) -> usize {
        self.entities.cols()
    }

    pub fn num_entities(&self) -> usize {
        self.entities.rows()
    }

    pub fn num_relations(&self) -> usize {
        self.relations.rows()
    }

    pub fn check(&self) -> Result<()> {
        check_dim(self.scorer.kind, self.dim())?;
        let d = self.dim();
        for (name, t) in [
            ("relations", &self.relations),
            ("rel_out", &self.rel_out),
            ("rel_in", &self.rel_in),
        ] {
            if t.cols() != d || t.rows() != self.num_relations() {
                return Err(Error::dim("store", format!("{name} is {:?}", t.shape())));
            }
        }
        if !(self.entities.is_finite()
            && self.relations.is_finite()
            && self.rel_out.is_finite()
            && self.rel_in.is_finite())
        {
            return Err(Error::Contract("non-finite embedding value".into()));
        }
        Ok(())
    }

    fn check_triple(&self, t: &Triple) -> Result<()> {
        for (what, index, size) in [
            ("entity", t.head, self.num_entities()),
            ("relation", t.relation, self.num_relations()),
            ("entity", t.tail, self.num_entities()),
        ] {
            if index >= size {
                return Err(Error::Index { what, index, size });
            }
        }
        Ok(())
    }

    pub fn score(&self, t: &Triple) -> Result<T> {
        self.check_triple(t)?;
        Ok(self.score_unchecked(t))
    }

    #[inline]
    pub(crate) fn score_unchecked(&self, t: &Triple) -> T {
        self.scorer.score_rows(
            self.entities.row(t.head),
            self.relations.row(t.relation),
            self.entities.row(t.tail),
        )
    }

    /// Sets `rel_out[r]` (`rel_in[r]`) to the mean embedding of the heads (tails) of relation `r`.
    ///
    /// Relations without triples keep their current rows.
    pub fn set_relation_centroids(&mut self, triples: &[Triple]) {
        let d = self.dim();
        let n_r = self.num_relations();
        let mut out = Tensor2::<T>::zeros(n_r, d);
        let mut inn = Tensor2::<T>::zeros(n_r, d);
        let mut counts = vec![0usize; n_r];
        for t in triples {
            counts[t.relation] += 1;
            for (o, &v) in out.row_mut(t.relation).iter_mut().zip(self.entities.row(t.head)) {
                *o += v;
            }
            for (o, &v) in inn.row_mut(t.relation).iter_mut().zip(self.entities.row(t.tail)) {
                *o += v;
            }
        }
        for (r, &c) in counts.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let n = T::from_usize_lossy(c);
            for k in 0..d {
                self.rel_out.set(r, k, out.get(r, k) / n);
                self.rel_in.set(r, k, inn.get(r, k) / n);
            }
        }
    }

    /// Wraps RotatE phases into `[-π, π)`.
    pub(crate) fn wrap_phases(&mut self) {
        if self.scorer.kind != ModelKind::RotatE {
            return;
        }
        let m = self.dim() / 2;
        for i in 0..self.num_relations() {
            for v in &mut self.relations.row_mut(i)[..m] {
                *v = wrap_phase(*v);
            }
        }
    }
}

pub(crate) fn wrap_phase<T: Scalar>(x: T) -> T {
    let pi = T::lit(PI);
    let two_pi = pi + pi;
    let mut y = x - two_pi * ((x + pi) / two_pi).floor();
    if y >= pi {
        y -= two_pi;
    }
    y
}

fn check_dim(kind: ModelKind, dim: usize) -> Result<()> {
    if dim == 0 || (kind.is_complex() && dim % 2 != 0) {
        return Err(Error::Config(format!(
            "embedding dimension {dim} is invalid for {kind}"
        )));
    }
    Ok(())
}
