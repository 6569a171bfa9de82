//! Scorers and the margin loss expressed as differentiable tape programs.
//!
//! Row `i` of the head, relation and tail operands forms one triple; the
//! result is a column of scores matching [`Scorer::score_rows`].

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

use super::{ModelKind, NormKind, Scorer};

/// `m × 1` scores for `m` stacked `(h, r, t)` rows.
pub fn score<T: Scalar>(tape: &mut Tape<T>, scorer: Scorer, h: Var, r: Var, t: Var) -> Result<Var> {
    let d = tape.value(h).cols();
    match scorer.kind {
        ModelKind::TransE => {
            let hr = tape.add(h, r)?;
            let diff = tape.sub(hr, t)?;
            let dist = match scorer.norm {
                NormKind::L1 => tape.row_l1(diff),
                NormKind::L2 => tape.row_l2(diff),
            };
            Ok(tape.scale(dist, -T::one()))
        }
        ModelKind::DistMult => {
            let hr = tape.mul(h, r)?;
            let hrt = tape.mul(hr, t)?;
            Ok(tape.row_sum(hrt))
        }
        ModelKind::ComplEx => {
            let m = half(d)?;
            let (a, b) = split(tape, h, m)?;
            let (c, e) = split(tape, r, m)?;
            let (f, g) = split(tape, t, m)?;
            // Re(<h, r, conj(t)>) = Σ acf + bcg + aeg − bef
            let ac = tape.mul(a, c)?;
            let acf = tape.mul(ac, f)?;
            let bc = tape.mul(b, c)?;
            let bcg = tape.mul(bc, g)?;
            let ae = tape.mul(a, e)?;
            let aeg = tape.mul(ae, g)?;
            let be = tape.mul(b, e)?;
            let bef = tape.mul(be, f)?;
            let s1 = tape.add(acf, bcg)?;
            let s2 = tape.add(s1, aeg)?;
            let s3 = tape.sub(s2, bef)?;
            Ok(tape.row_sum(s3))
        }
        ModelKind::RotatE => {
            let m = half(d)?;
            let (a, b) = split(tape, h, m)?;
            let phase = tape.slice_cols(r, 0, m)?;
            let (f, g) = split(tape, t, m)?;
            let c = tape.cos(phase);
            let s = tape.sin(phase);
            let ac = tape.mul(a, c)?;
            let bs = tape.mul(b, s)?;
            let asn = tape.mul(a, s)?;
            let bc = tape.mul(b, c)?;
            let re = tape.sub(ac, bs)?;
            let im = tape.add(asn, bc)?;
            let dre = tape.sub(re, f)?;
            let dim = tape.sub(im, g)?;
            let diff = tape.concat_cols(&[dre, dim])?;
            let dist = tape.row_l2(diff);
            Ok(tape.scale(dist, -T::one()))
        }
    }
}

fn half(d: usize) -> Result<usize> {
    if d % 2 != 0 {
        return Err(Error::dim("complex score", format!("odd width {d}")));
    }
    Ok(d / 2)
}

fn split<T: Scalar>(tape: &mut Tape<T>, x: Var, m: usize) -> Result<(Var, Var)> {
    Ok((tape.slice_cols(x, 0, m)?, tape.slice_cols(x, m, 2 * m)?))
}

/// `Σ_i max(0, γ + neg_i − pos_i)` over two score columns, as a 1×1 node.
pub fn margin_loss<T: Scalar>(tape: &mut Tape<T>, pos: Var, neg: Var, margin: T) -> Result<Var> {
    if tape.value(pos).rows() == 0 {
        return Err(Error::Contract("margin loss over an empty batch".into()));
    }
    let diff = tape.sub(neg, pos)?;
    let shifted = tape.add_scalar(diff, margin);
    let hinge = tape.relu(shifted);
    Ok(tape.sum(hinge))
}
