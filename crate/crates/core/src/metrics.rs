//! Concordance and correlation statistics, and the differentiable CCC loss.
//!
//! All moments use the biased (divide-by-N) estimator.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_pair<T>(x: &[T], y: &[T]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::shape("ccc", format!("lengths {} and {}", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::TooShort { need: 2, got: x.len() });
    }
    Ok(())
}

struct Moments<T> {
    mean_x: T,
    mean_y: T,
    var_x: T,
    var_y: T,
    cov: T,
}

fn moments<T: Scalar>(x: &[T], y: &[T]) -> Moments<T> {
    let n = T::lit(x.len() as f64);
    let mean_x = x.iter().copied().sum::<T>() / n;
    let mean_y = y.iter().copied().sum::<T>() / n;
    let mut var_x = T::zero();
    let mut var_y = T::zero();
    let mut cov = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        let (da, db) = (a - mean_x, b - mean_y);
        var_x += da * da;
        var_y += db * db;
        cov += da * db;
    }
    Moments { mean_x, mean_y, var_x: var_x / n, var_y: var_y / n, cov: cov / n }
}

/// Lin's concordance correlation coefficient.
///
/// Two constant sequences with equal means are perfectly concordant (1).
pub fn ccc<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y)?;
    let m = moments(x, y);
    let shift = m.mean_x - m.mean_y;
    let denom = m.var_x + m.var_y + shift * shift;
    if denom == T::zero() {
        return Ok(T::one());
    }
    Ok(T::lit(2.0) * m.cov / denom)
}

/// Pearson correlation; 0 when either sequence is constant.
pub fn pearson<T: Scalar>(x: &[T], y: &[T]) -> Result<T> {
    check_pair(x, y)?;
    let m = moments(x, y);
    if m.var_x == T::zero() || m.var_y == T::zero() {
        return Ok(T::zero());
    }
    Ok(m.cov / (m.var_x * m.var_y).sqrt())
}

/// `1 − ccc(pred, target)` recorded on the tape. Both inputs are 1-D of
/// equal length; `target` is normally a constant.
pub fn ccc_loss<T: Scalar>(tape: &Tape<T>, pred: Var, target: Var) -> Result<Var> {
    let shape = tape.shape(pred);
    if shape != tape.shape(target) || shape.len() != 1 {
        return Err(Error::shape("ccc_loss", format!("{shape:?} vs {:?}", tape.shape(target))));
    }
    if shape[0] < 2 {
        return Err(Error::TooShort { need: 2, got: shape[0] });
    }
    let mean_x = tape.mean(pred)?;
    let mean_y = tape.mean(target)?;
    let xc = tape.sub(pred, tape.expand(mean_x, &shape)?)?;
    let yc = tape.sub(target, tape.expand(mean_y, &shape)?)?;
    let var_x = tape.mean(tape.mul(xc, xc)?)?;
    let var_y = tape.mean(tape.mul(yc, yc)?)?;
    let cov = tape.mean(tape.mul(xc, yc)?)?;
    let shift = tape.sub(mean_x, mean_y)?;
    let denom = tape.add(tape.add(var_x, var_y)?, tape.mul(shift, shift)?)?;
    if tape.value(denom).data()[0] == T::zero() {
        return tape.scale(denom, T::zero());
    }
    let ratio = tape.div(cov, denom)?;
    let concordance = tape.scale(ratio, T::lit(-2.0))?;
    tape.add_const(concordance, T::one())
}
