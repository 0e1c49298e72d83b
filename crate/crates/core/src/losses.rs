//! Triplet and image-text contrastive objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub margin: f64,
    pub temperature: f64,
    /// Triplet pairs mined per anchor.
    pub pairs: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { margin: 0.5, temperature: 0.07, pairs: 2 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return Err(Error::Config(format!("margin {} must be finite and non-negative", self.margin)));
        }
        check_temperature(self.temperature)?;
        if self.pairs == 0 {
            return Err(Error::Config("pairs must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    Ok(())
}

/// Mean hinge `max(0, |a - p|^2 - |a - n|^2 + margin)` over the pairs.
/// Pair vectors are constants; only `anchor` carries gradient. No pairs
/// gives an exact zero.
pub fn triplet_loss<T: Real>(tape: &mut Tape<T>, anchor: Var, pairs: &[(Vec<T>, Vec<T>)], margin: f64) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(&Tensor::scalar(T::zero())));
    }
    let dim = tape.value(anchor).len();
    let mut total = None;
    for (p, n) in pairs {
        if p.len() != dim || n.len() != dim {
            return Err(Error::shapes("triplet_loss", &[dim], &[p.len().max(n.len())]));
        }
        let p = tape.constant_vec(p.clone());
        let n = tape.constant_vec(n.clone());
        let dp = tape.sq_euclidean(anchor, p)?;
        let dn = tape.sq_euclidean(anchor, n)?;
        let gap = tape.sub(dp, dn)?;
        let gap = tape.add_scalar(gap, T::of(margin));
        let h = tape.relu(gap);
        total = Some(match total {
            None => h,
            Some(t) => tape.add(t, h)?,
        });
    }
    let total = total.expect("non-empty pairs");
    Ok(tape.scale(total, T::of(1.0 / pairs.len() as f64)))
}

/// Cross-entropy of the softmax over `cos(image, text_k) / tau` at the true
/// row `class`.
pub fn itc_loss<T: Real>(tape: &mut Tape<T>, image: Var, texts: Var, class: usize, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let (ts, is) = (tape.shape(texts).to_vec(), tape.shape(image).to_vec());
    if ts.len() != 2 || is.len() != 1 || ts[1] != is[0] {
        return Err(Error::shapes("itc_loss", &is, &ts));
    }
    if class >= ts[0] {
        return Err(Error::contract("itc_loss", format!("class {class} outside {} text rows", ts[0])));
    }
    let i = tape.normalize(image);
    let t = tape.normalize(texts);
    let tt = tape.transpose(t)?;
    let sims = tape.matmul(i, tt)?;
    let logits = tape.scale(sims, T::of(1.0 / tau));
    let lse = tape.log_sum_exp(logits);
    let own = tape.pick(logits, class)?;
    tape.sub(lse, own)
}

/// Batch mean of per-sample terms.
pub fn batch_mean<T: Real>(tape: &mut Tape<T>, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Err(Error::contract("batch_mean", "empty batch"));
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.scale(total, T::of(1.0 / terms.len() as f64)))
}

/// Phase-1 objective: batch mean of triplet plus ITC, unit weights.
pub fn phase1_loss<T: Real>(tape: &mut Tape<T>, triplet: &[Var], itc: &[Var]) -> Result<Var> {
    if triplet.len() != itc.len() {
        return Err(Error::contract("phase1_loss", format!("{} triplet terms vs {} ITC terms", triplet.len(), itc.len())));
    }
    let per_sample = triplet.iter().zip(itc).map(|(&a, &b)| tape.add(a, b)).collect::<Result<Vec<_>>>()?;
    batch_mean(tape, &per_sample)
}

/// Phase-2 objective: batch mean of ITC against frozen text features.
pub fn phase2_loss<T: Real>(tape: &mut Tape<T>, itc: &[Var]) -> Result<Var> {
    batch_mean(tape, itc)
}
