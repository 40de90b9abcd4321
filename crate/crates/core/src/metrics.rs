//! Cllr, PAV-based minimum Cllr, ROC-convex-hull EER, and evaluation
//! reports. Scores are `(value, is_target)` pairs; all costs are in bits.

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Magnitude used in place of the infinite LLRs PAV assigns to pure blocks.
pub const LLR_CLAMP: f64 = 1e6;

fn c<T: Float>(v: f64) -> T {
    T::from(v).unwrap()
}

/// `log(1 + e^x)` without overflow.
pub fn softplus<T: Float>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn class_counts<T: Float>(scores: &[(T, bool)]) -> Result<(usize, usize)> {
    let n_tgt = scores.iter().filter(|s| s.1).count();
    let n_imp = scores.len() - n_tgt;
    if n_tgt == 0 || n_imp == 0 {
        return Err(Error::invalid(format!(
            "need both target and impostor trials (got {n_tgt} targets, {n_imp} impostors)"
        )));
    }
    Ok((n_tgt, n_imp))
}

/// Cllr in bits of natural-log LLRs.
pub fn cllr<T: Float>(llrs: &[(T, bool)]) -> Result<T> {
    let (n_tgt, n_imp) = class_counts(llrs)?;
    let (mut tgt, mut imp) = (T::zero(), T::zero());
    for &(l, is_tgt) in llrs {
        if is_tgt {
            tgt = tgt + softplus(-l);
        } else {
            imp = imp + softplus(l);
        }
    }
    let tgt = tgt / c(n_tgt as f64);
    let imp = imp / c(n_imp as f64);
    Ok((tgt + imp) / c::<T>(2.0 * std::f64::consts::LN_2))
}

/// One pooled PAV block over the sorted scores.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Block<T> {
    lo: T,
    hi: T,
    targets: f64,
    count: f64,
}

impl<T> Block<T> {
    fn rate(&self) -> f64 {
        self.targets / self.count
    }
}

/// Isotonic fit of target indicators against ascending score. Equal scores
/// always share a block.
fn pav_blocks<T: Float>(scores: &[(T, bool)]) -> Vec<Block<T>> {
    let mut sorted: Vec<(T, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal));
    let mut blocks: Vec<Block<T>> = Vec::with_capacity(sorted.len());
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        let mut j = i;
        let mut targets = 0.0;
        while j < sorted.len() && sorted[j].0 == v {
            if sorted[j].1 {
                targets += 1.0;
            }
            j += 1;
        }
        let mut cur = Block {
            lo: v,
            hi: v,
            targets,
            count: (j - i) as f64,
        };
        while let Some(prev) = blocks.last() {
            if prev.rate() >= cur.rate() {
                let prev = blocks.pop().unwrap();
                cur = Block {
                    lo: prev.lo,
                    hi: cur.hi,
                    targets: prev.targets + cur.targets,
                    count: prev.count + cur.count,
                };
            } else {
                break;
            }
        }
        blocks.push(cur);
        i = j;
    }
    blocks
}

/// Non-decreasing step function from raw score to LLR produced by PAV.
#[derive(Debug, Clone, PartialEq)]
pub struct PavMapping<T> {
    /// `(lowest score, highest score, llr)` per block, ascending.
    pub knots: Vec<(T, T, T)>,
}

impl<T: Float> PavMapping<T> {
    /// LLR for an arbitrary score: the value of the last block starting at or
    /// below it (the first block for scores below all knots).
    pub fn apply(&self, score: T) -> T {
        let idx = self.knots.partition_point(|k| k.0 <= score);
        self.knots[idx.saturating_sub(1)].2
    }

    pub fn is_monotone(&self) -> bool {
        self.knots
            .windows(2)
            .all(|w| w[0].2 <= w[1].2 && w[0].1 < w[1].0)
    }
}

/// Minimum Cllr (bits) over monotone transforms of the scores, with the
/// optimal mapping. Posteriors are converted to LLRs at the empirical prior;
/// pure blocks map to `+-1e6`.
pub fn pav_min_cllr<T: Float>(scores: &[(T, bool)]) -> Result<(T, PavMapping<T>)> {
    let (n_tgt, n_imp) = class_counts(scores)?;
    let prior_logit = (n_tgt as f64 / n_imp as f64).ln();
    let blocks = pav_blocks(scores);
    let mut knots = Vec::with_capacity(blocks.len());
    let (mut tgt_cost, mut imp_cost) = (0.0f64, 0.0f64);
    for b in &blocks {
        let non = b.count - b.targets;
        let llr = if b.targets == 0.0 {
            -LLR_CLAMP
        } else if non == 0.0 {
            LLR_CLAMP
        } else {
            (b.targets / non).ln() - prior_logit
        };
        tgt_cost += b.targets * softplus(-llr);
        imp_cost += non * softplus(llr);
        knots.push((b.lo, b.hi, c(llr)));
    }
    let value =
        (tgt_cost / n_tgt as f64 + imp_cost / n_imp as f64) / (2.0 * std::f64::consts::LN_2);
    Ok((c(value), PavMapping { knots }))
}

fn hull_eer<T: Float>(scores: &[(T, bool)], n_tgt: usize, n_imp: usize) -> f64 {
    let blocks = pav_blocks(scores);
    // Operating points at block boundaries, from "accept all" to "reject all".
    let mut pmiss = vec![0.0];
    let mut pfa = vec![1.0];
    let (mut cum_tgt, mut cum_imp) = (0.0, 0.0);
    for b in &blocks {
        cum_tgt += b.targets;
        cum_imp += b.count - b.targets;
        pmiss.push(cum_tgt / n_tgt as f64);
        pfa.push(1.0 - cum_imp / n_imp as f64);
    }
    for i in 0..pmiss.len() - 1 {
        let d0 = pmiss[i] - pfa[i];
        let d1 = pmiss[i + 1] - pfa[i + 1];
        if d0 <= 0.0 && d1 >= 0.0 {
            if d1 == d0 {
                return pmiss[i];
            }
            let t = -d0 / (d1 - d0);
            return pmiss[i] + t * (pmiss[i + 1] - pmiss[i]);
        }
    }
    0.5
}

/// Equal error rate at the crossing of the ROC convex hull with the
/// miss = false-alarm line. Reported as the smaller of the rates for the
/// scores and their negation, so an inverted detector reads as its
/// mirror image.
pub fn eer<T: Float>(scores: &[(T, bool)]) -> Result<T> {
    let (n_tgt, n_imp) = class_counts(scores)?;
    let forward = hull_eer(scores, n_tgt, n_imp);
    let flipped: Vec<(T, bool)> = scores.iter().map(|&(s, l)| (-s, l)).collect();
    let backward = hull_eer(&flipped, n_tgt, n_imp);
    Ok(c(forward.min(backward)))
}

/// Actual/minimum Cllr and EER of one labelled set of LLRs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub actual_cllr: f64,
    pub min_cllr: f64,
    pub eer: f64,
    pub n_target: usize,
    pub n_impostor: usize,
}

impl EvalReport {
    pub fn calibration_gap(&self) -> f64 {
        self.actual_cllr - self.min_cllr
    }

    pub fn to_tsv(&self) -> String {
        format!(
            "metric\tvalue\nactual_cllr\t{}\nmin_cllr\t{}\neer\t{}\nn_target\t{}\nn_impostor\t{}\n",
            self.actual_cllr, self.min_cllr, self.eer, self.n_target, self.n_impostor
        )
    }
}

pub fn evaluate(llrs: &[(f64, bool)]) -> Result<EvalReport> {
    let (n_target, n_impostor) = class_counts(llrs)?;
    let actual_cllr = cllr(llrs)?;
    let (min_cllr, _) = pav_min_cllr(llrs)?;
    Ok(EvalReport {
        actual_cllr,
        // PAV is optimal among monotone maps, the identity included; only
        // rounding can push it above the actual value.
        min_cllr: min_cllr.min(actual_cllr).max(0.0),
        eer: eer(llrs)?,
        n_target,
        n_impostor,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_llrs_cost_one_bit() {
        let s = vec![(0.0, true), (0.0, false), (0.0, false)];
        assert!((cllr(&s).unwrap() - 1.0f64).abs() < 1e-12);
    }

    #[test]
    fn saturated_llrs_cost_nothing() {
        let s = vec![(40.0, true), (-40.0, false)];
        assert!(cllr(&s).unwrap() < 1e-10);
    }

    #[test]
    fn one_target_one_impostor() {
        let s = vec![(1.0, true), (-1.0, false)];
        let expected = 2.0 * (1.0f64 + (-1.0f64).exp()).ln() / (2.0 * 2.0f64.ln());
        assert!((cllr(&s).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.4519).abs() < 1e-4);
    }

    #[test]
    fn one_class_rejected() {
        let s = vec![(1.0, true), (2.0, true)];
        assert!(cllr(&s).is_err());
        assert!(pav_min_cllr(&s).is_err());
        assert!(eer(&s).is_err());
    }

    #[test]
    fn separable_scores() {
        let s = vec![(-2.0, false), (-1.0, false), (1.0, true), (3.0, true)];
        let (m, map) = pav_min_cllr(&s).unwrap();
        assert!(m.abs() < 1e-10);
        assert_eq!(map.knots.len(), 2);
        assert_eq!(eer(&s).unwrap(), 0.0);
        let flipped: Vec<_> = s.iter().map(|&(v, l)| (-v, l)).collect();
        assert_eq!(eer(&flipped).unwrap(), 0.0);
    }

    #[test]
    fn ties_share_a_block() {
        let s = vec![(1.0, true), (1.0, false), (0.0, false), (2.0, true)];
        let (_, map) = pav_min_cllr(&s).unwrap();
        assert!(map
            .knots
            .iter()
            .any(|k| k.0 == 1.0 && k.1 == 1.0 || k.0 <= 1.0 && k.1 >= 1.0));
        assert!(map.is_monotone());
        assert_eq!(map.apply(-5.0), map.knots[0].2);
        assert_eq!(map.apply(10.0), map.knots.last().unwrap().2);
    }

    #[test]
    fn works_in_single_precision() {
        let s: Vec<(f32, bool)> = vec![(0.0, true), (0.0, false)];
        assert!((cllr(&s).unwrap() - 1.0).abs() < 1e-6);
    }
}
