use crate::error::{Error, Result};
use crate::numkern::{kernels, Tensor};

fn check_scores(id_scores: &[f64], ood_scores: &[f64]) -> Result<()> {
    if id_scores.is_empty() || ood_scores.is_empty() {
        return Err(Error::Contract("score lists must be nonempty".into()));
    }
    if id_scores.iter().chain(ood_scores).any(|s| s.is_nan()) {
        return Err(Error::NonFinite {
            context: "OOD scores".into(),
        });
    }
    Ok(())
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Area under the ROC curve with higher scores meaning "in-distribution":
/// `U / (n_id · n_ood)` where ties earn half credit.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> Result<f64> {
    check_scores(id_scores, ood_scores)?;
    let ood = sorted(ood_scores);
    // Doubled U keeps the tie credit integral.
    let mut u2: u128 = 0;
    for &s in id_scores {
        let below = ood.partition_point(|&o| o < s);
        let not_above = ood.partition_point(|&o| o <= s);
        u2 += 2 * below as u128 + (not_above - below) as u128;
    }
    let n2 = 2 * id_scores.len() as u128 * ood.len() as u128;
    // Swapping the arguments maps u2 to n2 − u2. Dividing whichever side is
    // at most one half and subtracting from 1 otherwise makes
    // auroc(a, b) + auroc(b, a) round to exactly 1.
    if 2 * u2 <= n2 {
        Ok(u2 as f64 / n2 as f64)
    } else {
        Ok(1.0 - (n2 - u2) as f64 / n2 as f64)
    }
}

/// False-positive rate at the largest threshold that keeps at least
/// `tpr_target` of the ID scores at or above it.
pub fn fpr_at_tpr(id_scores: &[f64], ood_scores: &[f64], tpr_target: f64) -> Result<f64> {
    check_scores(id_scores, ood_scores)?;
    if !(tpr_target > 0.0 && tpr_target <= 1.0) {
        return Err(Error::config("eval.tpr_target", "must lie in (0, 1]"));
    }
    let mut desc = sorted(id_scores);
    desc.reverse();
    let n = desc.len();
    // Fewest top scores whose share reaches the target.
    let k = (1..=n)
        .find(|&k| k as f64 / n as f64 >= tpr_target)
        .expect("k = n always reaches a target <= 1");
    let threshold = desc[k - 1];
    let hits = ood_scores.iter().filter(|&&o| o >= threshold).count();
    Ok(hits as f64 / ood_scores.len() as f64)
}

/// Max cosine to any class centroid; inputs are assumed unit-norm.
pub fn ood_score(features: &Tensor, centroids: &Tensor) -> Result<Vec<f64>> {
    let sims = kernels::matmul_nt(features, centroids)?;
    let (n, c) = sims.require_matrix("ood_score")?;
    if c == 0 {
        return Err(Error::Contract("no centroids".into()));
    }
    Ok((0..n)
        .map(|i| sims.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect())
}
