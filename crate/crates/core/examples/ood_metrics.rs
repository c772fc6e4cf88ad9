//! AUROC and FPR at a fixed TPR on hand-made scores, where higher means more
//! in-distribution.

use driftlab::eval::{auroc, fpr_at_tpr};

fn main() -> driftlab::Result<()> {
    let id = [0.9, 0.8, 0.8, 0.7, 0.6, 0.4];
    let ood = [0.5, 0.8, 0.3, 0.2];
    println!("auroc(id, ood) = {:.4}", auroc(&id, &ood)?);
    println!("auroc(ood, id) = {:.4}", auroc(&ood, &id)?);
    for target in [0.5, 0.8, 0.95] {
        println!("FPR at TPR {target:.2} = {:.4}", fpr_at_tpr(&id, &ood, target)?);
    }
    // One tie against a loss and a win: half credit.
    println!("auroc([1, 2, 3], [2]) = {}", auroc(&[1.0, 2.0, 3.0], &[2.0])?);
    Ok(())
}
