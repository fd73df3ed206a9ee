//! ROC and precision-recall curves, AUCs and the Youden operating point.
//!
//! Run with `cargo run --example ranking_metrics`.

use bvae::eval::{pr_curve, roc_curve, youden_threshold};

fn main() -> bvae::Result<()> {
    let scores = [0.92, 0.85, 0.77, 0.70, 0.70, 0.61, 0.55, 0.40, 0.33, 0.20, 0.12, 0.05];
    let labels = [true, true, false, true, false, true, false, false, true, false, false, false];

    let roc = roc_curve(&scores, &labels)?;
    println!("threshold    fpr    tpr");
    for p in &roc.points {
        println!("{:>9.2} {:>6.3} {:>6.3}", p.threshold, roc.fpr(p), roc.tpr(p));
    }
    println!("ROC AUC {:.4}", roc.auc);

    let pr = pr_curve(&scores, &labels)?;
    println!("average precision {:.4} (prevalence {:.3})", pr.auc, 5.0 / 12.0);

    let (threshold, f1) = youden_threshold(&roc)?;
    println!("Youden threshold {threshold:.3}, F1 there {f1:.3}");
    Ok(())
}
