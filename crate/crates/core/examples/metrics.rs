//! Overall accuracy, macro precision and macro one-vs-rest AUC.

use mambamic::trainer::compute_metrics;
use mambamic::Tensor;

fn main() -> mambamic::Result<()> {
    let logits = Tensor::<f64>::from_f64(
        vec![6, 3],
        &[2.0, 0.1, 0.0, 1.5, 1.4, 0.0, 0.0, 3.0, 0.2, 0.1, 0.0, 0.9, 0.3, 0.2, 0.1, 0.0, 0.5, 1.0],
    )?;
    let labels = [0, 1, 1, 2, 0, 2];
    let m = compute_metrics(&logits, &labels)?;
    println!("OA {:.2}  Pre {:.2}  AUC {:.2}", m.oa, m.precision, m.auc);
    for (c, row) in m.confusion.iter().enumerate() {
        println!("true {c}: {row:?}");
    }
    Ok(())
}
