//! Parameter and MAC counts across the ablation grid, without training.

use mambamic::cli::{ablation_table, run_ablation, RunConfig};

fn main() -> mambamic::Result<()> {
    let base = RunConfig::new("tiny", "unused", 2);
    let rows = run_ablation(&base, &["fusion", "parallel", "ratio"], &[0.125, 0.25, 0.5, 1.0], false, 1, None)?;
    print!("{}", ablation_table(&rows));
    Ok(())
}
