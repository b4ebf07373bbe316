//! Sequential, blocked and four-direction selective scans on random input.

use mambamic::params::uniform;
use mambamic::sscan::{scan2d_expand, selective_scan_1d, selective_scan_blocked, ssm2d, ScanDirection, SsmParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mambamic::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = SsmParams::<f64>::init(4, 8, &mut rng);

    let x = uniform::<f64>(&mut rng, &[100, 4], 1.0);
    let y = selective_scan_1d(&x, &p)?;
    for block in [1, 7, 32, 100] {
        let yb = selective_scan_blocked(&x, &p, block)?;
        println!("block {block:>3}: max |blocked - sequential| = {:.2e}", yb.max_abs_diff(&y));
    }

    let grid = uniform::<f64>(&mut rng, &[3, 4, 4], 1.0);
    for dir in ScanDirection::ALL {
        let seq = scan2d_expand(&grid, dir)?;
        println!("{dir:?}: token order {:?}", &dir.order(3, 4)[..6]);
        assert_eq!(seq.shape(), &[12, 4]);
    }
    let merged = ssm2d(&grid, &p)?;
    println!("ssm2d output shape {:?}", merged.shape());
    Ok(())
}
