//! Builds each block on a small feature map and prints shapes and sizes.

use mambamic::autodiff::Graph;
use mambamic::blocks::{BlockHyper, BlockOptions, Fmiam, Laef, MambaMicBlock, RevSsm};
use mambamic::params::uniform;
use mambamic::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mambamic::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let hyper = BlockHyper::default();
    let mut store = ParamStore::<f32>::new();

    let laef = Laef::new("laef", 16, 8, hyper.r)?;
    let rev = RevSsm::new("rev", 8, &hyper)?;
    let fmiam = Fmiam::new("fmiam", 32, hyper.eca_kernel)?;
    let block = MambaMicBlock::new("block", 64, &hyper)?;
    let single = MambaMicBlock::new("single", 64, &BlockHyper { options: BlockOptions { parallel_vssm: false, ..BlockOptions::default() }, ..hyper })?;
    laef.init(&mut store, &mut rng);
    rev.init(&mut store, &mut rng);
    fmiam.init(&mut store, &mut rng);
    block.init(&mut store, &mut rng);
    single.init(&mut store, &mut rng);

    let mut g = Graph::<f32>::inference();
    let x16 = g.input(uniform(&mut rng, &[1, 8, 8, 16], 1.0));
    let x8 = g.input(uniform(&mut rng, &[1, 8, 8, 8], 1.0));
    let x32 = g.input(uniform(&mut rng, &[1, 8, 8, 32], 1.0));
    let x64 = g.input(uniform(&mut rng, &[1, 8, 8, 64], 1.0));

    let y = laef.forward(&mut g, &store, x16)?;
    println!("LAEF   {:?} -> {:?}  local {} of {}  params {}", g.shape(x16), g.shape(y), laef.local, laef.cout, laef.num_params());
    let y = rev.forward(&mut g, &store, x8)?;
    println!("REVSSM {:?} -> {:?}  params {}", g.shape(x8), g.shape(y), rev.num_params());
    let y = fmiam.forward(&mut g, &store, x32, x32)?;
    println!("FMIAM  2 x {:?} -> {:?}  params {}", g.shape(x32), g.shape(y), fmiam.num_params());
    let y = block.forward(&mut g, &store, x64)?;
    println!("block  {:?} -> {:?}  params {}  MACs {}", g.shape(x64), g.shape(y), block.num_params(), block.macs(8, 8));
    println!("single-scan block params {}", single.num_params());
    Ok(())
}
