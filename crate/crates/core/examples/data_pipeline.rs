//! Synthetic data, on-disk formats, stratified splits and batching.

use mambamic::data::{load_dataset, make_batches, split_dataset, synthetic_textures, write_ppm, Split, DEFAULT_RATIO};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("mambamic-data-example");
    let data = synthetic_textures(40, 32, 3, 2, 7)?;
    data.save(dir.join("mmt"))?;

    // the same images as a PPM directory with a manifest
    let ppm = dir.join("ppm");
    std::fs::create_dir_all(&ppm)?;
    let mut manifest = String::new();
    for i in 0..data.len() {
        let single = mambamic::Tensor::new(vec![32, 32, 3], data.images.data()[i * 3072..(i + 1) * 3072].to_vec())?;
        write_ppm(ppm.join(format!("{i}.ppm")), &single)?;
        manifest += &format!("{i}.ppm,{}\n", data.labels[i]);
    }
    std::fs::write(ppm.join("manifest.txt"), manifest)?;

    let a = load_dataset(dir.join("mmt"), Some(2))?;
    let b = load_dataset(ppm.join("manifest.txt"), Some(2))?;
    println!("loaded {} + {} samples, geometry {:?}", a.len(), b.len(), b.geometry());

    let split = split_dataset(&a.labels, 2, DEFAULT_RATIO, 42)?;
    for s in [Split::Train, Split::Val, Split::Test] {
        println!("{s:?}: {} samples", split.indices(s).len());
    }
    let batches = make_batches(&split.indices(Split::Train), 8, Some((42, 0)));
    println!("epoch 0 batches: {batches:?}");
    Ok(())
}
