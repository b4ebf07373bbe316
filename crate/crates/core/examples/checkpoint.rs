//! Writes a checkpoint, reloads it and classifies one image.

use mambamic::autodiff::Graph;
use mambamic::cli::{Checkpoint, RunConfig};
use mambamic::data::{normalize, synthetic_textures};
use mambamic::trainer::softmax_rows;
use mambamic::Backbone;

fn main() -> mambamic::Result<()> {
    let cfg = RunConfig::new("tiny", "unused", 2);
    let model = Backbone::new(cfg.model_config()?)?;
    let ck = Checkpoint {
        config_text: cfg.resolved_json(),
        epochs_done: 0,
        params: model.init(cfg.seed),
        optimizer: None,
        best: None,
    };
    let path = std::env::temp_dir().join("mambamic-example.mmic");
    ck.save(&path)?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!("wrote {} ({bytes} bytes, {} tensors)", path.display(), ck.params.len());

    let (_, model, params) = Checkpoint::load(&path)?.restore()?;
    let image = synthetic_textures(1, 32, 3, 2, 5)?.images;
    let mut g = Graph::inference();
    let x = g.input(normalize(&image));
    let logits = model.forward(&mut g, &params, x)?;
    println!("class probabilities of an untrained model: {:?}", softmax_rows(g.value(logits))?[0]);
    Ok(())
}
