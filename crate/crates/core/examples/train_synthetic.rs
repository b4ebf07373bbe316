//! Trains the tiny model on synthetic stripe textures.
//!
//! `cargo run --release --example train_synthetic -- [epochs] [samples]`

use std::sync::Arc;

use mambamic::data::{split_dataset, synthetic_textures, Split, DEFAULT_RATIO};
use mambamic::trainer::{evaluate, train_loop, EpochRecord, TrainOptions, TrainSchedule, TrainState};
use mambamic::{Backbone, ModelConfig};

fn main() -> mambamic::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let epochs = args.next().unwrap_or(20);
    let samples = args.next().unwrap_or(2000);

    let data = synthetic_textures(samples, 32, 3, 2, 7)?;
    let split = split_dataset(&data.labels, 2, DEFAULT_RATIO, 42)?;
    let model = Backbone::new(ModelConfig::variant("tiny", 2, 3)?)?;
    let sched = TrainSchedule {
        total_epochs: epochs,
        warmup_epochs: 10.min(epochs - 1),
        target_val_oa: Some(95.0),
        ..TrainSchedule::default()
    };
    let opts = TrainOptions {
        on_epoch: Some(Arc::new(|r: &EpochRecord| {
            println!("epoch {:>3}  lr {:.2e}  loss {:.4}  val OA {:.2}", r.epoch + 1, r.lr, r.train_loss, r.val_oa)
        })),
        ..TrainOptions::default()
    };
    let state = TrainState { params: model.init(42), optimizer: None, start_epoch: 0 };
    let out = train_loop(&model, state, &data, &split.indices(Split::Train), &split.indices(Split::Val), &sched, &opts)?;
    let test = evaluate(&model, &out.best_params, &data, &split.indices(Split::Test), 16, 1)?;
    println!("stopped: {:?}; test OA {:.2}  Pre {:.2}  AUC {:.2}", out.stop, test.oa, test.precision, test.auc);
    Ok(())
}
