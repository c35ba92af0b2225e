//! Train a builder on a small synthetic corpus and decode a few turns.

use craftlm::builder::{builder_examples, decode_actions, train_builder, BuilderTrainConfig, DecodeConfig, EncoderInit};
use craftlm::cli::{format_actions, task_vocab};
use craftlm::mlm::TrainConfig;
use craftlm::nn::EncoderConfig;
use craftlm::world::GridDims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = GridDims::default();
    let train = craftlm::corpus::synth_corpus(1, 120, dims);
    let vocab = task_vocab(&[], &train, 1);
    let cfg = BuilderTrainConfig {
        train: TrainConfig {
            epochs: 6,
            peak_lr: 1e-3,
            ..TrainConfig::default()
        },
        ..BuilderTrainConfig::default()
    };
    let init = EncoderInit::Scratch(EncoderConfig::new(vocab.len()));
    let (model, history) = train_builder(&train, &vocab, init, dims, &cfg, &mut |e| {
        println!("epoch {} train {:.3} val {:.3}", e.epoch, e.train_loss, e.val_loss.unwrap_or(f64::NAN));
    })?;
    let _ = history;

    let held_out = craftlm::corpus::synth_corpus(2, 3, dims);
    for ex in builder_examples(&held_out, &vocab, model.history, model.encoder.max_seq_len).iter().take(5) {
        let predicted = decode_actions(&model, &ex.context, &DecodeConfig::default())?;
        println!("\n{}", ex.context.text);
        println!("  gold: {}", format_actions(&ex.gold));
        println!("  pred: {}", format_actions(&predicted));
    }
    Ok(())
}
