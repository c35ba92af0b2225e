//! A scripted session with the interactive builder, including undo.

use craftlm::builder::{train_builder, BuilderTrainConfig, DecodeConfig, EncoderInit};
use craftlm::cli::{format_actions, task_vocab, PlaySession};
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
    let (model, _) = train_builder(&train, &vocab, EncoderInit::Scratch(EncoderConfig::new(vocab.len())), dims, &cfg, &mut |_| {})?;

    let mut session = PlaySession::new(&model, &vocab, DecodeConfig::default());
    for line in ["put a red block at 2 3", "stack two blue blocks at 5 5", "undo", "add one green block at x 4 z 1"] {
        println!("> {line}");
        if line == "undo" {
            session.undo();
        } else {
            println!("{}", format_actions(&session.instruct(line)?));
        }
    }
    println!("{}", session.render());
    Ok(())
}
