//! Pretrain a small encoder on generic text, then adapt it to the building
//! dialogue, and compare task-text loss before and after.

use craftlm::cli::task_vocab;
use craftlm::corpus::{generic_text, synth_corpus, utterances};
use craftlm::mlm::{evaluate_mlm, pretrain_generic, train_mlm, MaskingConfig, TrainConfig};
use craftlm::nn::{init_encoder, save_checkpoint, EncoderConfig};
use craftlm::world::GridDims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let generic = generic_text(3, 600);
    let task = synth_corpus(1, 80, GridDims::default());
    let vocab = task_vocab(&generic, &task, 1);
    let masking = MaskingConfig::default();
    let schedule = TrainConfig {
        epochs: 6,
        peak_lr: 1e-3,
        ..TrainConfig::default()
    };

    let fresh = init_encoder(&EncoderConfig::new(vocab.len()), 0)?;
    let (base, h) = pretrain_generic(&generic, &vocab, &fresh, &masking, &schedule)?;
    println!("generic pretraining: {:.3} -> {:.3}", h.epochs[0].train_loss, h.epochs[5].train_loss);

    let task_text: Vec<&str> = utterances(&task).collect();
    println!("task loss, random init : {:.3}", evaluate_mlm(&fresh, &vocab, &task_text, &masking)?);
    println!("task loss, base encoder: {:.3}", evaluate_mlm(&base, &vocab, &task_text, &masking)?);

    let (adapted, h) = train_mlm(&task, &vocab, &base, &masking, &schedule)?;
    print!("{}", h.to_csv());
    println!("task loss, adapted     : {:.3}", evaluate_mlm(&adapted, &vocab, &task_text, &masking)?);

    let path = std::env::temp_dir().join("craftlm-adapted.ckpt");
    save_checkpoint(&adapted, &vocab, &path)?;
    println!("saved {}", path.display());
    Ok(())
}
