//! Finite-difference check of the encoder + masked-LM gradients.

use craftlm::corpus::{build_vocab, synth_corpus, tokenize, utterances};
use craftlm::mlm::{mask_tokens, MaskingConfig};
use craftlm::nn::encoder::{forward, vocab_logits};
use craftlm::nn::{grad_check, init_encoder, EncoderConfig, Tape};
use craftlm::world::GridDims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let episodes = synth_corpus(1, 10, GridDims::default());
    let vocab = build_vocab(&episodes, 1);
    let cfg = EncoderConfig {
        n_layers: 1,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 24,
        ..EncoderConfig::new(vocab.len())
    };
    let state = init_encoder(&cfg, 0)?;
    let layout = state.layout();
    let ids = tokenize(utterances(&episodes).next().unwrap_or(""), &vocab, 24).ids;
    let masking = MaskingConfig {
        rate: 0.5,
        ..MaskingConfig::default()
    };
    let row = mask_tokens(&ids, &masking, 0, 0, vocab.len());
    let labels: Vec<usize> = row.masked.iter().map(|&p| ids[p]).collect();

    let report = grad_check(&state.params, 1e-4, 200, 11, |params| {
        let mut tape = Tape::new(params);
        let fw = forward(&cfg, &layout, &mut tape, &row.input_ids, None, None)?;
        let picked = tape.rows(fw.hidden, row.masked.clone());
        let logits = vocab_logits(&layout, &mut tape, picked);
        let loss = tape.cross_entropy_sum(logits, labels.clone());
        let scale = 1.0 / labels.len() as f64;
        let mut grads = params.zeros_like();
        tape.backward(loss, &mut grads, scale);
        Ok((tape.value(loss).item() * scale, grads))
    })?;
    for t in &report.per_tensor {
        println!("{:<22} {:>4} coords  max rel err {:.2e}", t.name, t.checked, t.max_rel_error);
    }
    println!("overall max relative error {:.2e}", report.max_rel_error);
    Ok(())
}
