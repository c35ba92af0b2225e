//! How sequences are corrupted for masked-LM training.

use craftlm::corpus::{build_vocab, synth_corpus, tokenize, utterances};
use craftlm::mlm::{mask_tokens, MaskingConfig, MaskingMode};
use craftlm::world::GridDims;

fn main() {
    let episodes = synth_corpus(3, 20, GridDims::default());
    let vocab = build_vocab(&episodes, 1);
    let text = utterances(&episodes)
        .find(|u| u.split_whitespace().count() >= 8)
        .expect("a long utterance");
    let ids = tokenize(text, &vocab, 64).ids;
    println!("{text}");

    let show = |ids: &[usize]| ids.iter().map(|&i| vocab.token(i).unwrap_or("?")).collect::<Vec<_>>().join(" ");
    let cfg = MaskingConfig {
        rate: 0.3,
        ..MaskingConfig::default()
    };
    for epoch in 0..3 {
        let row = mask_tokens(&ids, &cfg, 0, epoch, vocab.len());
        println!("dynamic epoch {epoch}: {}  masked at {:?}", show(&row.input_ids), row.masked);
    }
    let fixed = MaskingConfig {
        mode: MaskingMode::Static,
        ..cfg
    };
    for epoch in 0..2 {
        let row = mask_tokens(&ids, &fixed, 0, epoch, vocab.len());
        println!("static  epoch {epoch}: {}", show(&row.input_ids));
    }
}
