//! Generate a synthetic dialogue corpus, round-trip it through JSON lines,
//! and build a vocabulary from it.

use craftlm::cli::corpus_stats;
use craftlm::corpus::{build_vocab, load_corpus, synth_corpus, tokenize, write_corpus};
use craftlm::world::GridDims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let episodes = synth_corpus(7, 50, GridDims::default());
    let dir = std::env::temp_dir().join("craftlm-synth-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("corpus.jsonl");
    write_corpus(&path, &episodes)?;
    let reloaded = load_corpus(&path)?;
    assert_eq!(reloaded, episodes);
    println!("wrote {}", path.display());
    println!("{}", corpus_stats(&episodes));

    let vocab = build_vocab(&episodes, 1);
    println!("vocabulary: {} entries", vocab.len());
    for turn in episodes[0].turns.iter().take(4) {
        let ids = tokenize(&turn.utterance, &vocab, 64).ids;
        println!("{:>9}: {:<45} {:?}", turn.speaker.tag(), turn.utterance, ids);
    }
    Ok(())
}
