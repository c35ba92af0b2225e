use proptest::prelude::*;

use craftlm::corpus::{parse_corpus, serialize_corpus, synth_corpus, tokenize, LoadOptions, Vocab, CLS, N_SPECIAL, SEP};
use craftlm::mlm::{lr_at, mask_tokens, masked_count, MaskingConfig, TrainConfig};
use craftlm::nn::checkpoint::{decode_raw, encode_raw};
use craftlm::nn::{init_encoder, CheckpointKind, EncoderConfig, RawCheckpoint};
use craftlm::world::{net_change, Cell, Color, FeasibilityRule, GridDims, WorldState};

fn dims() -> GridDims {
    GridDims::new(4, 3, 4)
}

fn world_strategy() -> impl Strategy<Value = WorldState> {
    let d = dims();
    proptest::collection::vec(proptest::option::weighted(0.4, 0usize..6), d.n_cells()).prop_map(move |cells| {
        let blocks = cells
            .into_iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (d.cell_at(i), Color::from_index(c).unwrap())));
        WorldState::from_blocks(d, blocks).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corpus_serialization_round_trips(seed in 0u64..10_000, n in 0usize..6) {
        let eps = synth_corpus(seed, n, GridDims::default());
        let text = serialize_corpus(&eps);
        let back = parse_corpus(&text, &LoadOptions::default()).unwrap();
        prop_assert_eq!(&back, &eps);
        prop_assert_eq!(serialize_corpus(&back), text);
    }

    #[test]
    fn net_change_replays_to_the_target(a in world_strategy(), b in world_strategy()) {
        let diff = net_change(&a, &b).unwrap();
        let replayed = a.replay(&diff, FeasibilityRule::Unrestricted).unwrap();
        prop_assert_eq!(&replayed, &b);
        prop_assert!(net_change(&a, &a).unwrap().is_empty());
        let back = net_change(&b, &a).unwrap();
        prop_assert_eq!(back.len(), diff.len());
    }

    #[test]
    fn removal_then_placement_restores(w in world_strategy()) {
        for (cell, color) in w.blocks().collect::<Vec<(Cell, Color)>>() {
            let gone = w.apply(craftlm::world::BlockAction::Remove { cell }, FeasibilityRule::Unrestricted).unwrap();
            let back = gone.apply(craftlm::world::BlockAction::Place { cell, color }, FeasibilityRule::Unrestricted).unwrap();
            prop_assert_eq!(&back, &w);
        }
    }

    #[test]
    fn masking_invariants(
        words in proptest::collection::vec(N_SPECIAL..60usize, 0..80),
        rate in 0.0f64..=1.0,
        seed in any::<u64>(),
        idx in 0u64..1000,
        epoch in 0u64..50,
    ) {
        let mut ids = vec![CLS];
        ids.extend(&words);
        ids.push(SEP);
        let cfg = MaskingConfig { rate, seed, ..MaskingConfig::default() };
        let row = mask_tokens(&ids, &cfg, idx, epoch, 60);
        prop_assert_eq!(row.masked.len(), masked_count(words.len(), rate));
        prop_assert_eq!(row.input_ids.len(), ids.len());
        prop_assert_eq!(row.input_ids[0], CLS);
        prop_assert_eq!(*row.input_ids.last().unwrap(), SEP);
        for (i, (&orig, &now)) in ids.iter().zip(&row.input_ids).enumerate() {
            let selected = row.masked.contains(&i);
            prop_assert_eq!(row.labels[i], if selected { Some(orig) } else { None });
            if !selected {
                prop_assert_eq!(now, orig);
            }
        }
        prop_assert!(row.masked.windows(2).all(|w| w[0] < w[1]));
        prop_assert_eq!(mask_tokens(&ids, &cfg, idx, epoch, 60), row);
    }

    #[test]
    fn schedule_stays_in_range(total in 1usize..2000, warm in 0.0f64..=0.5, lr in 1e-6f64..1e-1) {
        let cfg = TrainConfig { peak_lr: lr, warmup_frac: warm, ..TrainConfig::default() };
        for step in 0..=total {
            let v = lr_at(step, total, &cfg);
            prop_assert!((0.0..=lr).contains(&v));
        }
        prop_assert_eq!(lr_at(total, total, &cfg), 0.0);
    }

    #[test]
    fn tokenized_length_is_bounded(text in "[a-z ]{0,200}", max in 2usize..40) {
        let vocab = Vocab::new();
        let seq = tokenize(&text, &vocab, max);
        prop_assert!(seq.len() <= max);
        prop_assert_eq!(seq.ids[0], CLS);
        prop_assert_eq!(*seq.ids.last().unwrap(), SEP);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_bytes_round_trip(seed in any::<u64>(), v in 6usize..30, layers in 1usize..3) {
        let cfg = EncoderConfig { n_layers: layers, d_model: 8, n_heads: 2, d_ff: 16, max_seq_len: 12, ..EncoderConfig::new(v) };
        let state = init_encoder(&cfg, seed).unwrap();
        let tokens: Vec<String> = (N_SPECIAL..v).map(|i| format!("w{i}")).collect();
        let raw = RawCheckpoint {
            kind: CheckpointKind::Encoder,
            config: cfg.to_pairs(),
            vocab: Vocab::from_tokens(tokens).unwrap(),
            params: state.params.clone(),
        };
        let bytes = encode_raw(&raw);
        let back = decode_raw(&bytes).unwrap();
        prop_assert_eq!(&back, &raw);
        prop_assert_eq!(encode_raw(&back), bytes);
    }
}
