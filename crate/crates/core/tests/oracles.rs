//! Library results checked against small, independently written oracles.

mod common;

use std::collections::{BTreeSet, HashMap};

use craftlm::cli::corpus_stats;
use craftlm::corpus::{build_vocab, synth_corpus, Episode, Speaker, N_SPECIAL};
use craftlm::eval::{evaluate_predictions, prf};
use craftlm::nn::{encode, init_encoder, EncoderConfig, ParamId};
use craftlm::world::{feasible_actions, net_change, BlockAction, Cell, Color, FeasibilityRule, GridDims, WorldState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::{all_actions, apply_filter, brute_micro, grounded_by_definition, noisy_prediction, random_world, scan_net_change};

#[test]
fn net_change_matches_cell_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    for i in 0..500 {
        let dims = if i % 2 == 0 {
            GridDims::default()
        } else {
            GridDims {
                sx: rng.random_range(1..6),
                sy: rng.random_range(1..5),
                sz: rng.random_range(1..6),
            }
        };
        let (da, db) = (rng.random_range(0.0..0.4), rng.random_range(0.0..0.4));
        let a = random_world(&mut rng, dims, da);
        let b = random_world(&mut rng, dims, db);
        let got = net_change(&a, &b).unwrap();
        assert_eq!(got, scan_net_change(&a, &b), "pair {i}");
        assert_eq!(a.replay(&got, FeasibilityRule::Unrestricted).unwrap(), b);
    }
}

#[test]
fn feasible_actions_match_exhaustive_filter() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for i in 0..100 {
        let dims = GridDims {
            sx: rng.random_range(1..7),
            sy: rng.random_range(1..5),
            sz: rng.random_range(1..7),
        };
        let density = rng.random_range(0.0..0.5);
        let w = random_world(&mut rng, dims, density);
        for rule in [FeasibilityRule::Grounded, FeasibilityRule::Unrestricted] {
            let filtered = apply_filter(&w, rule);
            assert_eq!(feasible_actions(&w, rule), filtered, "world {i} {rule:?}");

            let by_definition: BTreeSet<_> = all_actions(&w)
                .into_iter()
                .filter(|a| match a {
                    BlockAction::Remove { cell } => w.is_occupied(*cell),
                    BlockAction::Place { cell, .. } => {
                        !w.is_occupied(*cell) && (rule == FeasibilityRule::Unrestricted || grounded_by_definition(&w, *cell))
                    }
                })
                .collect();
            assert_eq!(filtered, by_definition, "world {i} {rule:?}");
        }
    }
}

#[test]
fn micro_metrics_match_brute_force() {
    let eps = synth_corpus(11, 60, GridDims::default());
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut predictions: HashMap<(String, usize), Vec<BlockAction>> = HashMap::new();
    let report = evaluate_predictions(&eps, |ep, t| {
        let p = noisy_prediction(&mut rng, &ep.turns[t].actions);
        predictions.insert((ep.id.clone(), t), p.clone());
        Ok(p)
    })
    .unwrap();

    let (tp, fp, fn_, rows) = brute_micro(&eps, &predictions);
    assert_eq!(report.turns, rows);
    assert_eq!((report.totals.tp, report.totals.fp, report.totals.fn_), (tp, fp, fn_));
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    assert!((report.precision - p).abs() < 1e-12);
    assert!((report.recall - r).abs() < 1e-12);
    assert!((report.f1 - 2.0 * p * r / (p + r)).abs() < 1e-12);

    let summed = report.rows.iter().fold((0, 0, 0), |acc, row| {
        (acc.0 + row.counts.tp, acc.1 + row.counts.fp, acc.2 + row.counts.fn_)
    });
    assert_eq!(summed, (tp, fp, fn_));
}

#[test]
fn prf_examples() {
    let a = BlockAction::place(0, 0, 0, Color::Red);
    let b = BlockAction::remove(1, 0, 0);
    let gold: BTreeSet<_> = [a, b].into();
    let k = prf(&[a].into(), &gold);
    assert_eq!((k.precision(), k.recall()), (1.0, 0.5));
    assert!((k.f1() - 2.0 / 3.0).abs() < 1e-15);
}

fn numbers(text: &str) -> Vec<usize> {
    text.split(|c: char| !c.is_ascii_digit())
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().unwrap())
        .collect()
}

fn top(w: &WorldState, x: usize, z: usize) -> usize {
    (0..w.dims().sy)
        .rev()
        .find(|&y| w.is_occupied(Cell::new(x, y, z)))
        .map_or(0, |y| y + 1)
}

/// Reads an instruction the way a careful human would.
fn interpret(text: &str, world: &WorldState) -> Vec<BlockAction> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let color = words.iter().find_map(|w| Color::from_name(w));
    let n = numbers(text);
    if words.iter().any(|w| matches!(*w, "remove" | "delete" | "away")) {
        return vec![BlockAction::remove(n[0], n[1], n[2])];
    }
    let Some(color) = color else {
        return Vec::new();
    };
    let (x, z) = (n[0], n[1]);
    let count = if words.contains(&"two") { 2 } else { 1 };
    let y0 = top(world, x, z);
    (0..count).map(|k| BlockAction::place(x, y0 + k, z, color)).collect()
}

#[test]
fn synthetic_gold_is_recoverable_from_text() {
    let eps = synth_corpus(21, 150, GridDims::default());
    let mut checked = 0;
    for ep in &eps {
        for pair in ep.turns.chunks(2) {
            let [arch, build] = pair else { panic!("odd turn count") };
            assert_eq!((arch.speaker, build.speaker), (Speaker::Architect, Speaker::Builder));
            assert_eq!(interpret(&arch.utterance, &build.world_before), build.actions, "{}", arch.utterance);
            checked += 1;
        }
        assert_eq!(ep.target, ep.final_world());
    }
    assert!(checked > 500);
}

fn naive_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            cur.extend(ch.to_lowercase());
        } else {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[test]
fn vocab_matches_brute_force_counts() {
    let eps = synth_corpus(8, 40, GridDims::default());
    let mut counts: Vec<(String, usize)> = Vec::new();
    for t in eps.iter().flat_map(|e| &e.turns) {
        for w in naive_words(&t.utterance) {
            match counts.iter_mut().find(|(k, _)| *k == w) {
                Some(e) => e.1 += 1,
                None => counts.push((w, 1)),
            }
        }
    }
    for min_freq in [1, 3, 50] {
        let mut kept: Vec<&(String, usize)> = counts.iter().filter(|(_, n)| *n >= min_freq).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let vocab = build_vocab(&eps, min_freq);
        assert_eq!(vocab.len(), N_SPECIAL + kept.len());
        for (i, (w, _)) in kept.iter().enumerate() {
            assert_eq!(vocab.token(N_SPECIAL + i), Some(w.as_str()));
        }
    }
    let stats = corpus_stats(&eps);
    assert_eq!(stats.tokens, counts.iter().map(|c| c.1).sum::<usize>());
    assert_eq!(stats.types, counts.len());
    assert_eq!(stats.turns, eps.iter().map(|e| e.turns.len()).sum::<usize>());
}

fn empty_episodes() -> Vec<Episode> {
    Vec::new()
}

#[test]
fn stats_of_nothing() {
    let s = corpus_stats(&empty_episodes());
    assert_eq!((s.episodes, s.turns, s.tokens, s.types), (0, 0, 0, 0));
}

// Straight-line reference for a one-layer, one-head, width-2 encoder.
fn ln(x: [f64; 2], g: &[f64], b: &[f64]) -> [f64; 2] {
    let m = (x[0] + x[1]) / 2.0;
    let v = ((x[0] - m).powi(2) + (x[1] - m).powi(2)) / 2.0;
    let r = 1.0 / (v + 1e-5).sqrt();
    [(x[0] - m) * r * g[0] + b[0], (x[1] - m) * r * g[1] + b[1]]
}

fn affine(x: [f64; 2], w: &[f64], b: &[f64]) -> [f64; 2] {
    // w is row-major [in, out]
    [x[0] * w[0] + x[1] * w[2] + b[0], x[0] * w[1] + x[1] * w[3] + b[1]]
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

#[test]
fn two_dimensional_forward_matches_reference() {
    let cfg = EncoderConfig {
        n_layers: 1,
        d_model: 2,
        n_heads: 1,
        d_ff: 2,
        max_seq_len: 4,
        ..EncoderConfig::new(7)
    };
    let mut st = init_encoder(&cfg, 0).unwrap();
    // deterministic, easily inspected values
    for i in 0..st.params.len() {
        for (j, v) in st.params.get_mut(ParamId(i)).data_mut().iter_mut().enumerate() {
            *v = (((i * 31 + j * 17) % 13) as f64 - 6.0) / 10.0;
        }
    }
    let p = |name: &str| st.params.get(st.params.find(name).unwrap()).data().to_vec();
    let ids = [2usize, 5, 6];
    let (tok, pos) = (p("tok_emb"), p("pos_emb"));
    let mut x: Vec<[f64; 2]> = ids
        .iter()
        .enumerate()
        .map(|(i, &id)| [tok[id * 2] + pos[i * 2], tok[id * 2 + 1] + pos[i * 2 + 1]])
        .collect();

    let h: Vec<[f64; 2]> = x.iter().map(|&r| ln(r, &p("layer0.ln1.gain"), &p("layer0.ln1.bias"))).collect();
    let q: Vec<_> = h.iter().map(|&r| affine(r, &p("layer0.attn.wq"), &p("layer0.attn.bq"))).collect();
    let k: Vec<_> = h.iter().map(|&r| affine(r, &p("layer0.attn.wk"), &p("layer0.attn.bk"))).collect();
    let v: Vec<_> = h.iter().map(|&r| affine(r, &p("layer0.attn.wv"), &p("layer0.attn.bv"))).collect();
    let mut expected_attn = Vec::new();
    for i in 0..3 {
        let s: Vec<f64> = (0..3).map(|j| (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / 2f64.sqrt()).collect();
        let z: f64 = s.iter().map(|e| e.exp()).sum();
        let a: Vec<f64> = s.iter().map(|e| e.exp() / z).collect();
        let ctx = [(0..3).map(|j| a[j] * v[j][0]).sum(), (0..3).map(|j| a[j] * v[j][1]).sum()];
        let o = affine(ctx, &p("layer0.attn.wo"), &p("layer0.attn.bo"));
        x[i] = [x[i][0] + o[0], x[i][1] + o[1]];
        expected_attn.extend(a);
    }
    for r in x.iter_mut() {
        let h2 = ln(*r, &p("layer0.ln2.gain"), &p("layer0.ln2.bias"));
        let f = affine(h2, &p("layer0.ffn.w1"), &p("layer0.ffn.b1"));
        let f = affine([gelu(f[0]), gelu(f[1])], &p("layer0.ffn.w2"), &p("layer0.ffn.b2"));
        *r = [r[0] + f[0], r[1] + f[1]];
    }
    let hidden: Vec<[f64; 2]> = x.iter().map(|&r| ln(r, &p("final_ln.gain"), &p("final_ln.bias"))).collect();
    let ob = p("out.bias");

    let out = encode(&st, &[ids.to_vec()], &[vec![false; 3]]).unwrap();
    for i in 0..3 {
        for c in 0..2 {
            assert!((out.hidden.data()[i * 2 + c] - hidden[i][c]).abs() < 1e-12);
        }
        for w in 0..7 {
            let want = hidden[i][0] * tok[w * 2] + hidden[i][1] * tok[w * 2 + 1] + ob[w];
            assert!((out.vocab_logits.data()[i * 7 + w] - want).abs() < 1e-12);
        }
    }
    for (a, b) in out.attention[0].data().iter().zip(&expected_attn) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn zero_weights_reduce_to_normalized_embeddings() {
    // With every matrix and bias zero, each layer is the identity and the
    // output is layer-norm of the embedding sum: for a width-2 row [a, b]
    // with a > b that is close to [1, -1].
    let cfg = EncoderConfig {
        n_layers: 1,
        d_model: 2,
        n_heads: 1,
        d_ff: 2,
        max_seq_len: 2,
        ..EncoderConfig::new(6)
    };
    let mut st = init_encoder(&cfg, 0).unwrap();
    for i in 0..st.params.len() {
        let name = st.params.name(ParamId(i)).to_string();
        let t = st.params.get_mut(ParamId(i));
        if name.ends_with("gain") {
            continue;
        }
        t.data_mut().fill(0.0);
    }
    let tok = st.params.find("tok_emb").unwrap();
    st.params.get_mut(tok).data_mut()[5 * 2..5 * 2 + 2].copy_from_slice(&[3.0, 1.0]);
    let out = encode(&st, &[vec![5, 5]], &[vec![false, false]]).unwrap();
    let expected = 1.0 / (1.0f64 + 1e-5).sqrt();
    for row in out.hidden.data().chunks(2) {
        assert!((row[0] - expected).abs() < 1e-12);
        assert!((row[1] + expected).abs() < 1e-12);
    }
    // logit of token 5 = [e, -e] . [3, 1]
    assert!((out.vocab_logits.data()[5] - 2.0 * expected).abs() < 1e-12);
}
