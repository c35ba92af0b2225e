//! Pre-LayerNorm transformer encoder with learned position embeddings and an
//! output projection that is tied to the token embedding unless configured
//! otherwise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tape::{Tape, Var};
use super::{NnError, ParamId, ParamSet, Tensor};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub tied_output: bool,
}

impl EncoderConfig {
    /// Toy defaults: 2 layers, width 64, 4 heads, FFN 128, 64 positions.
    pub fn new(vocab_size: usize) -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ff: 128,
            max_seq_len: 64,
            vocab_size,
            dropout: 0.0,
            tied_output: true,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let counts = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(NnError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(NnError::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NnError::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("n_layers".into(), self.n_layers.to_string()),
            ("d_model".into(), self.d_model.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("d_ff".into(), self.d_ff.to_string()),
            ("max_seq_len".into(), self.max_seq_len.to_string()),
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("tied_output".into(), self.tied_output.to_string()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, NnError> {
        fn get<T: std::str::FromStr>(pairs: &[(String, String)], key: &str) -> Result<T, NnError> {
            let raw = pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v)
                .ok_or_else(|| NnError::Format(format!("missing config key {key}")))?;
            raw.parse()
                .map_err(|_| NnError::Format(format!("bad value {raw:?} for {key}")))
        }
        let cfg = Self {
            n_layers: get(pairs, "n_layers")?,
            d_model: get(pairs, "d_model")?,
            n_heads: get(pairs, "n_heads")?,
            d_ff: get(pairs, "d_ff")?,
            max_seq_len: get(pairs, "max_seq_len")?,
            vocab_size: get(pairs, "vocab_size")?,
            dropout: get(pairs, "dropout")?,
            tied_output: get(pairs, "tied_output")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerIds {
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Positions of the encoder tensors inside a [`ParamSet`]. Encoder tensors
/// always come first, so the same layout serves a model that appends its own
/// parameters after them.
#[derive(Debug, Clone)]
pub struct EncoderLayout {
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_gain: ParamId,
    pub final_bias: ParamId,
    pub out_weight: Option<ParamId>,
    pub out_bias: ParamId,
    pub n_tensors: usize,
}

enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Tensor names, shapes and initializers in storage order.
fn tensor_specs(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
    let mut specs = vec![
        ("tok_emb".to_string(), vec![v, d], Init::Normal),
        ("pos_emb".to_string(), vec![cfg.max_seq_len, d], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        specs.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Normal),
            (p("attn.bq"), vec![d], Init::Zeros),
            (p("attn.wk"), vec![d, d], Init::Normal),
            (p("attn.bk"), vec![d], Init::Zeros),
            (p("attn.wv"), vec![d, d], Init::Normal),
            (p("attn.bv"), vec![d], Init::Zeros),
            (p("attn.wo"), vec![d, d], Init::Normal),
            (p("attn.bo"), vec![d], Init::Zeros),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("ffn.w1"), vec![d, f], Init::Normal),
            (p("ffn.b1"), vec![f], Init::Zeros),
            (p("ffn.w2"), vec![f, d], Init::Normal),
            (p("ffn.b2"), vec![d], Init::Zeros),
        ]);
    }
    specs.push(("final_ln.gain".to_string(), vec![d], Init::Ones));
    specs.push(("final_ln.bias".to_string(), vec![d], Init::Zeros));
    if !cfg.tied_output {
        specs.push(("out.weight".to_string(), vec![v, d], Init::Normal));
    }
    specs.push(("out.bias".to_string(), vec![v], Init::Zeros));
    specs
}

impl EncoderLayout {
    pub fn new(cfg: &EncoderConfig) -> Self {
        let mut next = 0;
        let mut id = || {
            next += 1;
            ParamId(next - 1)
        };
        let tok_emb = id();
        let pos_emb = id();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerIds {
                ln1_gain: id(),
                ln1_bias: id(),
                wq: id(),
                bq: id(),
                wk: id(),
                bk: id(),
                wv: id(),
                bv: id(),
                wo: id(),
                bo: id(),
                ln2_gain: id(),
                ln2_bias: id(),
                w1: id(),
                b1: id(),
                w2: id(),
                b2: id(),
            })
            .collect();
        let final_gain = id();
        let final_bias = id();
        let out_weight = (!cfg.tied_output).then(&mut id);
        let out_bias = id();
        Self {
            tok_emb,
            pos_emb,
            layers,
            final_gain,
            final_bias,
            out_weight,
            out_bias,
            n_tensors: next,
        }
    }
}

/// Encoder parameters together with the configuration that shapes them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

impl EncoderState {
    pub fn layout(&self) -> EncoderLayout {
        EncoderLayout::new(&self.config)
    }

    pub fn n_values(&self) -> usize {
        self.params.n_values()
    }

    /// Zero-filled parameters with the layout `config` implies.
    pub fn skeleton(config: &EncoderConfig) -> ParamSet {
        let mut params = ParamSet::new();
        for (name, shape, _) in tensor_specs(config) {
            params.push(name, Tensor::zeros(&shape));
        }
        params
    }
}

/// Weights and embeddings ~ N(0, 0.02²), layer-norm gains 1, biases 0.
pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<EncoderState, NnError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut params = ParamSet::new();
    for (name, shape, init) in tensor_specs(config) {
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            Init::Ones => vec![1.0; n],
            Init::Zeros => vec![0.0; n],
        };
        params.push(name, Tensor::from_vec(&shape, data)?);
    }
    Ok(EncoderState {
        config: config.clone(),
        params,
    })
}

/// Graph handles produced by [`forward`].
pub struct Forward {
    /// Final layer-normed hidden states, `[s, d_model]`.
    pub hidden: Var,
    /// One attention node per layer; see [`Tape::attention_probs`].
    pub attention: Vec<Var>,
}

fn dropout_mask(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - p);
    (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect()
}

pub fn check_ids(config: &EncoderConfig, ids: &[usize]) -> Result<(), NnError> {
    if ids.len() > config.max_seq_len {
        return Err(NnError::SequenceTooLong {
            len: ids.len(),
            max: config.max_seq_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(NnError::IdOutOfRange {
            id,
            vocab_size: config.vocab_size,
        });
    }
    Ok(())
}

/// Records the encoder forward pass of one sequence on `tape`.
///
/// `key_mask[j] == false` marks position `j` as padding. Dropout is applied
/// only when an RNG is supplied and the configured rate is positive.
pub fn forward(
    config: &EncoderConfig,
    layout: &EncoderLayout,
    tape: &mut Tape,
    ids: &[usize],
    key_mask: Option<&[bool]>,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<Forward, NnError> {
    check_ids(config, ids)?;
    let s = ids.len();
    let d = config.d_model;
    let p = config.dropout;
    let mut drop = |tape: &mut Tape, v: Var| -> Var {
        match dropout_rng.as_deref_mut() {
            Some(rng) if p > 0.0 => {
                let mask = dropout_mask(rng, s * d, p);
                tape.dropout(v, mask)
            }
            _ => v,
        }
    };
    let tok = tape.param(layout.tok_emb);
    let pos = tape.param(layout.pos_emb);
    let te = tape.rows(tok, ids.to_vec());
    let pe = tape.rows(pos, (0..s).collect());
    let x0 = tape.add(te, pe);
    let mut x = drop(tape, x0);
    let mut attention = Vec::with_capacity(layout.layers.len());
    for l in &layout.layers {
        let (g1, b1) = (tape.param(l.ln1_gain), tape.param(l.ln1_bias));
        let h = tape.layer_norm(x, g1, b1);
        let proj = |tape: &mut Tape, w: ParamId, b: ParamId| {
            let (w, b) = (tape.param(w), tape.param(b));
            let y = tape.matmul(h, w);
            tape.add_row(y, b)
        };
        let q = proj(tape, l.wq, l.bq);
        let k = proj(tape, l.wk, l.bk);
        let v = proj(tape, l.wv, l.bv);
        let a = tape.attention(q, k, v, config.n_heads, key_mask.map(<[bool]>::to_vec));
        attention.push(a);
        let (wo, bo) = (tape.param(l.wo), tape.param(l.bo));
        let o = tape.matmul(a, wo);
        let o = tape.add_row(o, bo);
        let o = drop(tape, o);
        x = tape.add(x, o);

        let (g2, b2) = (tape.param(l.ln2_gain), tape.param(l.ln2_bias));
        let h2 = tape.layer_norm(x, g2, b2);
        let (w1, bb1) = (tape.param(l.w1), tape.param(l.b1));
        let f = tape.matmul(h2, w1);
        let f = tape.add_row(f, bb1);
        let f = tape.gelu(f);
        let (w2, bb2) = (tape.param(l.w2), tape.param(l.b2));
        let f = tape.matmul(f, w2);
        let f = tape.add_row(f, bb2);
        let f = drop(tape, f);
        x = tape.add(x, f);
    }
    let (gf, bf) = (tape.param(layout.final_gain), tape.param(layout.final_bias));
    let hidden = tape.layer_norm(x, gf, bf);
    Ok(Forward { hidden, attention })
}

/// Vocabulary logits for the given hidden rows.
pub fn vocab_logits(layout: &EncoderLayout, tape: &mut Tape, hidden_rows: Var) -> Var {
    let w = tape.param(layout.out_weight.unwrap_or(layout.tok_emb));
    let b = tape.param(layout.out_bias);
    let l = tape.matmul_bt(hidden_rows, w);
    tape.add_row(l, b)
}

#[derive(Debug, Clone)]
pub struct EncodeOutput {
    /// `[batch, seq, d_model]`
    pub hidden: Tensor,
    /// `[batch, seq, vocab]`
    pub vocab_logits: Tensor,
    /// Per layer, `[batch, heads, seq, seq]`.
    pub attention: Vec<Tensor>,
}

/// Runs a padded batch through the encoder. `pad_mask[b][i]` is `true` where
/// position `i` of row `b` is padding; padded keys receive no attention.
pub fn encode(state: &EncoderState, batch: &[Vec<usize>], pad_mask: &[Vec<bool>]) -> Result<EncodeOutput, NnError> {
    let cfg = &state.config;
    let layout = state.layout();
    let b = batch.len();
    let s = batch.first().map_or(0, Vec::len);
    if pad_mask.len() != b || batch.iter().zip(pad_mask).any(|(r, m)| r.len() != s || m.len() != s) {
        return Err(NnError::ShapeMismatch("batch rows and pad mask must share one length".into()));
    }
    let (d, v, h) = (cfg.d_model, cfg.vocab_size, cfg.n_heads);
    let mut hidden = Vec::with_capacity(b * s * d);
    let mut logits = Vec::with_capacity(b * s * v);
    let mut attn = vec![Vec::with_capacity(b * h * s * s); cfg.n_layers];
    for (ids, pads) in batch.iter().zip(pad_mask) {
        let mut tape = Tape::new(&state.params);
        let keep: Vec<bool> = pads.iter().map(|p| !p).collect();
        let fw = forward(cfg, &layout, &mut tape, ids, Some(&keep), None)?;
        hidden.extend_from_slice(tape.value(fw.hidden).data());
        let lg = vocab_logits(&layout, &mut tape, fw.hidden);
        logits.extend_from_slice(tape.value(lg).data());
        for (dst, &a) in attn.iter_mut().zip(&fw.attention) {
            dst.extend_from_slice(tape.attention_probs(a).expect("attention node"));
        }
    }
    Ok(EncodeOutput {
        hidden: Tensor::from_vec(&[b, s, d], hidden)?,
        vocab_logits: Tensor::from_vec(&[b, s, v], logits)?,
        attention: attn
            .into_iter()
            .map(|a| Tensor::from_vec(&[b, h, s, s], a))
            .collect::<Result<_, _>>()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn closed_form_count(l: usize, d: usize, f: usize, v: usize, s: usize, tied: bool) -> usize {
        let per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d);
        v * d + s * d + l * per_layer + 2 * d + v + if tied { 0 } else { v * d }
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let cfg = EncoderConfig::new(100);
        let a = init_encoder(&cfg, 9).unwrap();
        let b = init_encoder(&cfg, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_encoder(&cfg, 10).unwrap());
        assert_eq!(a.params.get(a.layout().tok_emb).shape(), &[100, 64]);
        assert_eq!(a.n_values(), closed_form_count(2, 64, 128, 100, 64, true));
        assert_eq!(a.n_values(), 77_668);
        let untied = EncoderConfig {
            tied_output: false,
            ..cfg
        };
        let u = init_encoder(&untied, 9).unwrap();
        assert_eq!(u.n_values(), closed_form_count(2, 64, 128, 100, 64, false));
        assert_eq!(u.layout().n_tensors, u.params.len());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = EncoderConfig::new(10);
        cfg.n_heads = 3;
        assert!(init_encoder(&cfg, 0).is_err());
        let mut cfg = EncoderConfig::new(0);
        cfg.vocab_size = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn encode_errors() {
        let mut cfg = EncoderConfig::new(10);
        cfg.max_seq_len = 4;
        let st = init_encoder(&cfg, 1).unwrap();
        let err = encode(&st, &[vec![2, 10, 3]], &[vec![false; 3]]).unwrap_err();
        assert!(matches!(err, NnError::IdOutOfRange { id: 10, .. }));
        let err = encode(&st, &[vec![2; 5]], &[vec![false; 5]]).unwrap_err();
        assert!(matches!(err, NnError::SequenceTooLong { len: 5, max: 4 }));
    }

    #[test]
    fn pairs_round_trip() {
        let cfg = EncoderConfig {
            dropout: 0.125,
            ..EncoderConfig::new(37)
        };
        assert_eq!(EncoderConfig::from_pairs(&cfg.to_pairs()).unwrap(), cfg);
    }
}
