//! Masked language modeling: masking policy, objective, learning-rate
//! schedule and the (domain-adaptive) training loop.

use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::corpus::{tokenize, utterances, Episode, TokenId, TokenSeq, Vocab, MASK, N_SPECIAL};
use crate::nn::encoder::{forward, vocab_logits, EncoderLayout};
use crate::nn::{EncoderState, NnError, Optimizer, OptimizerKind, ParamSet, Tape, Tensor};

#[derive(Debug, Error)]
pub enum MlmError {
    #[error("no training text with maskable tokens")]
    EmptyCorpus,
    #[error("batch contains no masked positions")]
    NoMaskedPositions,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("vocabulary of {vocab} tokens does not match encoder vocab_size {encoder}")]
    VocabMismatch { vocab: usize, encoder: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskingMode {
    /// Corruption depends on (seed, sequence index) only.
    Static,
    /// Corruption is redrawn every epoch.
    #[default]
    Dynamic,
}

impl fmt::Display for MaskingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskingMode::Static => "static",
            MaskingMode::Dynamic => "dynamic",
        })
    }
}

impl FromStr for MaskingMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "static" => Ok(MaskingMode::Static),
            "dynamic" => Ok(MaskingMode::Dynamic),
            other => Err(format!("unknown masking mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskingConfig {
    pub rate: f64,
    pub mode: MaskingMode,
    pub mask_frac: f64,
    pub random_frac: f64,
    pub keep_frac: f64,
    pub seed: u64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            rate: 0.15,
            mode: MaskingMode::Dynamic,
            mask_frac: 0.8,
            random_frac: 0.1,
            keep_frac: 0.1,
            seed: 0,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<(), MlmError> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(MlmError::InvalidConfig(format!("masking rate {} outside [0, 1]", self.rate)));
        }
        let parts = [self.mask_frac, self.random_frac, self.keep_frac];
        if parts.iter().any(|p| *p < 0.0) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(MlmError::InvalidConfig(format!(
                "corruption split {parts:?} must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

/// One corrupted sequence. `labels[i]` is `Some(original)` exactly on the
/// masked set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedRow {
    pub input_ids: Vec<TokenId>,
    pub labels: Vec<Option<TokenId>>,
    /// Selected positions, ascending.
    pub masked: Vec<usize>,
}

/// `round(rate * k)`, halves rounded up. The small slack absorbs the binary
/// representation error of rates like 0.15.
pub fn masked_count(k: usize, rate: f64) -> usize {
    ((rate * k as f64) + 0.5 + 1e-9).floor() as usize
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub(crate) fn stream_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5eed, |acc, &p| splitmix(acc ^ splitmix(p)))
}

const STATIC_EPOCH_TAG: u64 = u64::MAX;

/// Corrupts one sequence.
///
/// Randomness comes from `(config.seed, seq_index)` in static mode and from
/// `(config.seed, seq_index, epoch)` in dynamic mode.
pub fn mask_tokens(ids: &[TokenId], config: &MaskingConfig, seq_index: u64, epoch: u64, vocab_size: usize) -> MaskedRow {
    let epoch_part = match config.mode {
        MaskingMode::Static => STATIC_EPOCH_TAG,
        MaskingMode::Dynamic => epoch,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[config.seed, seq_index, epoch_part]));
    let maskable: Vec<usize> = (0..ids.len()).filter(|&i| !Vocab::is_special(ids[i])).collect();
    let n = masked_count(maskable.len(), config.rate).min(maskable.len());
    let mut masked: Vec<usize> = sample(&mut rng, maskable.len(), n)
        .into_iter()
        .map(|j| maskable[j])
        .collect();
    masked.sort_unstable();
    let mut input_ids = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    for &pos in &masked {
        labels[pos] = Some(ids[pos]);
        let u: f64 = rng.random();
        if u < config.mask_frac {
            input_ids[pos] = MASK;
        } else if u < config.mask_frac + config.random_frac && vocab_size > N_SPECIAL {
            input_ids[pos] = rng.random_range(N_SPECIAL..vocab_size);
        }
    }
    MaskedRow {
        input_ids,
        labels,
        masked,
    }
}

/// Mean cross-entropy over labelled positions of `[.., vocab]` logits.
pub fn mlm_loss(vocab_logits: &Tensor, labels: &[Option<TokenId>]) -> Result<f64, MlmError> {
    let v = *vocab_logits.shape().last().unwrap_or(&0);
    if v == 0 || vocab_logits.len() != labels.len() * v {
        return Err(MlmError::Nn(NnError::ShapeMismatch(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            vocab_logits.shape()
        ))));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (row, label) in vocab_logits.data().chunks_exact(v).zip(labels) {
        let Some(label) = *label else { continue };
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
        count += 1;
    }
    if count == 0 {
        return Err(MlmError::NoMaskedPositions);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub val_frac: f64,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            peak_lr: 1e-4,
            warmup_frac: 0.1,
            batch_size: 8,
            val_frac: 0.1,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MlmError> {
        let bad = |m: String| Err(MlmError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return bad(format!("peak_lr {} must be positive", self.peak_lr));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return bad(format!("warmup_frac {} outside [0, 1)", self.warmup_frac));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.val_frac) {
            return bad(format!("val_frac {} outside [0, 1)", self.val_frac));
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_frac * total_steps as f64).floor() as usize
    }
}

/// Linear warmup from 0 to `peak_lr`, then linear decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> f64 {
    if total_steps == 0 || step >= total_steps {
        return 0.0;
    }
    let warmup = config.warmup_steps(total_steps);
    if step < warmup {
        config.peak_lr * (step as f64 / warmup as f64)
    } else {
        config.peak_lr * ((total_steps - step) as f64 / (total_steps - warmup) as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the held-out split has no masked positions.
    pub val_loss: Option<f64>,
    pub mean_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub epochs: Vec<EpochStats>,
}

impl LossHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// `epoch,train_loss,val_loss,mean_lr` with one row per epoch.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,mean_lr\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", e.epoch, e.train_loss, val, e.mean_lr));
        }
        out
    }
}

struct Example {
    index: u64,
    ids: Vec<TokenId>,
}

fn examples(texts: &[&str], vocab: &Vocab, max_seq_len: usize) -> Vec<Example> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Example {
            index: i as u64,
            ids: tokenize(t, vocab, max_seq_len).ids,
        })
        .collect()
}

fn maskable_len(ids: &[TokenId]) -> usize {
    ids.iter().filter(|&&id| !Vocab::is_special(id)).count()
}

/// Summed cross-entropy and masked count over `rows`; gradients (scaled by
/// `grad_scale`) are accumulated into `grads` when given.
fn batch_loss(
    state: &EncoderState,
    layout: &EncoderLayout,
    rows: &[MaskedRow],
    grads: Option<(&mut ParamSet, f64)>,
    dropout_seed: Option<u64>,
) -> Result<(f64, usize), MlmError> {
    let mut total = 0.0;
    let mut count = 0;
    let mut grads = grads;
    for (i, row) in rows.iter().enumerate() {
        if row.masked.is_empty() {
            continue;
        }
        let mut tape = Tape::new(&state.params);
        let mut rng = dropout_seed.map(|s| ChaCha8Rng::seed_from_u64(stream_seed(&[s, i as u64])));
        let fw = forward(&state.config, layout, &mut tape, &row.input_ids, None, rng.as_mut())?;
        let picked = tape.rows(fw.hidden, row.masked.clone());
        let logits = vocab_logits(layout, &mut tape, picked);
        let labels = row.masked.iter().map(|&p| row.labels[p].expect("masked")).collect();
        let loss = tape.cross_entropy_sum(logits, labels);
        total += tape.value(loss).item();
        count += row.masked.len();
        if let Some((g, scale)) = grads.as_mut() {
            tape.backward(loss, g, *scale);
        }
    }
    Ok((total, count))
}

/// Mean masked-LM loss of `state` over `texts`, with corruption drawn as in
/// static mode (so repeated evaluations see identical batches).
pub fn evaluate_mlm(state: &EncoderState, vocab: &Vocab, texts: &[&str], mask_cfg: &MaskingConfig) -> Result<f64, MlmError> {
    let layout = state.layout();
    let static_cfg = MaskingConfig {
        mode: MaskingMode::Static,
        ..mask_cfg.clone()
    };
    let rows: Vec<MaskedRow> = examples(texts, vocab, state.config.max_seq_len)
        .iter()
        .map(|e| mask_tokens(&e.ids, &static_cfg, e.index, 0, vocab.len()))
        .collect();
    let (total, count) = batch_loss(state, &layout, &rows, None, None)?;
    if count == 0 {
        return Err(MlmError::NoMaskedPositions);
    }
    Ok(total / count as f64)
}

/// Continues masked-LM training of `encoder` on arbitrary text.
///
/// A `val_frac` share of the texts (seeded shuffle) is held out and scored
/// after every epoch. Texts too short to receive any masked position are
/// skipped. `on_epoch` sees each epoch's statistics as they are produced.
pub fn train_mlm_on_texts(
    texts: &[&str],
    vocab: &Vocab,
    encoder: &EncoderState,
    mask_cfg: &MaskingConfig,
    train_cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(EncoderState, LossHistory), MlmError> {
    mask_cfg.validate()?;
    train_cfg.validate()?;
    if vocab.len() != encoder.config.vocab_size {
        return Err(MlmError::VocabMismatch {
            vocab: vocab.len(),
            encoder: encoder.config.vocab_size,
        });
    }
    let all = examples(texts, vocab, encoder.config.max_seq_len);
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[train_cfg.seed, 0x7a1])));
    let n_val = (train_cfg.val_frac * all.len() as f64).round() as usize;
    let (val_idx, train_idx) = order.split_at(n_val.min(all.len()));
    let mut train_idx: Vec<usize> = train_idx
        .iter()
        .copied()
        .filter(|&i| masked_count(maskable_len(&all[i].ids), mask_cfg.rate) > 0)
        .collect();
    train_idx.sort_unstable();
    if train_idx.is_empty() {
        return Err(MlmError::EmptyCorpus);
    }
    let static_cfg = MaskingConfig {
        mode: MaskingMode::Static,
        ..mask_cfg.clone()
    };
    let val_rows: Vec<MaskedRow> = val_idx
        .iter()
        .map(|&i| mask_tokens(&all[i].ids, &static_cfg, all[i].index, 0, vocab.len()))
        .collect();

    let mut state = encoder.clone();
    let layout = state.layout();
    let mut opt = Optimizer::new(train_cfg.optimizer, &state.params);
    let mut grads = state.params.zeros_like();
    let batches = train_idx.len().div_ceil(train_cfg.batch_size);
    let total_steps = batches * train_cfg.epochs;
    let mut step = 0;
    let mut history = LossHistory::default();
    for epoch in 0..train_cfg.epochs {
        let mut epoch_order = train_idx.clone();
        epoch_order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[train_cfg.seed, epoch as u64])));
        let (mut loss_sum, mut loss_count, mut lr_sum) = (0.0, 0usize, 0.0);
        for chunk in epoch_order.chunks(train_cfg.batch_size) {
            let rows: Vec<MaskedRow> = chunk
                .iter()
                .map(|&i| mask_tokens(&all[i].ids, mask_cfg, all[i].index, epoch as u64, vocab.len()))
                .collect();
            let n_masked: usize = rows.iter().map(|r| r.masked.len()).sum();
            grads.fill_zero();
            let dropout_seed = stream_seed(&[train_cfg.seed, 0xd20, step as u64]);
            let (sum, count) = batch_loss(
                &state,
                &layout,
                &rows,
                Some((&mut grads, 1.0 / n_masked as f64)),
                Some(dropout_seed),
            )?;
            if !sum.is_finite() || !grads.is_finite() {
                return Err(MlmError::NonFinite { epoch, step });
            }
            let lr = lr_at(step, total_steps, train_cfg);
            opt.step(&mut state.params, &grads, lr, &[]);
            loss_sum += sum;
            loss_count += count;
            lr_sum += lr;
            step += 1;
        }
        let (vsum, vcount) = batch_loss(&state, &layout, &val_rows, None, None)?;
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / loss_count as f64,
            val_loss: (vcount > 0).then(|| vsum / vcount as f64),
            mean_lr: lr_sum / batches as f64,
        };
        if !stats.train_loss.is_finite() {
            return Err(MlmError::NonFinite { epoch, step });
        }
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok((state, history))
}

/// Domain adaptation: masked-LM training on every utterance of the corpus.
pub fn train_mlm(
    episodes: &[Episode],
    vocab: &Vocab,
    encoder: &EncoderState,
    mask_cfg: &MaskingConfig,
    train_cfg: &TrainConfig,
) -> Result<(EncoderState, LossHistory), MlmError> {
    let texts: Vec<&str> = utterances(episodes).collect();
    train_mlm_on_texts(&texts, vocab, encoder, mask_cfg, train_cfg, &mut |_| {})
}

/// Creates the base encoder by masked-LM training on generic text.
pub fn pretrain_generic(
    texts: &[String],
    vocab: &Vocab,
    encoder: &EncoderState,
    mask_cfg: &MaskingConfig,
    train_cfg: &TrainConfig,
) -> Result<(EncoderState, LossHistory), MlmError> {
    let texts: Vec<&str> = texts.iter().map(String::as_str).collect();
    train_mlm_on_texts(&texts, vocab, encoder, mask_cfg, train_cfg, &mut |_| {})
}

/// Token sequences for every utterance, for inspection and statistics.
pub fn tokenize_all(texts: &[&str], vocab: &Vocab, max_seq_len: usize) -> Vec<TokenSeq> {
    texts.iter().map(|t| tokenize(t, vocab, max_seq_len)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CLS, SEP};

    fn seq(k: usize) -> Vec<TokenId> {
        let mut ids = vec![CLS];
        ids.extend((0..k).map(|i| N_SPECIAL + i % 20));
        ids.push(SEP);
        ids
    }

    #[test]
    fn zero_rate_masks_nothing() {
        let cfg = MaskingConfig {
            rate: 0.0,
            ..Default::default()
        };
        let ids = seq(30);
        let row = mask_tokens(&ids, &cfg, 0, 0, 40);
        assert!(row.masked.is_empty());
        assert_eq!(row.input_ids, ids);
        assert!(row.labels.iter().all(Option::is_none));
    }

    #[test]
    fn fifteen_percent_of_hundred_is_fifteen() {
        let row = mask_tokens(&seq(100), &MaskingConfig::default(), 3, 0, 40);
        assert_eq!(row.masked.len(), 15);
        assert_eq!(masked_count(10, 0.15), 2);
        assert_eq!(masked_count(3, 0.15), 0);
        assert_eq!(masked_count(4, 0.15), 1);
    }

    #[test]
    fn specials_never_selected() {
        let mut ids = seq(10);
        ids.insert(3, crate::corpus::UNK);
        let cfg = MaskingConfig {
            rate: 1.0,
            ..Default::default()
        };
        let row = mask_tokens(&ids, &cfg, 0, 0, 40);
        assert_eq!(row.masked.len(), 10);
        for (i, id) in ids.iter().enumerate() {
            if Vocab::is_special(*id) {
                assert_eq!(row.input_ids[i], *id);
                assert!(row.labels[i].is_none());
            }
        }
    }

    #[test]
    fn static_and_dynamic_modes() {
        let ids = seq(100);
        let st = MaskingConfig {
            mode: MaskingMode::Static,
            ..Default::default()
        };
        assert_eq!(mask_tokens(&ids, &st, 5, 0, 40), mask_tokens(&ids, &st, 5, 57, 40));
        let dy = MaskingConfig::default();
        assert_ne!(mask_tokens(&ids, &dy, 5, 0, 40).masked, mask_tokens(&ids, &dy, 5, 57, 40).masked);
    }

    #[test]
    fn loss_examples() {
        let uniform = Tensor::zeros(&[1, 100]);
        let l = mlm_loss(&uniform, &[Some(7)]).unwrap();
        assert!((l - 100f64.ln()).abs() < 1e-12);
        let mut confident = Tensor::zeros(&[1, 10]);
        confident.data_mut()[3] = 1000.0;
        assert!(mlm_loss(&confident, &[Some(3)]).unwrap() < 1e-12);
        assert!(matches!(mlm_loss(&uniform, &[None]), Err(MlmError::NoMaskedPositions)));
        assert!(mlm_loss(&uniform, &[None, None]).is_err());
    }

    #[test]
    fn schedule_shape() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, 1000, &cfg), 0.0);
        assert_eq!(lr_at(100, 1000, &cfg), 1e-4);
        assert_eq!(lr_at(1000, 1000, &cfg), 0.0);
        assert!((lr_at(50, 1000, &cfg) - 5e-5).abs() < 1e-18);
        assert!((lr_at(550, 1000, &cfg) - 5e-5).abs() < 1e-18);
        let no_warmup = TrainConfig {
            warmup_frac: 0.0,
            ..cfg
        };
        assert_eq!(lr_at(0, 10, &no_warmup), 1e-4);
    }

    #[test]
    fn config_validation() {
        assert!(MaskingConfig {
            mask_frac: 0.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(MaskingConfig {
            rate: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            epochs: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            warmup_frac: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn history_csv_has_one_row_per_epoch() {
        let h = LossHistory {
            epochs: (0..3)
                .map(|e| EpochStats {
                    epoch: e,
                    train_loss: 1.5,
                    val_loss: if e == 1 { None } else { Some(2.0) },
                    mean_lr: 1e-4,
                })
                .collect(),
        };
        let csv = h.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0], "epoch,train_loss,val_loss,mean_lr");
        assert_eq!(lines[2], "1,1.5,,0.0001");
    }
}
