//! The builder model: a dialogue encoder fused with a world embedding,
//! scoring every (cell, place-color | remove) action plus STOP.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::corpus::{tokenize, Episode, Speaker, TokenId, Vocab};
use crate::mlm::{lr_at, stream_seed, EpochStats, LossHistory, MlmError, TrainConfig};
use crate::nn::checkpoint::{check_layout, read_raw, write_raw, CheckpointKind, RawCheckpoint};
use crate::nn::encoder::{forward, EncoderLayout, INIT_STD};
use crate::nn::{init_encoder, load_checkpoint, EncoderConfig, EncoderState, NnError, Optimizer, ParamId, ParamSet, Tape, Tensor, Var};
use crate::world::{BlockAction, Color, FeasibilityRule, GridDims, WorldError, WorldState};

/// Six place-colors and one removal per cell.
pub const N_KINDS: usize = 7;
pub const REMOVE_KIND: usize = 6;
/// Action counts at or above this share one embedding row.
pub const MAX_COUNT: usize = 8;
pub const DEFAULT_HISTORY: usize = 3;

#[derive(Debug, Error)]
pub enum BuilderError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Mlm(#[from] MlmError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("vocabulary of {vocab} tokens does not match encoder vocab_size {encoder}")]
    VocabMismatch { vocab: usize, encoder: usize },
    #[error("no builder turns to train on")]
    EmptyCorpus,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("episode {episode}, turn {turn}: gold actions do not replay: {source}")]
    GoldReplay { episode: String, turn: usize, source: WorldError },
}

/// One output of the action head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Decision {
    Act(BlockAction),
    Stop,
}

/// Enumeration of the action head: cells in `(y, z, x)` order, each with
/// Place(red..purple) then Remove, and STOP last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionSpace {
    pub dims: GridDims,
}

impl ActionSpace {
    pub fn new(dims: GridDims) -> Self {
        Self { dims }
    }

    pub fn len(&self) -> usize {
        self.dims.n_cells() * N_KINDS + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn stop_index(&self) -> usize {
        self.dims.n_cells() * N_KINDS
    }

    pub fn index_of(&self, decision: Decision) -> Result<usize, WorldError> {
        match decision {
            Decision::Stop => Ok(self.stop_index()),
            Decision::Act(a) => {
                let cell = a.cell();
                if !self.dims.contains(cell) {
                    return Err(WorldError::OutOfBounds {
                        x: cell.x as i64,
                        y: cell.y as i64,
                        z: cell.z as i64,
                        dims: self.dims,
                    });
                }
                let kind = a.color().map_or(REMOVE_KIND, Color::index);
                Ok(self.dims.index_of(cell) * N_KINDS + kind)
            }
        }
    }

    pub fn decision_at(&self, index: usize) -> Option<Decision> {
        if index == self.stop_index() {
            return Some(Decision::Stop);
        }
        if index > self.stop_index() {
            return None;
        }
        let cell = self.dims.cell_at(index / N_KINDS);
        Some(Decision::Act(match Color::from_index(index % N_KINDS) {
            Some(color) => BlockAction::Place { cell, color },
            None => BlockAction::Remove { cell },
        }))
    }

    /// `true` for every index whose action is applicable to `world`; STOP is
    /// always allowed.
    pub fn feasible_mask(&self, world: &WorldState, rule: FeasibilityRule) -> Vec<bool> {
        let mut mask = vec![false; self.len()];
        for (i, cell) in self.dims.cells().enumerate() {
            let base = i * N_KINDS;
            if world.is_occupied(cell) {
                mask[base + REMOVE_KIND] = true;
            } else if world.can_place(cell, rule) {
                mask[base..base + REMOVE_KIND].fill(true);
            }
        }
        mask[self.stop_index()] = true;
        mask
    }
}

/// Model input for one builder turn.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueContext {
    /// Speaker-tagged preceding turns, newest first.
    pub text: String,
    pub ids: Vec<TokenId>,
    pub world: WorldState,
}

/// The `history` turns before `turn`, newest first, each prefixed with its
/// speaker tag.
pub fn context_text(episode: &Episode, turn: usize, history: usize) -> String {
    episode.turns[..turn.min(episode.turns.len())]
        .iter()
        .rev()
        .take(history)
        .map(|t| format!("{} {}", t.speaker.tag(), t.utterance))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn encode_context(episode: &Episode, turn: usize, vocab: &Vocab, history: usize, max_seq_len: usize) -> DialogueContext {
    let text = context_text(episode, turn, history);
    let ids = tokenize(&text, vocab, max_seq_len).ids;
    let world = episode
        .turns
        .get(turn)
        .map(|t| t.world_before.clone())
        .unwrap_or_else(|| episode.final_world());
    DialogueContext { text, ids, world }
}

#[derive(Debug, Clone, Copy)]
struct HeadIds {
    world: ParamId,
    count: ParamId,
    fuse_w: ParamId,
    fuse_b: ParamId,
    factors: ParamId,
    bias: ParamId,
}

fn head_specs(d: usize, dims: GridDims) -> Vec<(&'static str, Vec<usize>, bool)> {
    let cells = dims.n_cells();
    vec![
        ("head.world", vec![cells * N_KINDS, d], true),
        ("head.count", vec![MAX_COUNT + 1, d], true),
        ("head.fuse.w", vec![d, d], true),
        ("head.fuse.b", vec![d], false),
        ("head.factors", vec![dims.sx + dims.sy + dims.sz + N_KINDS + 1, d], true),
        ("head.bias", vec![cells * N_KINDS + 1], false),
    ]
}

/// Encoder tensors followed by the `head.*` tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct BuilderModel {
    pub encoder: EncoderConfig,
    pub dims: GridDims,
    pub history: usize,
    pub params: ParamSet,
}

impl BuilderModel {
    /// Attaches a freshly initialized head to `encoder`.
    pub fn new(encoder: &EncoderState, dims: GridDims, history: usize, seed: u64) -> Result<Self, BuilderError> {
        dims.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0x4ead]));
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut params = encoder.params.clone();
        for (name, shape, random) in head_specs(encoder.config.d_model, dims) {
            let n: usize = shape.iter().product();
            let data = if random {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else {
                vec![0.0; n]
            };
            params.push(name, Tensor::from_vec(&shape, data)?);
        }
        Ok(Self {
            encoder: encoder.config.clone(),
            dims,
            history,
            params,
        })
    }

    pub fn action_space(&self) -> ActionSpace {
        ActionSpace::new(self.dims)
    }

    pub fn encoder_layout(&self) -> EncoderLayout {
        EncoderLayout::new(&self.encoder)
    }

    fn head(&self) -> HeadIds {
        let n = self.encoder_layout().n_tensors;
        HeadIds {
            world: ParamId(n),
            count: ParamId(n + 1),
            fuse_w: ParamId(n + 2),
            fuse_b: ParamId(n + 3),
            factors: ParamId(n + 4),
            bias: ParamId(n + 5),
        }
    }

    /// Number of leading tensors that belong to the encoder.
    pub fn n_encoder_tensors(&self) -> usize {
        self.encoder_layout().n_tensors
    }

    /// A copy of the encoder part.
    pub fn encoder_state(&self) -> EncoderState {
        let mut params = ParamSet::new();
        for (_, name, t) in self.params.iter().take(self.n_encoder_tensors()) {
            params.push(name, t.clone());
        }
        EncoderState {
            config: self.encoder.clone(),
            params,
        }
    }

    /// CLS hidden state of the context text, `[1, d]`.
    fn record_text(&self, tape: &mut Tape, ids: &[TokenId]) -> Result<Var, BuilderError> {
        let fw = forward(&self.encoder, &self.encoder_layout(), tape, ids, None, None)?;
        Ok(tape.rows(fw.hidden, vec![0]))
    }

    /// Logits `[1, |A|]` for one decoding step.
    fn record_step(&self, tape: &mut Tape, text: Var, world: &WorldState, count: usize) -> Var {
        let h = self.head();
        let table = tape.param(h.world);
        let rows = (0..self.dims.n_cells())
            .map(|i| i * N_KINDS + world.get_index(i).map_or(REMOVE_KIND, Color::index))
            .collect();
        let w = tape.gather_sum(table, rows);
        let counts = tape.param(h.count);
        let c = tape.rows(counts, vec![count.min(MAX_COUNT)]);
        let z = tape.add(text, w);
        let z = tape.add(z, c);
        let (fw, fb) = (tape.param(h.fuse_w), tape.param(h.fuse_b));
        let m = tape.matmul(z, fw);
        let m = tape.add_row(m, fb);
        let m = tape.gelu(m);
        let fused = tape.add(z, m);
        let factors = tape.param(h.factors);
        let u = tape.matmul_bt(fused, factors);
        let grid = tape.factor_grid(u, [self.dims.sx, self.dims.sy, self.dims.sz, N_KINDS]);
        let bias = tape.param(h.bias);
        tape.add(grid, bias)
    }

    fn check_context(&self, ctx: &DialogueContext) -> Result<(), BuilderError> {
        if ctx.world.dims() != self.dims {
            return Err(WorldError::DimensionMismatch(ctx.world.dims(), self.dims).into());
        }
        Ok(())
    }

    /// Scores of every action (and STOP) given the context, a world and the
    /// number of actions already taken this turn.
    pub fn action_logits(&self, ctx: &DialogueContext, world: &WorldState, count: usize) -> Result<Tensor, BuilderError> {
        self.check_context(ctx)?;
        let mut tape = Tape::new(&self.params);
        let text = self.record_text(&mut tape, &ctx.ids)?;
        let logits = self.record_step(&mut tape, text, world, count);
        Ok(tape.value(logits).clone())
    }

    /// Teacher-forced loss of one turn: summed cross-entropy over every gold
    /// action followed by STOP. Returns the loss node and the step count.
    ///
    /// When `text` is given it replaces the encoder pass (frozen encoder).
    fn record_turn(
        &self,
        tape: &mut Tape,
        ids: &[TokenId],
        text: Option<&Tensor>,
        world: &WorldState,
        gold: &[BlockAction],
    ) -> Result<(Var, usize), BuilderError> {
        let space = self.action_space();
        let text = match text {
            Some(t) => tape.input(t.clone()),
            None => self.record_text(tape, ids)?,
        };
        let mut state = world.clone();
        let mut losses = Vec::with_capacity(gold.len() + 1);
        for (count, &a) in gold.iter().enumerate() {
            let logits = self.record_step(tape, text, &state, count);
            losses.push(tape.cross_entropy_sum(logits, vec![space.index_of(Decision::Act(a))?]));
            state.apply_mut(a, FeasibilityRule::Unrestricted)?;
        }
        let logits = self.record_step(tape, text, &state, gold.len());
        losses.push(tape.cross_entropy_sum(logits, vec![space.stop_index()]));
        let steps = losses.len();
        Ok((tape.sum(losses), steps))
    }

    /// Mean per-step loss of a turn and its gradient, for checking and tests.
    pub fn turn_loss(&self, params: &ParamSet, ctx: &DialogueContext, gold: &[BlockAction]) -> Result<(f64, ParamSet), BuilderError> {
        self.check_context(ctx)?;
        let mut tape = Tape::new(params);
        let (loss, steps) = self.record_turn(&mut tape, &ctx.ids, None, &ctx.world, gold)?;
        let mut grads = params.zeros_like();
        tape.backward(loss, &mut grads, 1.0 / steps as f64);
        Ok((tape.value(loss).item() / steps as f64, grads))
    }

    fn text_features(&self, ids: &[TokenId]) -> Result<Tensor, BuilderError> {
        let mut tape = Tape::new(&self.params);
        let v = self.record_text(&mut tape, ids)?;
        Ok(tape.value(v).clone())
    }

    fn config_pairs(&self) -> Vec<(String, String)> {
        let mut pairs = self.encoder.to_pairs();
        pairs.extend([
            ("builder.sx".into(), self.dims.sx.to_string()),
            ("builder.sy".into(), self.dims.sy.to_string()),
            ("builder.sz".into(), self.dims.sz.to_string()),
            ("builder.history".into(), self.history.to_string()),
        ]);
        pairs
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub max_actions: usize,
    pub rule: FeasibilityRule,
    /// Restrict the argmax to applicable actions.
    pub mask_infeasible: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_actions: 10,
            rule: FeasibilityRule::Grounded,
            mask_infeasible: true,
        }
    }
}

/// Greedy decoding: repeatedly take the best action, apply it, and stop at
/// STOP, at `max_actions`, or (without masking) at an inapplicable action.
pub fn decode_actions(model: &BuilderModel, ctx: &DialogueContext, cfg: &DecodeConfig) -> Result<Vec<BlockAction>, BuilderError> {
    model.check_context(ctx)?;
    let space = model.action_space();
    let text = model.text_features(&ctx.ids)?;
    let mut world = ctx.world.clone();
    let mut out = Vec::new();
    while out.len() < cfg.max_actions {
        let mut tape = Tape::new(&model.params);
        let t = tape.input(text.clone());
        let logits = model.record_step(&mut tape, t, &world, out.len());
        let scores = tape.value(logits).data();
        let mask = cfg.mask_infeasible.then(|| space.feasible_mask(&world, cfg.rule));
        let best = scores
            .iter()
            .enumerate()
            .filter(|(i, _)| mask.as_ref().is_none_or(|m| m[*i]))
            .fold(None, |acc: Option<(usize, f64)>, (i, &s)| match acc {
                Some((_, bs)) if bs >= s => acc,
                _ => Some((i, s)),
            })
            .map(|(i, _)| i)
            .unwrap_or(space.stop_index());
        match space.decision_at(best) {
            Some(Decision::Act(a)) => {
                if world.apply_mut(a, cfg.rule).is_err() {
                    break;
                }
                out.push(a);
            }
            _ => break,
        }
    }
    Ok(out)
}

/// Where the builder's encoder weights come from.
#[derive(Debug, Clone)]
pub enum EncoderInit {
    /// Random initialization with the given configuration.
    Scratch(EncoderConfig),
    /// An encoder already in memory.
    Pretrained(EncoderState),
    /// An encoder checkpoint file.
    FromCheckpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuilderTrainConfig {
    pub train: TrainConfig,
    pub history: usize,
    pub freeze_encoder: bool,
}

impl Default for BuilderTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 20,
                peak_lr: 5e-4,
                ..TrainConfig::default()
            },
            history: DEFAULT_HISTORY,
            freeze_encoder: false,
        }
    }
}

/// One supervised builder turn.
#[derive(Debug, Clone)]
pub struct TurnExample {
    pub episode: usize,
    pub turn: usize,
    pub context: DialogueContext,
    pub gold: Vec<BlockAction>,
}

/// Every builder turn of the corpus with its context and gold actions.
pub fn builder_examples(episodes: &[Episode], vocab: &Vocab, history: usize, max_seq_len: usize) -> Vec<TurnExample> {
    let mut out = Vec::new();
    for (e, ep) in episodes.iter().enumerate() {
        for (t, turn) in ep.turns.iter().enumerate() {
            if turn.speaker == Speaker::Builder {
                out.push(TurnExample {
                    episode: e,
                    turn: t,
                    context: encode_context(ep, t, vocab, history, max_seq_len),
                    gold: turn.actions.clone(),
                });
            }
        }
    }
    out
}

fn resolve_encoder(init: EncoderInit, seed: u64) -> Result<EncoderState, BuilderError> {
    Ok(match init {
        EncoderInit::Scratch(cfg) => init_encoder(&cfg, seed)?,
        EncoderInit::Pretrained(state) => state,
        EncoderInit::FromCheckpoint(path) => load_checkpoint(path)?.0,
    })
}

/// Trains the builder with teacher forcing on gold action prefixes.
pub fn train_builder(
    episodes: &[Episode],
    vocab: &Vocab,
    init: EncoderInit,
    dims: GridDims,
    cfg: &BuilderTrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<(BuilderModel, LossHistory), BuilderError> {
    let tc = &cfg.train;
    tc.validate()?;
    let encoder = resolve_encoder(init, tc.seed)?;
    if vocab.len() != encoder.config.vocab_size {
        return Err(BuilderError::VocabMismatch {
            vocab: vocab.len(),
            encoder: encoder.config.vocab_size,
        });
    }
    let mut model = BuilderModel::new(&encoder, dims, cfg.history, tc.seed)?;
    let all = builder_examples(episodes, vocab, cfg.history, encoder.config.max_seq_len);
    if all.is_empty() {
        return Err(BuilderError::EmptyCorpus);
    }
    for ex in &all {
        model.check_context(&ex.context)?;
        ex.context
            .world
            .replay(&ex.gold, FeasibilityRule::Unrestricted)
            .map_err(|source| BuilderError::GoldReplay {
                episode: episodes[ex.episode].id.clone(),
                turn: ex.turn,
                source,
            })?;
    }
    let mut order: Vec<usize> = (0..all.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[tc.seed, 0x7a1])));
    let n_val = ((tc.val_frac * all.len() as f64).round() as usize).min(all.len() - 1);
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();

    let n_enc = model.n_encoder_tensors();
    let frozen: Vec<bool> = (0..model.params.len()).map(|i| cfg.freeze_encoder && i < n_enc).collect();
    let cached: Option<Vec<Tensor>> = if cfg.freeze_encoder {
        Some(all.iter().map(|ex| model.text_features(&ex.context.ids)).collect::<Result<_, _>>()?)
    } else {
        None
    };

    let mut opt = Optimizer::new(tc.optimizer, &model.params);
    let mut grads = model.params.zeros_like();
    let batches = train_idx.len().div_ceil(tc.batch_size);
    let total_steps = batches * tc.epochs;
    let mut step = 0;
    let mut history = LossHistory::default();
    for epoch in 0..tc.epochs {
        let mut epoch_order = train_idx.clone();
        epoch_order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(&[tc.seed, epoch as u64])));
        let (mut loss_sum, mut loss_steps, mut lr_sum) = (0.0, 0usize, 0.0);
        for chunk in epoch_order.chunks(tc.batch_size) {
            let n_steps: usize = chunk.iter().map(|&i| all[i].gold.len() + 1).sum();
            grads.fill_zero();
            for &i in chunk {
                let ex = &all[i];
                let mut tape = Tape::new(&model.params);
                let text = cached.as_ref().map(|c| &c[i]);
                let (loss, steps) = model.record_turn(&mut tape, &ex.context.ids, text, &ex.context.world, &ex.gold)?;
                loss_sum += tape.value(loss).item();
                loss_steps += steps;
                tape.backward(loss, &mut grads, 1.0 / n_steps as f64);
            }
            if !loss_sum.is_finite() || !grads.is_finite() {
                return Err(BuilderError::NonFinite { epoch, step });
            }
            let lr = lr_at(step, total_steps, tc);
            opt.step(&mut model.params, &grads, lr, &frozen);
            lr_sum += lr;
            step += 1;
        }
        let mut vsum = 0.0;
        let mut vsteps = 0;
        for &i in val_idx {
            let ex = &all[i];
            let mut tape = Tape::new(&model.params);
            let text = cached.as_ref().map(|c| &c[i]);
            let (loss, steps) = model.record_turn(&mut tape, &ex.context.ids, text, &ex.context.world, &ex.gold)?;
            vsum += tape.value(loss).item();
            vsteps += steps;
        }
        let stats = EpochStats {
            epoch,
            train_loss: loss_sum / loss_steps as f64,
            val_loss: (vsteps > 0).then(|| vsum / vsteps as f64),
            mean_lr: lr_sum / batches as f64,
        };
        on_epoch(&stats);
        history.epochs.push(stats);
    }
    Ok((model, history))
}

pub fn save_builder(model: &BuilderModel, vocab: &Vocab, path: impl AsRef<Path>) -> Result<(), BuilderError> {
    if vocab.len() != model.encoder.vocab_size {
        return Err(BuilderError::VocabMismatch {
            vocab: vocab.len(),
            encoder: model.encoder.vocab_size,
        });
    }
    write_raw(
        path,
        &RawCheckpoint {
            kind: CheckpointKind::Builder,
            config: model.config_pairs(),
            vocab: vocab.clone(),
            params: model.params.clone(),
        },
    )?;
    Ok(())
}

pub fn load_builder(path: impl AsRef<Path>) -> Result<(BuilderModel, Vocab), BuilderError> {
    let raw = read_raw(path)?;
    if raw.kind != CheckpointKind::Builder {
        return Err(NnError::Format("not a builder checkpoint".into()).into());
    }
    let encoder = EncoderConfig::from_pairs(&raw.config)?;
    let get = |key: &str| -> Result<usize, NnError> {
        raw.config
            .iter()
            .find(|(k, _)| k == key)
            .and_then(|(_, v)| v.parse().ok())
            .ok_or_else(|| NnError::Format(format!("missing or bad config key {key}")))
    };
    let dims = GridDims {
        sx: get("builder.sx")?,
        sy: get("builder.sy")?,
        sz: get("builder.sz")?,
    }
    .validate()?;
    let history = get("builder.history")?;
    let mut expected = EncoderState::skeleton(&encoder);
    for (name, shape, _) in head_specs(encoder.d_model, dims) {
        expected.push(name, Tensor::zeros(&shape));
    }
    check_layout(&expected, &raw.params)?;
    if raw.vocab.len() != encoder.vocab_size {
        return Err(BuilderError::VocabMismatch {
            vocab: raw.vocab.len(),
            encoder: encoder.vocab_size,
        });
    }
    Ok((
        BuilderModel {
            encoder,
            dims,
            history,
            params: raw.params,
        },
        raw.vocab,
    ))
}
