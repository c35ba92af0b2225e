//! Collaborative-building episodes: loading, vocabulary, tokenization and a
//! deterministic synthetic generator.
//!
//! Corpus files are UTF-8 JSON lines, one episode per line:
//!
//! ```text
//! {"id":"e1","target":[[0,0,0,"red"]],"turns":[{"speaker":"architect","utterance":"put a red block at 0 0","actions":[]},
//!  {"speaker":"builder","utterance":"done","actions":[{"kind":"place","x":0,"y":0,"z":0,"color":"red"}]}]}
//! ```
//!
//! `target` is sorted by `(y, z, x)`. A removal has no `color` field.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::world::{BlockAction, Cell, Color, FeasibilityRule, GridDims, WorldError, WorldState};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const CLS: TokenId = 2;
pub const SEP: TokenId = 3;
pub const MASK: TokenId = 4;
pub const N_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

pub const DEFAULT_MAX_SEQ_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: episode {id:?} uses unknown color {color:?}")]
    UnknownColor { line: usize, id: String, color: String },
    #[error("line {line}: episode {id:?}: {source}")]
    OutOfBounds {
        line: usize,
        id: String,
        #[source]
        source: WorldError,
    },
    #[error("line {line}: episode {id:?} turn {turn}: infeasible action: {source}")]
    Infeasible {
        line: usize,
        id: String,
        turn: usize,
        #[source]
        source: WorldError,
    },
    #[error("line {line}: duplicate episode id {id:?}")]
    DuplicateId { line: usize, id: String },
    #[error("vocabulary: {0}")]
    Vocab(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Architect,
    Builder,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::Architect => "architect",
            Speaker::Builder => "builder",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub speaker: Speaker,
    pub utterance: String,
    pub actions: Vec<BlockAction>,
    /// World before this turn's actions, obtained by replaying the episode.
    pub world_before: WorldState,
}

impl Turn {
    pub fn world_after(&self) -> Result<WorldState, WorldError> {
        self.world_before.replay(&self.actions, FeasibilityRule::Unrestricted)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub id: String,
    pub turns: Vec<Turn>,
    pub target: WorldState,
}

impl Episode {
    pub fn final_world(&self) -> WorldState {
        self.turns
            .last()
            .and_then(|t| t.world_after().ok())
            .unwrap_or_else(|| WorldState::empty(self.target.dims()))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub dims: GridDims,
    /// Rule used to verify that every turn's actions replay.
    pub rule: FeasibilityRule,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            dims: GridDims::default(),
            rule: FeasibilityRule::Grounded,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct EpisodeRecord {
    id: String,
    target: Vec<(i64, i64, i64, String)>,
    turns: Vec<TurnRecord>,
}

#[derive(Serialize, Deserialize)]
struct TurnRecord {
    speaker: Speaker,
    utterance: String,
    actions: Vec<ActionRecord>,
}

#[derive(Serialize, Deserialize)]
struct ActionRecord {
    kind: String,
    x: i64,
    y: i64,
    z: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    color: Option<String>,
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Episode>, CorpusError> {
    load_corpus_with(path, &LoadOptions::default())
}

pub fn load_corpus_with(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<Vec<Episode>, CorpusError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&text, opts)
}

/// Parses corpus text. Blank lines are skipped; line numbers are 1-based.
pub fn parse_corpus(text: &str, opts: &LoadOptions) -> Result<Vec<Episode>, CorpusError> {
    let mut episodes = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let record: EpisodeRecord = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId { line, id: record.id });
        }
        episodes.push(episode_from_record(record, line, opts)?);
    }
    Ok(episodes)
}

fn color_of(name: &str, line: usize, id: &str) -> Result<Color, CorpusError> {
    Color::from_name(name).ok_or_else(|| CorpusError::UnknownColor {
        line,
        id: id.to_string(),
        color: name.to_string(),
    })
}

fn episode_from_record(record: EpisodeRecord, line: usize, opts: &LoadOptions) -> Result<Episode, CorpusError> {
    let id = record.id;
    let bounds = |source| CorpusError::OutOfBounds {
        line,
        id: id.clone(),
        source,
    };

    let mut target_blocks = Vec::with_capacity(record.target.len());
    for (x, y, z, color) in &record.target {
        let cell = opts.dims.checked_cell(*x, *y, *z).map_err(bounds)?;
        target_blocks.push((cell, color_of(color, line, &id)?));
    }
    let target = WorldState::from_blocks(opts.dims, target_blocks).map_err(bounds)?;

    let mut world = WorldState::empty(opts.dims);
    let mut turns = Vec::with_capacity(record.turns.len());
    for (turn_idx, tr) in record.turns.into_iter().enumerate() {
        let mut actions = Vec::with_capacity(tr.actions.len());
        for ar in &tr.actions {
            let cell = opts.dims.checked_cell(ar.x, ar.y, ar.z).map_err(bounds)?;
            let action = match (ar.kind.as_str(), &ar.color) {
                ("place", Some(c)) => BlockAction::Place {
                    cell,
                    color: color_of(c, line, &id)?,
                },
                ("remove", None) => BlockAction::Remove { cell },
                ("place", None) => {
                    return Err(CorpusError::Malformed {
                        line,
                        message: format!("turn {turn_idx}: place action without a color"),
                    })
                }
                ("remove", Some(_)) => {
                    return Err(CorpusError::Malformed {
                        line,
                        message: format!("turn {turn_idx}: remove action carries a color"),
                    })
                }
                (other, _) => {
                    return Err(CorpusError::Malformed {
                        line,
                        message: format!("turn {turn_idx}: unknown action kind {other:?}"),
                    })
                }
            };
            actions.push(action);
        }
        let world_before = world.clone();
        for &a in &actions {
            world.apply_mut(a, opts.rule).map_err(|source| CorpusError::Infeasible {
                line,
                id: id.clone(),
                turn: turn_idx,
                source,
            })?;
        }
        turns.push(Turn {
            speaker: tr.speaker,
            utterance: tr.utterance,
            actions,
            world_before,
        });
    }
    Ok(Episode { id, turns, target })
}

fn action_record(a: &BlockAction) -> ActionRecord {
    let c = a.cell();
    ActionRecord {
        kind: if a.is_place() { "place" } else { "remove" }.to_string(),
        x: c.x as i64,
        y: c.y as i64,
        z: c.z as i64,
        color: a.color().map(|c| c.name().to_string()),
    }
}

/// Block list in the wire form, sorted by `(y, z, x)`.
pub fn world_to_wire(world: &WorldState) -> Vec<(i64, i64, i64, String)> {
    world
        .blocks()
        .map(|(c, color)| (c.x as i64, c.y as i64, c.z as i64, color.name().to_string()))
        .collect()
}

/// Canonical one-line encoding of an episode (no trailing newline).
pub fn episode_to_line(ep: &Episode) -> String {
    let record = EpisodeRecord {
        id: ep.id.clone(),
        target: world_to_wire(&ep.target),
        turns: ep
            .turns
            .iter()
            .map(|t| TurnRecord {
                speaker: t.speaker,
                utterance: t.utterance.clone(),
                actions: t.actions.iter().map(action_record).collect(),
            })
            .collect(),
    };
    serde_json::to_string(&record).expect("episode records always serialize")
}

pub fn serialize_corpus(episodes: &[Episode]) -> String {
    let mut out = String::new();
    for ep in episodes {
        out.push_str(&episode_to_line(ep));
        out.push('\n');
    }
    out
}

pub fn write_corpus(path: impl AsRef<Path>, episodes: &[Episode]) -> std::io::Result<()> {
    fs::write(path, serialize_corpus(episodes))
}

/// Lowercases and splits on whitespace; every other non-alphanumeric
/// character becomes a token of its own.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_alphanumeric() {
            word.push(ch);
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Specials only.
    pub fn new() -> Self {
        Self::from_tokens(Vec::new()).expect("specials are distinct")
    }

    /// Builds a vocabulary from non-special surface forms, in id order
    /// starting at [`N_SPECIAL`].
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        let mut all: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        all.extend(tokens);
        let mut index = HashMap::with_capacity(all.len());
        for (i, t) in all.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(CorpusError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// All surface forms in id order, specials included.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn is_special(id: TokenId) -> bool {
        id < N_SPECIAL
    }
}

impl Default for Vocab {
    fn default() -> Self {
        Self::new()
    }
}

pub fn build_vocab(episodes: &[Episode], min_freq: usize) -> Vocab {
    build_vocab_from_texts(
        episodes
            .iter()
            .flat_map(|e| e.turns.iter().map(|t| t.utterance.as_str())),
        min_freq,
    )
}

/// Specials, then tokens with frequency `>= min_freq` by descending frequency,
/// ties broken lexicographically.
pub fn build_vocab_from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Vocab {
    let min_freq = min_freq.max(1);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for w in split_words(text) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, n)| *n >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocab::from_tokens(kept.into_iter().map(|(t, _)| t).collect()).expect("counted tokens are distinct")
}

/// Token ids framed as `CLS ... SEP`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<TokenId>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

pub fn tokenize(text: &str, vocab: &Vocab, max_seq_len: usize) -> TokenSeq {
    let max_seq_len = max_seq_len.max(2);
    let mut ids = Vec::with_capacity(max_seq_len.min(32));
    ids.push(CLS);
    ids.extend(
        split_words(text)
            .iter()
            .take(max_seq_len - 2)
            .map(|w| vocab.id_or_unk(w)),
    );
    ids.push(SEP);
    TokenSeq { ids }
}

/// Every utterance in the corpus, in episode and turn order.
pub fn utterances(episodes: &[Episode]) -> impl Iterator<Item = &str> {
    episodes
        .iter()
        .flat_map(|e| e.turns.iter().map(|t| t.utterance.as_str()))
}

const PREFIXES: [&str; 6] = ["", "now ", "next , ", "okay , ", "please ", "great . now "];
const SUFFIXES: [&str; 4] = ["", " please", " .", " thanks"];
const ACKS: [&str; 5] = ["okay", "done", "sure", "got it", "ok done ."];
const CHAT_ARCHITECT: [&str; 5] = [
    "nice work",
    "looks good so far",
    "we are almost done",
    "hello builder",
    "let us keep going",
];
const CHAT_BUILDER: [&str; 3] = ["thanks", "cool", "great"];

fn column_top(world: &WorldState, x: usize, z: usize) -> usize {
    (0..world.dims().sy)
        .rev()
        .find(|&y| world.is_occupied(Cell::new(x, y, z)))
        .map_or(0, |y| y + 1)
}

fn place_utterance(rng: &mut ChaCha8Rng, color: Color, x: usize, z: usize) -> String {
    let c = color.name();
    match rng.random_range(0..6) {
        0 => format!("put a {c} block at {x} {z}"),
        1 => format!("place a {c} block on {x} {z}"),
        2 => format!("add one {c} block at x {x} z {z}"),
        3 => format!("i need a {c} cube at {x} {z}"),
        4 => format!("drop a {c} block onto spot {x} {z}"),
        _ => format!("at {x} {z} put a {c} block"),
    }
}

fn stack_utterance(rng: &mut ChaCha8Rng, color: Color, x: usize, z: usize) -> String {
    let c = color.name();
    match rng.random_range(0..3) {
        0 => format!("stack two {c} blocks at {x} {z}"),
        1 => format!("build a tower of two {c} blocks on {x} {z}"),
        _ => format!("put two {c} blocks on top of each other at {x} {z}"),
    }
}

fn remove_utterance(rng: &mut ChaCha8Rng, color: Color, cell: Cell) -> String {
    let (x, y, z) = (cell.x, cell.y, cell.z);
    match rng.random_range(0..3) {
        0 => format!("remove the block at {x} {y} {z}"),
        1 => format!("take away the {} block at {x} {y} {z}", color.name()),
        _ => format!("delete the block at x {x} y {y} z {z}"),
    }
}

fn decorate(rng: &mut ChaCha8Rng, core: String) -> String {
    let pre = PREFIXES.choose(rng).copied().unwrap_or_default();
    let suf = SUFFIXES.choose(rng).copied().unwrap_or_default();
    format!("{pre}{core}{suf}")
}

/// Picks the next instruction and its gold actions. Returns `None` for a
/// pure-dialogue exchange.
fn next_instruction(rng: &mut ChaCha8Rng, world: &WorldState) -> Option<(String, Vec<BlockAction>)> {
    let dims = world.dims();
    let roll: f64 = rng.random();
    let blocks: Vec<(Cell, Color)> = world.blocks().collect();
    if roll < 0.08 {
        return None;
    }
    if roll < 0.26 && !blocks.is_empty() {
        let &(cell, color) = blocks.choose(rng).expect("nonempty");
        let text = remove_utterance(rng, color, cell);
        return Some((decorate(rng, text), vec![BlockAction::Remove { cell }]));
    }
    let stack = roll < 0.44 && dims.sy >= 2;
    let need = if stack { 2 } else { 1 };
    let columns: Vec<(usize, usize, usize)> = (0..dims.sz)
        .flat_map(|z| (0..dims.sx).map(move |x| (x, z)))
        .map(|(x, z)| (x, z, column_top(world, x, z)))
        .filter(|&(_, _, top)| top + need <= dims.sy)
        .collect();
    let &(x, z, top) = columns.choose(rng)?;
    let color = *Color::ALL.choose(rng).expect("palette");
    let actions = (0..need)
        .map(|k| BlockAction::Place {
            cell: Cell::new(x, top + k, z),
            color,
        })
        .collect();
    let text = if stack {
        stack_utterance(rng, color, x, z)
    } else {
        place_utterance(rng, color, x, z)
    };
    Some((decorate(rng, text), actions))
}

/// Deterministic synthetic corpus of templated architect instructions whose
/// gold actions can be recovered from the utterance and the current world.
pub fn synth_corpus(seed: u64, n_episodes: usize, dims: GridDims) -> Vec<Episode> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_episodes)
        .map(|i| {
            let mut world = WorldState::empty(dims);
            let rounds = rng.random_range(3..=6);
            let mut turns = Vec::with_capacity(2 * rounds);
            for _ in 0..rounds {
                let (instruction, reply, actions) = match next_instruction(&mut rng, &world) {
                    Some((text, actions)) => {
                        let ack = ACKS.choose(&mut rng).copied().unwrap_or("okay");
                        (text, ack.to_string(), actions)
                    }
                    None => {
                        let a = CHAT_ARCHITECT.choose(&mut rng).copied().unwrap_or_default();
                        let b = CHAT_BUILDER.choose(&mut rng).copied().unwrap_or_default();
                        (a.to_string(), b.to_string(), Vec::new())
                    }
                };
                turns.push(Turn {
                    speaker: Speaker::Architect,
                    utterance: instruction,
                    actions: Vec::new(),
                    world_before: world.clone(),
                });
                let before = world.clone();
                for &a in &actions {
                    world
                        .apply_mut(a, FeasibilityRule::Grounded)
                        .expect("generator only emits feasible actions");
                }
                turns.push(Turn {
                    speaker: Speaker::Builder,
                    utterance: reply,
                    actions,
                    world_before: before,
                });
            }
            Episode {
                id: format!("synth-{seed}-{i:05}"),
                turns,
                target: world,
            }
        })
        .collect()
}

const OBJECTS: [&str; 8] = ["cup", "ball", "car", "box", "book", "hat", "block", "cube"];

/// Generic everyday sentences sharing some vocabulary (colors, numbers,
/// spatial words) with the building domain. Used to create the base encoder
/// before domain adaptation.
pub fn generic_text(seed: u64, n_sentences: usize) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    (0..n_sentences)
        .map(|_| {
            let c = Color::ALL.choose(&mut rng).expect("palette").name();
            let c2 = Color::ALL.choose(&mut rng).expect("palette").name();
            let o = OBJECTS.choose(&mut rng).copied().unwrap_or("cup");
            let o2 = OBJECTS.choose(&mut rng).copied().unwrap_or("box");
            let n: usize = rng.random_range(0..=10);
            let m: usize = rng.random_range(0..=10);
            let k: usize = rng.random_range(0..=10);
            let ack = ["okay", "ok", "sure", "thanks", "great", "cool", "nice", "good"].choose(&mut rng).copied().unwrap_or("okay");
            match rng.random_range(0..24) {
                0 => format!("the {c} {o} is on the table ."),
                1 => format!("there are {n} {c} things in the box ."),
                2 => format!("{} comes after {n} .", n + 1),
                3 => format!("count with me {n} , {} , {} .", n + 1, n + 2),
                4 => format!("my favorite color is {c} ."),
                5 => format!("she put a {c} {o} next to the {c2} {o2} ."),
                6 => format!("take the {o} away from the {o2} , please ."),
                7 => format!("the tower is {n} blocks tall ."),
                8 => format!("he moved the {c} {o} to the top of the {o2} ."),
                9 => format!("the point is at x {n} , y {m} , z {k} ."),
                10 => format!("{ack} , i need one more {o} now ."),
                11 => format!("please place the {o} onto the shelf ."),
                12 => format!("we keep two of each {o} by the door ."),
                13 => format!("add {n} and {m} to get {} .", n + m),
                14 => format!("{ack} , thanks . it looks good so far ."),
                15 => format!("let us build a small house out of {c} blocks ."),
                16 => format!("drop the {c} {o} in the spot by the {o2} ."),
                17 => format!("remove one {o} from the stack and delete the note ."),
                18 => "i got it , we are almost done .".to_string(),
                19 => format!("hello , are you going to work on the {o} ?"),
                20 => format!("{ack} , done . now stack one {o} on top of the other ."),
                21 => format!("the builder is far from the {c} {o} ."),
                22 => format!("{ack} . the architect wants a {c} wall ."),
                _ => format!("sure , the {o} goes at the other end ."),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_for(words: &[&str]) -> Vocab {
        Vocab::from_tokens(words.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn split_words_separates_punctuation() {
        assert_eq!(split_words("Place a red block."), vec!["place", "a", "red", "block", "."]);
        assert_eq!(split_words("  x=3,y "), vec!["x", "=", "3", ",", "y"]);
        assert!(split_words("").is_empty());
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab_for(&["place", "a", "red", "block", "."]);
        let seq = tokenize("Place a red block.", &v, 64);
        let expect: Vec<TokenId> = vec![CLS, 5, 6, 7, 8, 9, SEP];
        assert_eq!(seq.ids, expect);
        assert_eq!(tokenize("", &v, 64).ids, vec![CLS, SEP]);
        assert_eq!(tokenize("place a zebra", &v, 64).ids, vec![CLS, 5, 6, UNK, SEP]);
    }

    #[test]
    fn tokenize_truncates_content() {
        let v = vocab_for(&["a"]);
        let seq = tokenize("a a a a a a", &v, 4);
        assert_eq!(seq.ids, vec![CLS, 5, 5, SEP]);
        assert_eq!(tokenize("a a", &v, 2).ids, vec![CLS, SEP]);
    }

    #[test]
    fn vocab_layout() {
        let v = Vocab::new();
        assert_eq!(v.len(), 5);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i));
        }
        assert!(Vocab::from_tokens(vec!["a".into(), "a".into()]).is_err());
        assert!(Vocab::from_tokens(vec!["[MASK]".into()]).is_err());
    }

    #[test]
    fn vocab_orders_by_frequency_then_lexicographically() {
        let v = build_vocab_from_texts(["b a c", "a b", "a d"], 1);
        assert_eq!(&v.tokens()[5..], &["a", "b", "c", "d"]);
        let v = build_vocab_from_texts(["b a c", "a b", "a d"], 2);
        assert_eq!(&v.tokens()[5..], &["a", "b"]);
    }

    #[test]
    fn empty_corpus_gives_specials_only() {
        assert_eq!(build_vocab(&[], 1).len(), 5);
        assert!(parse_corpus("", &LoadOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn unknown_color_names_the_record() {
        let line = r#"{"id":"ep-7","target":[],"turns":[{"speaker":"builder","utterance":"","actions":[{"kind":"place","x":0,"y":0,"z":0,"color":"pink"}]}]}"#;
        let err = parse_corpus(line, &LoadOptions::default()).unwrap_err();
        match &err {
            CorpusError::UnknownColor { line, id, color } => {
                assert_eq!((*line, id.as_str(), color.as_str()), (1, "ep-7", "pink"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("ep-7"));
    }

    #[test]
    fn load_errors() {
        let opts = LoadOptions::default();
        let oob = r#"{"id":"a","target":[[11,0,0,"red"]],"turns":[]}"#;
        assert!(matches!(parse_corpus(oob, &opts), Err(CorpusError::OutOfBounds { .. })));
        let bad = "\n{not json";
        assert!(matches!(parse_corpus(bad, &opts), Err(CorpusError::Malformed { line: 2, .. })));
        let floating = r#"{"id":"a","target":[],"turns":[{"speaker":"builder","utterance":"","actions":[{"kind":"place","x":0,"y":2,"z":0,"color":"red"}]}]}"#;
        assert!(matches!(parse_corpus(floating, &opts), Err(CorpusError::Infeasible { turn: 0, .. })));
        let lenient = LoadOptions {
            rule: FeasibilityRule::Unrestricted,
            ..opts
        };
        assert!(parse_corpus(floating, &lenient).is_ok());
        let dup = format!("{oob_ok}\n{oob_ok}", oob_ok = r#"{"id":"a","target":[],"turns":[]}"#);
        assert!(matches!(parse_corpus(&dup, &opts), Err(CorpusError::DuplicateId { line: 2, .. })));
        let colored_remove = r#"{"id":"a","target":[],"turns":[{"speaker":"builder","utterance":"","actions":[{"kind":"remove","x":0,"y":0,"z":0,"color":"red"}]}]}"#;
        assert!(matches!(parse_corpus(colored_remove, &opts), Err(CorpusError::Malformed { .. })));
    }

    #[test]
    fn synth_is_deterministic_and_feasible() {
        let a = synth_corpus(3, 20, GridDims::default());
        let b = synth_corpus(3, 20, GridDims::default());
        assert_eq!(serialize_corpus(&a), serialize_corpus(&b));
        assert!(synth_corpus(3, 0, GridDims::default()).is_empty());
        let reloaded = parse_corpus(&serialize_corpus(&a), &LoadOptions::default()).unwrap();
        assert_eq!(reloaded, a);
        for ep in &a {
            assert_eq!(ep.final_world(), ep.target);
        }
    }

    #[test]
    fn synth_respects_small_grids() {
        let dims = GridDims::new(3, 2, 3);
        let eps = synth_corpus(11, 30, dims);
        let opts = LoadOptions {
            dims,
            rule: FeasibilityRule::Grounded,
        };
        let reloaded = parse_corpus(&serialize_corpus(&eps), &opts).unwrap();
        assert_eq!(reloaded.len(), 30);
    }

    #[test]
    fn generic_text_is_deterministic() {
        assert_eq!(generic_text(1, 50), generic_text(1, 50));
        assert_ne!(generic_text(1, 50), generic_text(2, 50));
    }
}
