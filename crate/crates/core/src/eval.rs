//! Net-change scoring of builder predictions.

use std::collections::BTreeSet;

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::builder::{decode_actions, encode_context, BuilderError, BuilderModel, DecodeConfig};
use crate::corpus::{serialize_corpus, Episode, Speaker, Vocab};
use crate::world::{net_change, BlockAction, FeasibilityRule, WorldError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Builder(#[from] BuilderError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("reports were computed on different corpora ({a} vs {b})")]
    CorpusMismatch { a: String, b: String },
}

/// Confusion counts. Precision of an empty prediction is 0, as is the
/// recall of an empty gold set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1(self.precision(), self.recall())
    }
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Harmonic mean of precision and recall (0 when both are 0). The scale of
/// the inputs is preserved, so percentages give a percentage.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Set overlap of predicted and gold actions.
pub fn prf(predicted: &BTreeSet<BlockAction>, gold: &BTreeSet<BlockAction>) -> Counts {
    let tp = predicted.intersection(gold).count();
    Counts {
        tp,
        fp: predicted.len() - tp,
        fn_: gold.len() - tp,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TurnRow {
    pub episode: String,
    pub turn: usize,
    #[serde(flatten)]
    pub counts: Counts,
}

/// Micro-averaged metrics with the per-turn rows they were summed from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub corpus_sha256: String,
    pub turns: usize,
    pub totals: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    #[serde(skip)]
    pub rows: Vec<TurnRow>,
}

impl EvalReport {
    pub fn from_rows(corpus_sha256: String, rows: Vec<TurnRow>) -> Self {
        let mut totals = Counts::default();
        for r in &rows {
            totals += r.counts;
        }
        Self {
            corpus_sha256,
            turns: rows.len(),
            totals,
            precision: totals.precision(),
            recall: totals.recall(),
            f1: totals.f1(),
            rows,
        }
    }

    /// `episode,turn,tp,fp,fn`, one row per scored turn.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("episode,turn,tp,fp,fn\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{}\n", r.episode, r.turn, r.counts.tp, r.counts.fp, r.counts.fn_));
        }
        out
    }
}

/// Hex SHA-256 of the canonical serialization of `episodes`.
pub fn corpus_fingerprint(episodes: &[Episode]) -> String {
    hex::encode(Sha256::digest(serialize_corpus(episodes).as_bytes()))
}

/// Scores `predict(episode, turn)` on every builder turn whose gold net
/// change is nonempty. Predictions are replayed from the gold world before
/// the turn; an inapplicable action ends the replay.
pub fn evaluate_predictions<F>(episodes: &[Episode], mut predict: F) -> Result<EvalReport, EvalError>
where
    F: FnMut(&Episode, usize) -> Result<Vec<BlockAction>, EvalError>,
{
    let mut rows = Vec::new();
    for ep in episodes {
        for (t, turn) in ep.turns.iter().enumerate() {
            if turn.speaker != Speaker::Builder {
                continue;
            }
            let gold = net_change(&turn.world_before, &turn.world_after()?)?;
            if gold.is_empty() {
                continue;
            }
            let mut world = turn.world_before.clone();
            for a in predict(ep, t)? {
                if world.apply_mut(a, FeasibilityRule::Unrestricted).is_err() {
                    break;
                }
            }
            let predicted = net_change(&turn.world_before, &world)?;
            rows.push(TurnRow {
                episode: ep.id.clone(),
                turn: t,
                counts: prf(&predicted, &gold),
            });
        }
    }
    Ok(EvalReport::from_rows(corpus_fingerprint(episodes), rows))
}

pub fn evaluate_model(model: &BuilderModel, episodes: &[Episode], vocab: &Vocab, cfg: &DecodeConfig) -> Result<EvalReport, EvalError> {
    evaluate_predictions(episodes, |ep, t| {
        let ctx = encode_context(ep, t, vocab, model.history, model.encoder.max_seq_len);
        Ok(decode_actions(model, &ctx, cfg)?)
    })
}

/// `b - a` on a 0..100 scale, rounded to one decimal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Comparison {
    pub a: [f64; 3],
    pub b: [f64; 3],
    pub delta_precision: f64,
    pub delta_recall: f64,
    pub delta_f1: f64,
}

fn pct(x: f64) -> f64 {
    (x * 1000.0).round() / 10.0
}

pub fn compare_runs(a: &EvalReport, b: &EvalReport) -> Result<Comparison, EvalError> {
    if a.corpus_sha256 != b.corpus_sha256 {
        return Err(EvalError::CorpusMismatch {
            a: a.corpus_sha256.clone(),
            b: b.corpus_sha256.clone(),
        });
    }
    Ok(Comparison {
        a: [pct(a.precision), pct(a.recall), pct(a.f1)],
        b: [pct(b.precision), pct(b.recall), pct(b.f1)],
        delta_precision: pct(b.precision - a.precision),
        delta_recall: pct(b.recall - a.recall),
        delta_f1: pct(b.f1 - a.f1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_corpus;
    use crate::world::{Color, GridDims};

    fn set(items: &[BlockAction]) -> BTreeSet<BlockAction> {
        items.iter().copied().collect()
    }

    #[test]
    fn counts_and_edge_cases() {
        let a = BlockAction::place(0, 0, 0, Color::Red);
        let b = BlockAction::place(1, 0, 0, Color::Red);
        let c = BlockAction::remove(2, 0, 0);
        let k = prf(&set(&[a, b]), &set(&[b, c]));
        assert_eq!(k, Counts { tp: 1, fp: 1, fn_: 1 });
        assert_eq!(k.f1(), 0.5);
        let empty = prf(&set(&[]), &set(&[a]));
        assert_eq!(empty.precision(), 0.0);
        assert_eq!(empty.f1(), 0.0);
    }

    #[test]
    fn f1_keeps_percent_scale() {
        assert!((f1(22.4, 12.6) - 16.13).abs() < 0.01);
    }

    #[test]
    fn gold_predictions_score_perfectly() {
        let eps = synth_corpus(3, 10, GridDims::default());
        let r = evaluate_predictions(&eps, |ep, t| Ok(ep.turns[t].actions.clone())).unwrap();
        assert!(r.turns > 0);
        assert_eq!(r.f1, 1.0);
        assert_eq!(r.totals.fp + r.totals.fn_, 0);
        let none = evaluate_predictions(&eps, |_, _| Ok(Vec::new())).unwrap();
        assert_eq!((none.precision, none.recall, none.f1), (0.0, 0.0, 0.0));
        let cmp = compare_runs(&none, &r).unwrap();
        assert_eq!(cmp.delta_f1, 100.0);
        let other = evaluate_predictions(&eps[..5], |_, _| Ok(Vec::new())).unwrap();
        assert!(compare_runs(&r, &other).is_err());
    }

    #[test]
    fn csv_lists_every_row() {
        let eps = synth_corpus(3, 4, GridDims::default());
        let r = evaluate_predictions(&eps, |_, _| Ok(Vec::new())).unwrap();
        let csv = r.to_csv();
        assert_eq!(csv.lines().count(), r.turns + 1);
        assert!(csv.starts_with("episode,turn,tp,fp,fn\n"));
    }
}
