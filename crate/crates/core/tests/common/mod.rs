//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeSet, HashMap};

use craftlm::corpus::{Episode, Speaker};
use craftlm::world::{BlockAction, Cell, Color, FeasibilityRule, WorldState};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_world(rng: &mut ChaCha8Rng, dims: craftlm::world::GridDims, density: f64) -> WorldState {
    let mut blocks = Vec::new();
    for c in dims.cells() {
        if rng.random::<f64>() < density {
            blocks.push((c, Color::ALL[rng.random_range(0..6)]));
        }
    }
    WorldState::from_blocks(dims, blocks).unwrap()
}

/// Net change by visiting every cell.
pub fn scan_net_change(before: &WorldState, after: &WorldState) -> BTreeSet<BlockAction> {
    let d = before.dims();
    let mut out = BTreeSet::new();
    for y in 0..d.sy {
        for z in 0..d.sz {
            for x in 0..d.sx {
                let c = Cell::new(x, y, z);
                match (before.get(c), after.get(c)) {
                    (None, Some(col)) => {
                        out.insert(BlockAction::Place { cell: c, color: col });
                    }
                    (Some(_), None) => {
                        out.insert(BlockAction::Remove { cell: c });
                    }
                    (Some(a), Some(b)) if a != b => {
                        out.insert(BlockAction::Remove { cell: c });
                        out.insert(BlockAction::Place { cell: c, color: b });
                    }
                    _ => {}
                }
            }
        }
    }
    out
}

pub fn grounded_by_definition(w: &WorldState, c: Cell) -> bool {
    if c.y == 0 {
        return true;
    }
    let d = w.dims();
    let (x, y, z) = (c.x as i64, c.y as i64, c.z as i64);
    [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
        .iter()
        .map(|(dx, dy, dz)| (x + dx, y + dy, z + dz))
        .filter(|&(a, b, c)| a >= 0 && b >= 0 && c >= 0 && (a as usize) < d.sx && (b as usize) < d.sy && (c as usize) < d.sz)
        .any(|(a, b, c)| w.is_occupied(Cell::new(a as usize, b as usize, c as usize)))
}

/// Every action the grid admits, feasible or not.
pub fn all_actions(w: &WorldState) -> Vec<BlockAction> {
    let mut all = Vec::new();
    for c in w.dims().cells() {
        all.push(BlockAction::Remove { cell: c });
        all.extend(Color::ALL.map(|color| BlockAction::Place { cell: c, color }));
    }
    all
}

pub fn apply_filter(w: &WorldState, rule: FeasibilityRule) -> BTreeSet<BlockAction> {
    all_actions(w).into_iter().filter(|&a| w.apply(a, rule).is_ok()).collect()
}

/// Corpus-wide (tp, fp, fn, scored turns) recomputed from the predictions.
pub fn brute_micro(eps: &[Episode], predictions: &HashMap<(String, usize), Vec<BlockAction>>) -> (usize, usize, usize, usize) {
    let (mut tp, mut fp, mut fn_, mut rows) = (0, 0, 0, 0);
    for ep in eps {
        for (t, turn) in ep.turns.iter().enumerate() {
            if turn.speaker != Speaker::Builder || turn.actions.is_empty() {
                continue;
            }
            let after = turn.world_after().unwrap();
            let gold = scan_net_change(&turn.world_before, &after);
            let mut w = turn.world_before.clone();
            for &a in &predictions[&(ep.id.clone(), t)] {
                if w.apply_mut(a, FeasibilityRule::Unrestricted).is_err() {
                    break;
                }
            }
            let pred = scan_net_change(&turn.world_before, &w);
            let hit = pred.iter().filter(|a| gold.contains(a)).count();
            tp += hit;
            fp += pred.len() - hit;
            fn_ += gold.len() - hit;
            rows += 1;
        }
    }
    (tp, fp, fn_, rows)
}

/// Gold actions thinned out, with a stray placement now and then.
pub fn noisy_prediction(rng: &mut ChaCha8Rng, gold: &[BlockAction]) -> Vec<BlockAction> {
    let mut p: Vec<BlockAction> = gold.iter().copied().filter(|_| rng.random::<f64>() < 0.7).collect();
    if rng.random::<f64>() < 0.4 {
        let x = rng.random_range(0..11);
        let z = rng.random_range(0..11);
        p.push(BlockAction::place(x, 0, z, Color::Green));
    }
    p
}
