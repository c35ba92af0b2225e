//! Place and remove blocks, list what is feasible, and diff two worlds.

use craftlm::world::{feasible_actions, net_change, render_text, BlockAction, Color, FeasibilityRule, GridDims, WorldState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dims = GridDims { sx: 5, sy: 3, sz: 4 };
    let rule = FeasibilityRule::Grounded;
    let start = WorldState::empty(dims);

    let plan = [
        BlockAction::place(1, 0, 1, Color::Red),
        BlockAction::place(1, 1, 1, Color::Blue),
        BlockAction::place(2, 0, 1, Color::Yellow),
    ];
    let built = start.replay(&plan, rule)?;
    println!("{}\n", render_text(&built));

    // floating blocks are rejected under the grounded rule
    let floating = BlockAction::place(4, 2, 3, Color::Green);
    println!("floating placement: {:?}", built.apply(floating, rule).unwrap_err());

    let feasible = feasible_actions(&built, rule);
    let removals = feasible.iter().filter(|a| !a.is_place()).count();
    println!("{} feasible actions ({removals} removals)", feasible.len());

    let edited = built
        .apply(BlockAction::remove(1, 1, 1), rule)?
        .apply(BlockAction::place(1, 1, 1, Color::Purple), rule)?;
    for a in net_change(&built, &edited)? {
        println!("net change: {a:?}");
    }
    Ok(())
}
