//! Net-change scoring: an oracle, a trivial baseline, and their comparison.

use craftlm::eval::{compare_runs, evaluate_predictions};
use craftlm::world::GridDims;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let test = craftlm::corpus::synth_corpus(2, 40, GridDims::default());

    let oracle = evaluate_predictions(&test, |ep, t| Ok(ep.turns[t].actions.clone()))?;
    // repeats the first gold action only, so multi-block turns lose recall
    let first_only = evaluate_predictions(&test, |ep, t| Ok(ep.turns[t].actions.iter().take(1).copied().collect()))?;

    for (name, r) in [("oracle", &oracle), ("first-only", &first_only)] {
        println!(
            "{name:<11} turns {:>3}  P {:.3}  R {:.3}  F1 {:.3}",
            r.turns, r.precision, r.recall, r.f1
        );
    }
    let cmp = compare_runs(&first_only, &oracle)?;
    println!("delta (oracle - first-only): P {:+.1} R {:+.1} F1 {:+.1}", cmp.delta_precision, cmp.delta_recall, cmp.delta_f1);
    print!("{}", first_only.to_csv().lines().take(4).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
