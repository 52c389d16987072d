// Scratch probe for scenario behavior across seeds (not shipped).
use robocoord_core::sim::{run, Mode, ScenarioConfig};
use std::time::Instant;

fn main() {
    for seed in 0..6u64 {
        let cfg = ScenarioConfig::default_with(Mode::Robust, seed);
        let start = Instant::now();
        match run(&cfg) {
            Ok(out) => {
                let m = &out.metrics;
                println!(
                    "seed {seed} robust: {:.1?} entered={} exited={} lat_viol={} rear_viol={} min_lat={:.4} min_rear={:.3} tube_overlaps={} audits_ok={} infeasible={:?} events={}",
                    start.elapsed(), m.n_entered, m.n_exited,
                    m.actual_lateral_violations, m.actual_rear_end_violations,
                    m.min_actual_lateral_slack, m.min_actual_rear_end_slack,
                    m.tube_overlap_pairs, m.all_audits_passed, m.infeasible_cavs,
                    out.events.len(),
                );
            }
            Err(e) => println!("seed {seed} robust: ERROR {e}"),
        }
        let cfg = ScenarioConfig::default_with(Mode::Deterministic, seed);
        let start = Instant::now();
        match run(&cfg) {
            Ok(out) => {
                let m = &out.metrics;
                println!(
                    "seed {seed} det   : {:.1?} lat_viol={} rear_viol={} min_lat={:.4} tube_overlaps={} min_tube_lat={:.4}",
                    start.elapsed(),
                    m.actual_lateral_violations, m.actual_rear_end_violations,
                    m.min_actual_lateral_slack, m.tube_overlap_pairs, m.min_tube_lateral_slack,
                );
            }
            Err(e) => println!("seed {seed} det   : ERROR {e}"),
        }
    }
}
