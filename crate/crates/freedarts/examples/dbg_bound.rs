use freedarts::oracle::*;
use freedarts::search::{run_search, SearchOptions, SearchMode};
use freedarts::scoring::ScoreVariant;
use freedarts::spaces::Space;
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "teacher".into());
    let task = match which.as_str() {
        "blobs" => SyntheticTask::blobs(4, 1.0, 0),
        _ => SyntheticTask::default_mini(),
    };
    let cfg = OracleConfig {
        space: freedarts::spaces::CellSpace::mini_space(4),
        task,
        ..OracleConfig::default_mini()
    };
    let t0 = Instant::now();
    let table = build_oracle(&cfg, 1).unwrap();
    let dt = t0.elapsed();
    let mut accs: Vec<f64> = table.entries.iter().map(|e| e.acc_mean).collect();
    accs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mean_std: f64 = table.entries.iter().map(|e| e.acc_std).sum::<f64>() / 27.0;
    println!("{which}: build {:?} | acc [{:.3}, {:.3}] spread {:.3} | per-arch std {:.3}", dt, accs[0], accs[26], accs[26]-accs[0], mean_std);
    let mut sorted: Vec<_> = table.entries.iter().collect();
    sorted.sort_by(|a, b| b.acc_mean.partial_cmp(&a.acc_mean).unwrap());
    for e in sorted.iter().take(4) {
        println!("  top: {:.3} ({} params) {}", e.acc_mean, e.params, e.genotype);
    }
    for e in sorted.iter().rev().take(2) {
        println!("  bot: {:.3} ({} params) {}", e.acc_mean, e.params, e.genotype);
    }
    let space = Space::Cell(cfg.space.clone());
    for (vname, variant) in [("data", ScoreVariant::DataAgnostic), ("label", ScoreVariant::LabelAgnostic), ("vanilla", ScoreVariant::Vanilla)] {
        let mut found = Vec::new();
        for seed in 0..20u64 {
            let opts = SearchOptions { variant, mode: SearchMode::Iterative, ..SearchOptions::default() };
            found.push(run_search(&space, seed, &opts).unwrap().genotype);
        }
        let report = rank_report(&found, &table, 50, 12345).unwrap();
        println!("  {vname:8} median={:.1} q1={:.1} q3={:.1} random_median={:.1} p={:?}",
            report.median, report.q1, report.q3, report.random_baseline_median,
            report.per_seed_percentiles.iter().map(|p| *p as i32).collect::<Vec<_>>());
    }
    println!("total {:?}", t0.elapsed());
}
