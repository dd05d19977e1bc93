//! Mean iterations to the optimum of the keyword world for each ablation.

use greentea_core::evolve::{EvolveConfig, FeedbackMode};
use greentea_core::keyword_world::{iterations_to_optimum, run};
use greentea_core::MutationMode;

fn main() {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let modes = [
        ("topic", FeedbackMode::Topic, MutationMode::Guided),
        ("random_sample", FeedbackMode::RandomSample, MutationMode::Guided),
        ("none", FeedbackMode::None, MutationMode::RandomMutation),
    ];
    for (name, feedback_mode, mutation_mode) in modes {
        let mut its = Vec::new();
        for seed in 0..seeds {
            let cfg = EvolveConfig { selection_seed: seed, feedback_mode, mutation_mode, ..Default::default() };
            let out = run(cfg.clone(), seed).expect("run");
            its.push(iterations_to_optimum(&out.history).unwrap_or(cfg.max_iterations + 1));
        }
        let mean = its.iter().sum::<u32>() as f64 / its.len() as f64;
        println!("{name:>14}: mean {mean:.2} {its:?}");
    }
}
