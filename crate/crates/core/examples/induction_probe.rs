// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains induction models and compares the top attributed head with the
//! head that attends most to the induced position.
//!
//! Usage: `cargo run --release --example induction_probe -- [seeds] [first-seed]`

use patchlens_core::attribution::head_importance_profile;
use patchlens_core::toy::induction::{max_attention_head, trace_cases};
use patchlens_core::toy::InductionTask;
use patchlens_core::ModelHandle;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let mut args = std::env::args()
        .skip(1)
        .map(|s| s.parse::<u64>().expect("integer argument"));
    let seeds = args.next().unwrap_or(3);
    let first = args.next().unwrap_or(0);
    let task = InductionTask::default();
    for seed in first..first + seeds {
        let t0 = std::time::Instant::now();
        let (model, acc) = task.train(seed).unwrap();
        let handle = ModelHandle::new(model);
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let cases: Vec<_> = (0..40).map(|_| task.sample_case(&mut rng)).collect();
        let traces = trace_cases(&handle, &cases).unwrap();
        let pairs: Vec<_> = traces
            .iter()
            .zip(&cases)
            .map(|(t, c)| (t, c.target))
            .collect();
        let profile = head_importance_profile(&pairs).unwrap();
        let top = profile.top_k(3);
        let att = max_attention_head(&traces, &cases).unwrap();
        let shares: Vec<String> = top
            .iter()
            .map(|h| format!("{h}:{:.2}", profile.share(*h)))
            .collect();
        println!(
            "seed {seed}: accuracy {acc:.3}, top heads {}, max-attention head {att}, agree {} ({:.1?})",
            shares.join(" "),
            top[0] == att,
            t0.elapsed()
        );
    }
}
