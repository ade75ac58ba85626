// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trains the toy color model and writes it to the given path.
//!
//! `cargo run --release --example train_color -- out.plm [seed] [steps]`

use patchlens_core::toy::ColorWorld;

fn main() -> patchlens_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args.next().unwrap_or_else(|| "toy-color.plm".into());
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed"));
    let mut world = ColorWorld::default();
    if let Some(steps) = args.next() {
        world.opt.steps = steps.parse().expect("steps");
    }
    let t0 = std::time::Instant::now();
    let (model, acc) = world.train(seed, |step, loss| {
        eprintln!(
            "step {step:5} loss {loss:.4} ({:.0}s)",
            t0.elapsed().as_secs_f64()
        );
    })?;
    println!(
        "accuracy text {:.3} picture-color {:.3} picture-animal {:.3}",
        acc[0], acc[1], acc[2]
    );
    model.save(&out)?;
    println!("wrote {out}");
    Ok(())
}
