//! Acceptance suite. Prints one `[PASS]` or `[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Criterion numbers given on the command line restrict the run, e.g.
//! `cargo test --test acceptance -- 3 4`.

#[path = "../common/mod.rs"]
mod common;

mod dataset;
mod degradation;
mod filters;
mod gradients;
mod losses;
mod metrics;
mod serialization;
mod training;
mod wgan;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

/// Outcome of one criterion: `Ok(summary)` or `Err(reason)`.
pub type Outcome = Result<String, String>;

/// Fails with `msg` unless `cond` holds.
pub fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

struct Criterion {
    id: usize,
    name: &'static str,
    budget: Option<Duration>,
    run: fn(&mut training::Shared) -> Outcome,
}

fn criteria() -> Vec<Criterion> {
    let mins = |m: u64| Some(Duration::from_secs(60 * m));
    vec![
        Criterion { id: 1, name: "gradient correctness", budget: mins(2), run: |_| gradients::run() },
        Criterion { id: 2, name: "loss formulas", budget: None, run: |_| losses::run() },
        Criterion { id: 3, name: "classical filter oracles", budget: Some(Duration::from_secs(30)), run: |_| filters::run() },
        Criterion { id: 4, name: "metric analytics", budget: None, run: |_| metrics::run() },
        Criterion { id: 5, name: "degradation invariants", budget: None, run: |_| degradation::run() },
        Criterion { id: 6, name: "dataset arithmetic", budget: None, run: |_| dataset::run() },
        Criterion { id: 7, name: "U-Net overfit", budget: mins(10), run: training::overfit },
        Criterion { id: 8, name: "baseline ordering", budget: None, run: training::ordering },
        Criterion { id: 9, name: "WGAN mechanics", budget: mins(5), run: |_| wgan::run() },
        Criterion { id: 10, name: "serialization", budget: None, run: |_| serialization::run() },
    ]
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut shared = training::Shared::default();
    let mut failed = 0;
    for c in criteria() {
        if !selected.is_empty() && !selected.contains(&c.id) {
            continue;
        }
        let started = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(|| (c.run)(&mut shared)))
            .unwrap_or_else(|p| Err(format!("panicked: {}", panic_message(&p))));
        let elapsed = started.elapsed();
        let result = match (result, c.budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {:.1}s, budget {}s", elapsed.as_secs_f64(), b.as_secs())),
            (r, _) => r,
        };
        let (tag, detail) = match &result {
            Ok(s) => ("PASS", s.as_str()),
            Err(e) => ("FAIL", e.as_str()),
        };
        println!("[{tag}] {:>2} {} ({:.1}s): {detail}", c.id, c.name, elapsed.as_secs_f64());
        failed += usize::from(result.is_err());
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn panic_message(p: &Box<dyn std::any::Any + Send>) -> String {
    p.downcast_ref::<String>()
        .cloned()
        .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
        .unwrap_or_else(|| "unknown panic".into())
}
