//! Runs the full objective and each single-term ablation over several seeds on
//! the synthetic benchmark and prints novel-class accuracy per run.
//!
//! cargo run --release -p lps-core --example ablation_grid -- [epochs] [seeds] [key=value ...]

use std::time::Instant;

use lps::experiment::{train, ExperimentConfig};
use lps::objective::Ablation;

fn main() -> lps::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut base = ExperimentConfig {
        epochs,
        ..ExperimentConfig::default()
    };
    for kv in args.iter().skip(3) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| lps::Error::Config(format!("expected key=value, got {kv:?}")))?;
        base.set(k, v)?;
    }
    let variants = [
        ("full", Ablation::FULL),
        (
            "no-am",
            Ablation {
                no_am: true,
                ..Ablation::FULL
            },
        ),
        (
            "no-pc",
            Ablation {
                no_pc: true,
                ..Ablation::FULL
            },
        ),
        (
            "no-uc",
            Ablation {
                no_uc: true,
                ..Ablation::FULL
            },
        ),
        (
            "no-entropy",
            Ablation {
                no_entropy: true,
                ..Ablation::FULL
            },
        ),
    ];
    let start = Instant::now();
    let mut novel = vec![vec![0.0; variants.len()]; seeds as usize];
    let mut kl_drop = 0;
    println!("seed variant seen novel all kl@10 kl@end");
    for seed in 0..seeds {
        let mut cfg = base.clone();
        cfg.set_seed(seed);
        let ds = cfg.load_data()?;
        for (v, (name, ablation)) in variants.into_iter().enumerate() {
            let cfg = ExperimentConfig {
                ablation,
                ..cfg.clone()
            };
            let out = train(&cfg, &ds)?;
            let last = out.records.last().expect("records");
            let kl10 = out.records.get(10).map_or(f64::NAN, |r| r.kl_to_prior);
            novel[seed as usize][v] = last.novel_acc.unwrap_or(f64::NAN);
            if v == 0 && last.kl_to_prior < kl10 {
                kl_drop += 1;
            }
            println!(
                "{seed} {name:<10} {:.4} {:.4} {:.4} {:.5} {:.5}",
                last.seen_acc.unwrap_or(f64::NAN),
                last.novel_acc.unwrap_or(f64::NAN),
                last.all_acc.unwrap_or(f64::NAN),
                kl10,
                last.kl_to_prior
            );
        }
    }
    let n = seeds as f64;
    let means: Vec<f64> = (0..variants.len())
        .map(|v| novel.iter().map(|row| row[v]).sum::<f64>() / n)
        .collect();
    let wins = |v: usize| novel.iter().filter(|row| row[0] > row[v]).count();
    println!(
        "mean novel: {}",
        variants
            .iter()
            .zip(&means)
            .map(|((name, _), m)| format!("{name} {m:.4}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    println!(
        "full > no-am {}/{seeds}, full > no-pc {}/{seeds}, kl decreasing {kl_drop}/{seeds}",
        wins(1),
        wins(2)
    );
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
