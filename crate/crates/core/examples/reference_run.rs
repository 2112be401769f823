//! Trains the default configuration on the reference synthetic cohort and
//! prints the interpretability summary.

use std::time::Instant;

use longsom::analysis::{age_bin_grids, analyze_cohort, dcor_report};
use longsom::synth::{generate_cohort, CohortSpec};
use longsom::trainer::{train, TrainConfig};

fn main() -> longsom::Result<()> {
    let seed: u64 = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed"));
    let cohort = generate_cohort(&CohortSpec { seed, ..CohortSpec::default() })?;
    let config = TrainConfig { seed, ..TrainConfig::default() };
    let start = Instant::now();
    let out = train(&cohort, &config, |m, _| {
        println!("epoch {:>2} total {:.4} recon {:.4} dir {:.4} uninit {}", m.epoch, m.total, m.recon, m.dir, m.uninit_cells);
        Ok(())
    })?;
    println!("pretrain recon {:?}", out.pretrain.epoch_recon);
    println!("trained in {:.1?}", start.elapsed());
    let samples = analyze_cohort(&out.session.model, &out.session.som, &cohort)?;
    for (c, v) in dcor_report(&samples)? {
        println!("dcor {:<16} {v:.3}", c.name());
    }
    for (lo, g) in age_bin_grids(&samples, 4)? {
        println!("age >= {lo:.1}: expected col {:.3}", g.expected_col());
    }
    println!("empty cells {}", out.session.empty_cells(&cohort)?);
    Ok(())
}
