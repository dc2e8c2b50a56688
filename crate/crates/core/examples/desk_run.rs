//! Trains the default configuration on four synthetic clusters and prints
//! the per-epoch metrics.

use psm::data::ClusterSpec;
use psm::trainer::{pretrain, TrainConfig};

fn main() -> psm::Result<()> {
    let spec = ClusterSpec {
        classes: 4,
        dim: 32,
        train_per_class: 512,
        test_per_class: 128,
        separation: 6.0,
        seed: 7,
    };
    let (train, test) = spec.generate()?;
    let config = TrainConfig {
        seed: 7,
        probe_every: 10,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let run = pretrain(&config, &train, Some(&test))?;
    println!("random-init knn: {:?}", run.initial_knn);
    run.write_metrics(std::io::stdout())?;
    eprintln!("elapsed {:.1?}", start.elapsed());
    Ok(())
}
