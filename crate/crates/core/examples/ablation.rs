//! One ablation over a small λ ladder, evaluated with real bitstreams.
//!
//! cargo run --release --example ablation -- [init|granularity|bias|calibsize|bitwidth|methods] [train steps]

use rdoq::calib::CalibConfig;
use rdoq::eval::{run_ablation, Ablation};
use rdoq::licnet::dataset::synthetic_set;
use rdoq::licnet::{train_float, TrainConfig};

fn main() -> rdoq::Result<()> {
    let mut args = std::env::args().skip(1);
    let ablation: Ablation = args.next().as_deref().unwrap_or("methods").parse()?;
    let steps: usize = args.next().map_or(1500, |s| s.parse().expect("steps"));
    let train = synthetic_set(32, 64, 1);
    let models = [0.0018, 0.013, 0.0483]
        .iter()
        .map(|&l| {
            Ok(train_float(
                &train,
                l,
                &TrainConfig {
                    steps,
                    lr: 3e-3,
                    seed: 7,
                    ..TrainConfig::default()
                },
            )?
            .0)
        })
        .collect::<rdoq::Result<Vec<_>>>()?;
    let calib = synthetic_set(20, 64, 3);
    let test = synthetic_set(8, 64, 2);
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let table = run_ablation(
        ablation,
        &models,
        &calib,
        &test,
        &CalibConfig::default(),
        workers,
    )?;
    print!("{}", table.to_csv());
    for (name, bd) in table.bd_rates() {
        match bd {
            Ok(v) => println!("{name:<16} BD-rate {v:+.2}%"),
            Err(e) => println!("{name:<16} BD-rate unavailable: {e}"),
        }
    }
    Ok(())
}
