//! Layer-by-layer RDO calibration of a float codec, compared with the
//! Min-Max baseline on the calibration set.
//!
//! cargo run --release --example calibrate_codec -- [model.rdoq] [bits]
//!
//! Without a model file a small codec is trained first (about a minute).

use rdoq::calib::{minmax_baseline, CalibConfig, Calibrator};
use rdoq::licnet::dataset::{batch, synthetic_set};
use rdoq::licnet::{train_float, Container, LicModel, RoundMode, TrainConfig};

fn load_or_train(path: Option<String>) -> rdoq::Result<LicModel> {
    match path {
        Some(p) => Ok(Container::from_bytes(&std::fs::read(p)?)?.model),
        None => {
            let cfg = TrainConfig {
                steps: 1500,
                lr: 3e-3,
                seed: 7,
                ..TrainConfig::default()
            };
            Ok(train_float(&synthetic_set(32, 64, 1), 0.013, &cfg)?.0)
        }
    }
}

fn main() -> rdoq::Result<()> {
    let mut args = std::env::args().skip(1);
    let model = load_or_train(args.next())?;
    let bits: u32 = args.next().map_or(8, |s| s.parse().expect("bits"));
    let calib = synthetic_set(10, 64, 3);
    let x = batch(&calib.iter().collect::<Vec<_>>())?;

    let cfg = CalibConfig {
        bit_width: bits,
        ..CalibConfig::default()
    };
    let mut c = Calibrator::new(&model, &calib, &cfg)?;
    println!("float J0 {:.5}", c.j0());
    while !c.is_done() {
        let r = c.calibrate_next()?;
        println!(
            "layer {:>2} {:<13} loss {:.5} -> {:.5}  ({:.1} s)",
            r.index,
            format!("{:?}", r.role),
            r.init_loss,
            r.final_loss,
            r.wall_s
        );
    }
    let (rdo, _) = c.finish()?;
    let minmax = minmax_baseline(&model, &calib, &CalibConfig::minmax_baseline(bits))?;

    let (_, float) = model.forward_rd(&x, RoundMode::Hard, None)?;
    println!("\n{:<8} {:>8} {:>9} {:>8}", "", "bpp", "mse", "J");
    println!(
        "{:<8} {:>8.4} {:>9.3} {:>8.4}",
        "float", float.bpp, float.distortion, float.j
    );
    for (name, q) in [("minmax", &minmax), ("rdo", &rdo)] {
        let (_, p) = q.forward_rd(&x)?;
        println!(
            "{name:<8} {:>8.4} {:>9.3} {:>8.4}",
            p.bpp, p.distortion, p.j
        );
    }
    Ok(())
}
