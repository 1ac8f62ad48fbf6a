//! Compresses a PGM image to a bitstream with an 8-bit integer codec and
//! decodes it back.
//!
//! cargo run --release --example codec_roundtrip -- [image.pgm] [model.rdoq]
//!
//! Defaults to a synthetic image and a briefly trained codec.

use rdoq::calib::{minmax_baseline, CalibConfig};
use rdoq::entropycodec::Bitstream;
use rdoq::eval::metrics::psnr;
use rdoq::eval::{ImageCodec, ImageCoder};
use rdoq::licnet::dataset::synthetic_set;
use rdoq::licnet::{train_float, Container, Image, TrainConfig};

fn main() -> rdoq::Result<()> {
    let mut args = std::env::args().skip(1);
    let image = match args.next() {
        Some(p) => Image::read_pgm(p.as_ref())?,
        None => synthetic_set(1, 64, 2).remove(0),
    };
    let model = match args.next() {
        Some(p) => Container::from_bytes(&std::fs::read(p)?)?.model,
        None => {
            train_float(
                &synthetic_set(32, 64, 1),
                0.013,
                &TrainConfig {
                    steps: 1500,
                    lr: 3e-3,
                    ..TrainConfig::default()
                },
            )?
            .0
        }
    };
    let q = minmax_baseline(
        &model,
        &synthetic_set(10, 64, 3),
        &CalibConfig::minmax_baseline(8),
    )?;

    for (name, codec) in [
        ("float", &model as &dyn ImageCodec),
        ("int8", &q as &dyn ImageCodec),
    ] {
        let coder = ImageCoder::new(codec)?;
        let (_, estimate) = coder.analyze(&image)?;
        let bytes = coder.compress(&image, 0)?.to_bytes();
        let decoded = coder.decompress(&Bitstream::from_bytes(&bytes)?)?;
        let pixels = (image.width * image.height) as f64;
        println!(
            "{name:<5} {} bytes ({:.4} bpp, estimate {:.4})  PSNR {:.2} dB",
            bytes.len(),
            Bitstream::from_bytes(&bytes)?.payload_bits() as f64 / pixels,
            estimate / pixels,
            psnr(&image.to_tensor(), &decoded.to_tensor())?
        );
    }
    Ok(())
}
