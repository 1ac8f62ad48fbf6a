use std::thread;

use super::codec::{ImageCodec, ImageCoder};
use super::metrics::{mse_255, psnr_from_mse, CurvePoint, RdCurve};
use crate::error::{Error, Result};
use crate::licnet::Image;

/// Coding result of one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageResult {
    pub bits: usize,
    pub estimated_bits: f64,
    pub mse: f64,
}

/// Compresses and decompresses `image` with the real entropy coder.
pub fn code_image(coder: &ImageCoder<'_>, image: &Image) -> Result<ImageResult> {
    let (y, estimated_bits) = coder.analyze(image)?;
    let stream = coder.encode_latent(&y, coder.header(image, 0)?)?;
    let decoded = coder.decompress(&stream)?;
    Ok(ImageResult {
        bits: stream.payload_bits(),
        estimated_bits,
        mse: mse_255(&image.to_tensor(), &decoded.to_tensor())?,
    })
}

/// Per-image results in image order, split over `workers` threads.
pub fn code_images(
    coder: &ImageCoder<'_>,
    images: &[Image],
    workers: usize,
) -> Result<Vec<ImageResult>> {
    let workers = workers.clamp(1, images.len().max(1));
    if workers == 1 {
        return images.iter().map(|im| code_image(coder, im)).collect();
    }
    let chunk = images.len().div_ceil(workers);
    let parts: Vec<Result<Vec<ImageResult>>> = thread::scope(|s| {
        let handles: Vec<_> = images
            .chunks(chunk)
            .map(|part| {
                s.spawn(move || {
                    part.iter()
                        .map(|im| code_image(coder, im))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(Error::Numeric("evaluation worker panicked".into())))
            })
            .collect()
    });
    let mut out = Vec::with_capacity(images.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Averages per-image results into one operating point.
pub fn summarize(results: &[ImageResult], pixels: usize, lambda: f64) -> CurvePoint {
    let n = results.len().max(1) as f64;
    let bpp = results
        .iter()
        .map(|r| r.bits as f64 / pixels as f64)
        .sum::<f64>()
        / n;
    let distortion = results.iter().map(|r| r.mse).sum::<f64>() / n;
    CurvePoint {
        lambda,
        bpp,
        psnr_db: results.iter().map(|r| psnr_from_mse(r.mse)).sum::<f64>() / n,
        distortion,
        j: lambda * distortion + bpp,
        estimated_bpp: results
            .iter()
            .map(|r| r.estimated_bits / pixels as f64)
            .sum::<f64>()
            / n,
    }
}

/// One point per model (one model per λ), from actual bitstream sizes.
pub fn rd_curve(
    label: &str,
    models: &[&dyn ImageCodec],
    images: &[Image],
    workers: usize,
) -> Result<RdCurve> {
    let first = images
        .first()
        .ok_or_else(|| Error::param("rd_curve needs at least one image"))?;
    if images
        .iter()
        .any(|im| (im.width, im.height) != (first.width, first.height))
    {
        return Err(Error::param("images of a curve must share one size"));
    }
    let bit_width = models.first().map_or(0, |m| m.bit_width());
    let points = models
        .iter()
        .map(|&m| {
            let coder = ImageCoder::new(m)?;
            let results = code_images(&coder, images, workers)?;
            Ok(summarize(&results, first.width * first.height, m.lambda()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RdCurve {
        label: label.to_string(),
        bit_width,
        points,
    })
}
