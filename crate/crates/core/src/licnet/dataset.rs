//! 8-bit grayscale images: binary PGM I/O, batching and a seeded synthetic corpus.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image with {} pixels",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    /// `[1, 1, H, W]` tensor with values in `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.pixels.iter().map(|&p| f64::from(p) / 255.0).collect();
        Tensor::new(vec![1, 1, self.height, self.width], data).expect("shape matches pixel count")
    }

    /// Inverse of [`Image::to_tensor`], rounding to the nearest 8-bit level.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let &[1, 1, h, w] = t.shape() else {
            return Err(Error::shape(format!(
                "expected [1, 1, H, W], got {:?}",
                t.shape()
            )));
        };
        let pixels = t
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(w, h, pixels)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut pixels = Vec::with_capacity(self.pixels.len());
        for row in self.pixels.chunks(self.width) {
            pixels.extend(row.iter().rev());
        }
        Self {
            pixels,
            ..self.clone()
        }
    }

    pub fn flip_vertical(&self) -> Self {
        let pixels = self
            .pixels
            .chunks(self.width)
            .rev()
            .flatten()
            .copied()
            .collect();
        Self {
            pixels,
            ..self.clone()
        }
    }

    pub fn transpose(&self) -> Self {
        let (w, h) = (self.width, self.height);
        let pixels = (0..w * h)
            .map(|i| self.pixels[(i % h) * w + i / h])
            .collect();
        Self {
            width: h,
            height: w,
            pixels,
        }
    }

    /// The `width`×`height` window with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Result<Self> {
        if x0 + width > self.width || y0 + height > self.height {
            return Err(Error::shape(format!(
                "crop {width}x{height} at ({x0}, {y0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let pixels = self
            .pixels
            .chunks(self.width)
            .skip(y0)
            .take(height)
            .flat_map(|r| &r[x0..x0 + width])
            .copied()
            .collect();
        Self::new(width, height, pixels)
    }

    /// Parses a binary (`P5`) 8-bit PGM.
    pub fn from_pgm(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PGM header".into()));
            }
            fields.push(
                std::str::from_utf8(&bytes[start..pos])
                    .map_err(|_| Error::Format("non-ASCII PGM header".into()))?,
            );
        }
        if fields[0] != "P5" {
            return Err(Error::Format(format!(
                "unsupported PGM magic {:?}",
                fields[0]
            )));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::Format(format!("bad PGM field {s:?}")))
        };
        let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        if maxval != 255 {
            return Err(Error::Format(format!(
                "only 8-bit PGM is supported, maxval {maxval}"
            )));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let end = pos + w * h;
        if end > bytes.len() {
            return Err(Error::Format("truncated PGM raster".into()));
        }
        Self::new(w, h, bytes[pos..end].to_vec())
    }

    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn read_pgm(path: &Path) -> Result<Self> {
        Self::from_pgm(&fs::read(path)?)
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_pgm())?;
        Ok(())
    }
}

/// Stacks images of equal size into a `[B, 1, H, W]` batch.
pub fn batch(images: &[&Image]) -> Result<Tensor> {
    let parts: Vec<Tensor> = images.iter().map(|i| i.to_tensor()).collect();
    Tensor::stack_outer(&parts)
}

/// Reads every `*.pgm` in a directory, sorted by file name.
pub fn read_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
        .collect();
    paths.sort();
    paths.iter().map(|p| Image::read_pgm(p)).collect()
}

/// Width range, in pixels, of the blurred shape boundaries.
const EDGE_SOFTNESS: std::ops::Range<f64> = 0.8..2.5;

/// Coverage of a blurred edge at signed distance `d` (positive inside).
fn edge(d: f64, soft: f64) -> f64 {
    1.0 / (1.0 + (-d / soft).exp())
}

/// A procedural grayscale scene: a smooth gradient background, a few flat
/// rectangles and discs with blurred borders, one sinusoidal texture patch and
/// mild sensor noise.
pub fn synthetic_image<R: Rng + ?Sized>(rng: &mut R, size: usize) -> Image {
    let n = size as f64;
    let (gx, gy) = (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let base = rng.gen_range(0.25..0.75);
    let mut img: Vec<f64> = (0..size * size)
        .map(|i| {
            let (x, y) = ((i % size) as f64 / n - 0.5, (i / size) as f64 / n - 0.5);
            base + 0.35 * (gx * x + gy * y)
        })
        .collect();

    for _ in 0..rng.gen_range(1..4) {
        let (x0, y0) = (rng.gen_range(0..size), rng.gen_range(0..size));
        let (w, h) = (
            rng.gen_range(size / 8..size / 2),
            rng.gen_range(size / 8..size / 2),
        );
        let v = rng.gen_range(0.0..1.0);
        let soft = rng.gen_range(EDGE_SOFTNESS);
        let (x0, y0, x1, y1) = (x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
        for (i, p) in img.iter_mut().enumerate() {
            let (x, y) = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
            let inside = (x - x0).min(x1 - x).min(y - y0).min(y1 - y);
            let a = edge(inside, soft);
            *p = *p * (1.0 - a) + v * a;
        }
    }
    for _ in 0..rng.gen_range(1..3) {
        let (cx, cy) = (rng.gen_range(0.0..n), rng.gen_range(0.0..n));
        let r = rng.gen_range(n / 10.0..n / 4.0);
        let v = rng.gen_range(0.0..1.0);
        let soft = rng.gen_range(EDGE_SOFTNESS);
        for (i, p) in img.iter_mut().enumerate() {
            let (dx, dy) = ((i % size) as f64 - cx, (i / size) as f64 - cy);
            let a = edge(r - dx.hypot(dy), soft);
            *p = *p * (1.0 - a) + v * a;
        }
    }
    {
        let (x0, y0) = (rng.gen_range(0..size / 2), rng.gen_range(0..size / 2));
        let side = size / 3;
        let (fx, fy) = (rng.gen_range(0.05..0.4), rng.gen_range(0.05..0.4));
        let amp = rng.gen_range(0.05..0.15);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                img[y * size + x] += amp * (fx * x as f64 + fy * y as f64).sin();
            }
        }
    }
    let pixels = img
        .iter()
        .map(|&v| {
            let noisy = v + rng.gen_range(-0.01..0.01);
            (noisy.clamp(0.0, 1.0) * 255.0).round() as u8
        })
        .collect();
    Image {
        width: size,
        height: size,
        pixels,
    }
}

/// `count` synthetic images from a dedicated seed.
pub fn synthetic_set(count: usize, size: usize, seed: u64) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| synthetic_image(&mut rng, size))
        .collect()
}
