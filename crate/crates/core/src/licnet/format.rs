//! The `RDOQ-M` v1 model container.
//!
//! ```text
//! magic "RDOQ-M\0\1"  version u16
//! latent u32  hyper u32  layer count u32
//! per layer: role u8, kind u8, in u32, out u32, kernel u32, stride u32, padding u32, relu u8
//! lambda f64  seed u64  steps u64
//! tensor count u32, per tensor: rank u8, dims u32..., f32 values
//! quant section: present u8, [length u64, bytes]
//! metadata: count u32, per entry: key str, value str  (str = u32 length + UTF-8)
//! ```
//! All integers and floats are little-endian.

use sha2::{Digest, Sha256};

use super::arch::{Architecture, LayerSpec, Role};
use super::model::{LayerParams, LicModel};
use crate::error::{Error, Result};
use crate::geometry::ConvKind;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RDOQ-M\0\x01";
pub const VERSION: u16 = 1;

/// A decoded container: the float model, an opaque quantization section and
/// free-form metadata (configuration digest, seed).
#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub model: LicModel,
    pub quant: Option<Vec<u8>>,
    pub meta: Vec<(String, String)>,
}

impl Container {
    pub fn float(model: LicModel) -> Self {
        Self {
            model,
            quant: None,
            meta: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let m = &self.model;
        let mut w = ByteWriter::default();
        w.bytes(MAGIC);
        w.u16(VERSION);
        w.u32(m.arch.latent_channels as u32);
        w.u32(m.arch.hyper_channels as u32);
        w.u32(m.arch.layers.len() as u32);
        for l in &m.arch.layers {
            w.u8(l.role.code());
            w.u8(matches!(l.kind, ConvKind::Transposed) as u8);
            for v in [l.in_channels, l.out_channels, l.kernel, l.stride, l.padding] {
                w.u32(v as u32);
            }
            w.u8(l.relu as u8);
        }
        w.f64(m.lambda);
        w.u64(m.seed);
        w.u64(m.steps);
        let tensors = m.params();
        w.u32(tensors.len() as u32);
        for t in tensors {
            w.u8(t.shape().len() as u8);
            for &d in t.shape() {
                w.u32(d as u32);
            }
            for &v in t.data() {
                w.bytes(&(v as f32).to_le_bytes());
            }
        }
        match &self.quant {
            Some(q) => {
                w.u8(1);
                w.u64(q.len() as u64);
                w.bytes(q);
            }
            None => w.u8(0),
        }
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.str(k);
            w.str(v);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Format("not an RDOQ-M container".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported container version {version}"
            )));
        }
        let latent_channels = r.u32()? as usize;
        let hyper_channels = r.u32()? as usize;
        let n_layers = r.u32()? as usize;
        if n_layers > 1024 {
            return Err(Error::Format(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let role = Role::from_code(r.u8()?)?;
            let kind = match r.u8()? {
                0 => ConvKind::Forward,
                1 => ConvKind::Transposed,
                k => return Err(Error::Format(format!("unknown layer kind {k}"))),
            };
            let mut f = [0usize; 5];
            for v in &mut f {
                *v = r.u32()? as usize;
            }
            let relu = r.u8()? != 0;
            let [in_channels, out_channels, kernel, stride, padding] = f;
            if kernel == 0 || stride == 0 {
                return Err(Error::Format("zero kernel or stride".into()));
            }
            layers.push(LayerSpec {
                role,
                kind,
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                relu,
            });
        }
        let arch = Architecture {
            layers,
            latent_channels,
            hyper_channels,
        };
        arch.validate()?;
        let lambda = r.f64()?;
        let seed = r.u64()?;
        let steps = r.u64()?;

        let n_tensors = r.u32()? as usize;
        let expected = 2 * arch.layers.len() + 1 + usize::from(arch.hyperprior());
        if n_tensors != expected {
            return Err(Error::Format(format!(
                "expected {expected} tensors, found {n_tensors}"
            )));
        }
        let mut tensors = Vec::with_capacity(n_tensors);
        for _ in 0..n_tensors {
            let rank = r.u8()? as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
                .collect();
            tensors.push(Tensor::new(shape, data)?);
        }
        let mut it = tensors.into_iter();
        let mut layer_params = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let weight = it.next().expect("count checked");
            let bias = it.next().expect("count checked");
            if weight.shape() != spec.weight_shape() || bias.shape() != [spec.out_channels] {
                return Err(Error::Format(
                    "tensor shape does not match the architecture".into(),
                ));
            }
            layer_params.push(LayerParams { weight, bias });
        }
        let entropy = it.next().expect("count checked");
        let hyper_entropy = it.next();

        let quant = match r.u8()? {
            0 => None,
            1 => {
                let len = r.u64()? as usize;
                Some(r.take(len)?.to_vec())
            }
            t => return Err(Error::Format(format!("bad quant section tag {t}"))),
        };
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            meta.push((r.str()?, r.str()?));
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after container".into()));
        }
        let model = LicModel {
            arch,
            layers: layer_params,
            entropy,
            hyper_entropy,
            lambda,
            seed,
            steps,
        };
        Ok(Self { model, quant, meta })
    }
}

/// Truncated 64-bit SHA-256 of arbitrary bytes.
pub fn digest64(bytes: &[u8]) -> [u8; 8] {
    let h = Sha256::digest(bytes);
    let mut out = [0u8; 8];
    out.copy_from_slice(&h[..8]);
    out
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
pub(crate) struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }

    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

pub(crate) struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end
            .ok_or_else(|| Error::Format(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("invalid UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip() {
        for hyper in [false, true] {
            let mut model = LicModel::new(Architecture::toy(hyper), 0.0067, 3).unwrap();
            for p in model.params_mut() {
                p.snap_to_f32();
            }
            let c = Container {
                model,
                quant: Some(vec![1, 2, 3]),
                meta: vec![("seed".into(), "3".into())],
            };
            let bytes = c.to_bytes();
            let back = Container::from_bytes(&bytes).unwrap();
            assert_eq!(back, c);
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let c = Container::float(LicModel::new(Architecture::toy(false), 0.013, 1).unwrap());
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(Container::from_bytes(&extra).is_err());
    }

    #[test]
    fn digest_is_stable() {
        assert_eq!(hex(&digest64(b"abc")), "ba7816bf8f01cfea");
    }
}
