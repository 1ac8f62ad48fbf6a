use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const STREAM_MAGIC: &[u8; 4] = b"RDQB";
pub const HEADER_LEN: usize = 4 + 2 + 2 + 1 + 8 + 1 + 4 + 4;

/// Fixed-size stream header. `bit_width` 0 marks a float-model stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Header {
    pub width: u16,
    pub height: u16,
    pub lambda_index: u8,
    pub model_digest: [u8; 8],
    pub bit_width: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub header: Header,
    pub payload: Vec<u8>,
}

fn checksum(payload: &[u8]) -> [u8; 4] {
    let h = Sha256::digest(payload);
    [h[0], h[1], h[2], h[3]]
}

impl Header {
    /// Parses just the header, without touching the payload.
    pub fn parse(bytes: &[u8]) -> Result<(Self, usize, [u8; 4])> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::CorruptStream(
                "stream shorter than its header".into(),
            ));
        }
        if &bytes[..4] != STREAM_MAGIC {
            return Err(Error::CorruptStream("bad stream magic".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([bytes[i], bytes[i + 1]]);
        let mut model_digest = [0u8; 8];
        model_digest.copy_from_slice(&bytes[9..17]);
        let header = Self {
            width: u16_at(4),
            height: u16_at(6),
            lambda_index: bytes[8],
            model_digest,
            bit_width: bytes[17],
        };
        let len = u32::from_le_bytes([bytes[18], bytes[19], bytes[20], bytes[21]]) as usize;
        let sum = [bytes[22], bytes[23], bytes[24], bytes[25]];
        Ok((header, len, sum))
    }
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut out = Vec::with_capacity(HEADER_LEN + self.payload.len());
        out.extend_from_slice(STREAM_MAGIC);
        out.extend_from_slice(&h.width.to_le_bytes());
        out.extend_from_slice(&h.height.to_le_bytes());
        out.push(h.lambda_index);
        out.extend_from_slice(&h.model_digest);
        out.push(h.bit_width);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&checksum(&self.payload));
        out.extend_from_slice(&self.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, len, sum) = Header::parse(bytes)?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != len {
            return Err(Error::CorruptStream(format!(
                "payload is {} bytes, header says {len}",
                payload.len()
            )));
        }
        if checksum(payload) != sum {
            return Err(Error::CorruptStream("payload checksum mismatch".into()));
        }
        Ok(Self {
            header,
            payload: payload.to_vec(),
        })
    }

    /// Payload size in bits (the rate of the image).
    pub fn payload_bits(&self) -> usize {
        self.payload.len() * 8
    }

    pub fn bpp(&self) -> f64 {
        self.payload_bits() as f64
            / (usize::from(self.header.width) * usize::from(self.header.height)) as f64
    }
}
