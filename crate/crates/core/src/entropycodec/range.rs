//! Carry-less range coder (Subbotin) with a 64-bit state.

use super::cdf::{CdfTable, PRECISION};
use crate::error::{Error, Result};

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 48;
/// Raw escaped values are sent as 16-bit two's complement.
pub const ESCAPE_BITS: u32 = 16;

pub struct RangeEncoder {
    low: u64,
    range: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        Self {
            low: 0,
            range: u64::MAX,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[cum, cum + freq)` out of `1 << bits`.
    pub fn encode(&mut self, cum: u32, freq: u32, bits: u32) {
        debug_assert!(freq > 0 && u64::from(cum) + u64::from(freq) <= 1 << bits);
        self.range >>= bits;
        self.low = self.low.wrapping_add(u64::from(cum) * self.range);
        self.range *= u64::from(freq);
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..8 {
            self.out.push((self.low >> 56) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        if input.len() < 8 {
            return Err(Error::CorruptStream(
                "range-coded payload shorter than its flush".into(),
            ));
        }
        let mut d = Self {
            low: 0,
            range: u64::MAX,
            code: 0,
            input,
            pos: 0,
        };
        for _ in 0..8 {
            d.code = (d.code << 8) | u64::from(d.next_byte()?);
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or_else(|| Error::CorruptStream("payload ended early".into()))?;
        self.pos += 1;
        Ok(b)
    }

    /// Target frequency in `[0, 1 << bits)`; must be followed by [`Self::consume`].
    pub fn peek(&mut self, bits: u32) -> u32 {
        self.range >>= bits;
        let v = self.code.wrapping_sub(self.low) / self.range.max(1);
        v.min((1u64 << bits) - 1) as u32
    }

    pub fn consume(&mut self, cum: u32, freq: u32) -> Result<()> {
        self.low = self.low.wrapping_add(u64::from(cum) * self.range);
        self.range *= u64::from(freq);
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | u64::from(self.next_byte()?);
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    /// True when every byte has been read.
    pub fn exhausted(&self) -> bool {
        self.pos == self.input.len()
    }
}

fn escape_raw(value: i32) -> Result<u32> {
    i16::try_from(value)
        .map(|v| u32::from(v as u16))
        .map_err(|_| {
            Error::param(format!(
                "escaped value {value} does not fit {ESCAPE_BITS} bits"
            ))
        })
}

/// Appends each `symbols[i]` coded with row `rows[i]` of `table`.
pub fn encode_symbols(
    enc: &mut RangeEncoder,
    symbols: &[i32],
    rows: &[usize],
    table: &CdfTable,
) -> Result<()> {
    if symbols.len() != rows.len() {
        return Err(Error::shape("one table row is needed per symbol"));
    }
    for (&s, &r) in symbols.iter().zip(rows) {
        let row = table.row(r)?;
        match (row.index_of(s), row.escape_index()) {
            (Some(i), _) => enc.encode(row.cdf()[i], row.frequency(i), PRECISION),
            (None, Some(e)) => {
                enc.encode(row.cdf()[e], row.frequency(e), PRECISION);
                enc.encode(escape_raw(s)?, 1, ESCAPE_BITS);
            }
            (None, None) => {
                return Err(Error::param(format!(
                    "symbol {s} outside a table without escape"
                )))
            }
        }
    }
    Ok(())
}

pub fn decode_symbols(
    dec: &mut RangeDecoder<'_>,
    rows: &[usize],
    table: &CdfTable,
) -> Result<Vec<i32>> {
    let mut out = Vec::with_capacity(rows.len());
    for &r in rows {
        let row = table.row(r)?;
        let target = dec.peek(PRECISION);
        let i = row.lookup(target);
        dec.consume(row.cdf()[i], row.frequency(i))?;
        if Some(i) == row.escape_index() {
            let raw = dec.peek(ESCAPE_BITS);
            dec.consume(raw, 1)?;
            out.push(i32::from(raw as u16 as i16));
        } else {
            out.push(row.offset() + i as i32);
        }
    }
    Ok(out)
}

/// Single-table convenience: encodes `symbols` into a standalone payload.
pub fn encode(symbols: &[i32], rows: &[usize], table: &CdfTable) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    encode_symbols(&mut enc, symbols, rows, table)?;
    Ok(enc.finish())
}

pub fn decode(payload: &[u8], rows: &[usize], table: &CdfTable) -> Result<Vec<i32>> {
    if rows.is_empty() && payload.is_empty() {
        return Ok(Vec::new());
    }
    let mut dec = RangeDecoder::new(payload)?;
    decode_symbols(&mut dec, rows, table)
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::entropycodec::cdf::build_cdf;

    #[test]
    fn round_trip_with_escapes() {
        let table = build_cdf(2, -4, 4, true, |r, v| {
            if r == 0 {
                0.1
            } else {
                (-(v as f64).abs()).exp() / 2.2
            }
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let syms: Vec<i32> = (0..5000).map(|_| rng.gen_range(-40..40)).collect();
        let rows: Vec<usize> = (0..5000).map(|i| i % 2).collect();
        let bytes = encode(&syms, &rows, &table).unwrap();
        assert_eq!(decode(&bytes, &rows, &table).unwrap(), syms);
    }

    #[test]
    fn skewed_source_is_cheap() {
        let table = build_cdf(1, 0, 1, false, |_, v| if v == 0 { 0.999 } else { 0.001 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let syms: Vec<i32> = (0..10_000)
            .map(|_| i32::from(rng.gen_bool(0.001)))
            .collect();
        let rows = vec![0; syms.len()];
        let bytes = encode(&syms, &rows, &table).unwrap();
        let bits_per_symbol = bytes.len() as f64 * 8.0 / syms.len() as f64;
        assert!(bits_per_symbol < 0.05, "{bits_per_symbol}");
        assert_eq!(decode(&bytes, &rows, &table).unwrap(), syms);
    }

    #[test]
    fn out_of_range_without_escape_fails() {
        let table = build_cdf(1, 0, 3, false, |_, _| 0.25).unwrap();
        assert!(encode(&[9], &[0], &table).is_err());
        assert!(encode(
            &[70_000],
            &[0],
            &build_cdf(1, 0, 3, true, |_, _| 0.2).unwrap()
        )
        .is_err());
    }

    #[test]
    fn empty_input() {
        let table = build_cdf(1, 0, 3, false, |_, _| 0.25).unwrap();
        assert_eq!(decode(&[], &[], &table).unwrap(), Vec::<i32>::new());
        let bytes = encode(&[], &[], &table).unwrap();
        assert_eq!(decode(&bytes, &[], &table).unwrap(), Vec::<i32>::new());
    }

    #[test]
    fn truncated_payload_errors() {
        let table = build_cdf(1, 0, 255, false, |_, _| 1.0 / 256.0).unwrap();
        let syms: Vec<i32> = (0..100).collect();
        let rows = vec![0; 100];
        let bytes = encode(&syms, &rows, &table).unwrap();
        assert!(decode(&bytes[..bytes.len() / 2], &rows, &table).is_err());
    }
}
