//! Carry-less range coder (Subbotin) on a 64-bit state with 16-bit
//! frequencies. The wide state keeps the per-symbol truncation loss below
//! 2^-32 and the final flush needs only two bytes.

use super::cdf::{CdfTable, PRECISION_BITS};
use crate::error::{Error, Result};

const TOP: u64 = 1 << 56;
const BOT: u64 = 1 << 48;
/// Bytes the decoder reads beyond the end of a well-formed stream.
const TAIL: usize = 6;
/// Escaped values are sent as a raw 16-bit two's-complement word.
pub const RAW_BITS: u32 = 16;

#[derive(Debug)]
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
        RangeEncoder { low: 0, range: u64::MAX, out: Vec::new() }
    }

    /// Codes the interval `[start, start + freq)` out of `2^16`.
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= 1 << PRECISION_BITS);
        self.range >>= PRECISION_BITS;
        self.low = self.low.wrapping_add(start as u64 * self.range);
        self.range *= freq as u64;
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

    /// A value from a table, escaping out-of-support values.
    pub fn encode_symbol(&mut self, table: &CdfTable, v: i32) -> Result<()> {
        match table.slot_of(v) {
            Some(slot) => {
                let (s, f) = table.range(slot);
                self.encode(s, f);
            }
            None => {
                let raw = i16::try_from(v)
                    .map_err(|_| Error::Contract(format!("latent value {v} exceeds the 16-bit escape range")))?;
                let (s, f) = table.range(table.escape_slot());
                self.encode(s, f);
                self.encode_raw16(raw as u16);
            }
        }
        Ok(())
    }

    pub fn encode_raw16(&mut self, v: u16) {
        let step = 1 << (PRECISION_BITS - 8);
        self.encode((v >> 8) as u32 * step, step);
        self.encode((v & 0xff) as u32 * step, step);
    }

    /// Emits the two leading bytes of the first multiple of `2^48` inside
    /// the final interval; the decoder pads with zeros.
    pub fn finish(mut self) -> Vec<u8> {
        let v = self.low.div_ceil(BOT) * BOT;
        debug_assert!(v.wrapping_sub(self.low) < self.range);
        self.out.push((v >> 56) as u8);
        self.out.push((v >> 48) as u8);
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    low: u64,
    range: u64,
    code: u64,
    buf: &'a [u8],
    pos: usize,
    /// Offset of `buf` within the enclosing bitstream, for error messages.
    base: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(buf: &'a [u8], base: usize) -> Result<Self> {
        let mut d = RangeDecoder { low: 0, range: u64::MAX, code: 0, buf, pos: 0, base };
        for _ in 0..8 {
            d.code = (d.code << 8) | d.next_byte()? as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = match self.buf.get(self.pos) {
            Some(&b) => b,
            None if self.pos < self.buf.len() + TAIL => 0,
            None => {
                return Err(Error::Decode { offset: self.base + self.buf.len(), msg: "stream truncated".into() });
            }
        };
        self.pos += 1;
        Ok(b)
    }

    pub fn position(&self) -> usize {
        self.base + self.pos.min(self.buf.len())
    }

    /// Target frequency for the next symbol; call [`Self::consume`] after.
    pub fn peek(&mut self) -> Result<u32> {
        self.range >>= PRECISION_BITS;
        if self.range == 0 {
            return Err(self.corrupt("range collapsed"));
        }
        let v = self.code.wrapping_sub(self.low) / self.range;
        if v >= 1 << PRECISION_BITS {
            return Err(self.corrupt("target outside the frequency range"));
        }
        Ok(v as u32)
    }

    pub fn consume(&mut self, start: u32, freq: u32) -> Result<()> {
        self.low = self.low.wrapping_add(start as u64 * self.range);
        self.range *= freq as u64;
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) >= TOP {
                if self.range >= BOT {
                    break;
                }
                self.range = self.low.wrapping_neg() & (BOT - 1);
            }
            self.code = (self.code << 8) | self.next_byte()? as u64;
            self.low <<= 8;
            self.range <<= 8;
        }
        Ok(())
    }

    fn corrupt(&self, msg: &str) -> Error {
        Error::Decode { offset: self.position(), msg: msg.into() }
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i32> {
        let target = self.peek()?;
        let slot = table.lookup(target);
        let (s, f) = table.range(slot);
        self.consume(s, f)?;
        if slot == table.escape_slot() {
            Ok(self.decode_raw16()? as i16 as i32)
        } else {
            Ok(table.value_of(slot))
        }
    }

    pub fn decode_raw16(&mut self) -> Result<u16> {
        let step = 1u32 << (PRECISION_BITS - 8);
        let mut v = 0u16;
        for _ in 0..2 {
            let b = self.peek()? / step;
            self.consume(b * step, step)?;
            v = (v << 8) | b as u16;
        }
        Ok(v)
    }

    /// Fails unless the stream ended exactly where the encoder stopped.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() + TAIL {
            return Err(Error::Decode {
                offset: self.position(),
                msg: "stream length does not match its content".into(),
            });
        }
        Ok(())
    }
}

/// Codes a sequence of values, one table each.
pub fn range_encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::dim("tables", symbols.len(), tables.len()));
    }
    let mut enc = RangeEncoder::new();
    for (v, t) in symbols.iter().zip(tables) {
        enc.encode_symbol(t, *v)?;
    }
    Ok(enc.finish())
}

pub fn range_decode(bytes: &[u8], tables: &[&CdfTable]) -> Result<Vec<i32>> {
    let mut dec = RangeDecoder::new(bytes, 0)?;
    let out = tables.iter().map(|t| dec.decode_symbol(t)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::cdf::{build_cdf, QuantParams, SUPPORT, TOTAL};
    use super::*;
    use crate::rng::Rng64;
    use proptest::prelude::*;

    fn two_symbol_table() -> CdfTable {
        // support 1 gives slots {-1, 0, 1, escape}; tilt the mass onto 0 and 1
        let t = build_cdf(QuantParams::new(0.5, -10.0), 1);
        assert_eq!(t.slots(), 4);
        t
    }

    #[test]
    fn empty_stream() {
        let bytes = range_encode(&[], &[]).unwrap();
        assert!(bytes.len() <= 8);
        assert!(range_decode(&bytes, &[]).unwrap().is_empty());
    }

    #[test]
    fn random_symbols_round_trip() {
        let mut rng = Rng64::new(5);
        let tables: Vec<CdfTable> = (0..64)
            .map(|_| build_cdf(QuantParams::new(rng.uniform(-5.0, 5.0) as f32, rng.uniform(-3.0, 3.0) as f32), SUPPORT))
            .collect();
        let mut syms = Vec::new();
        let mut refs = Vec::new();
        for _ in 0..10_000 {
            let t = &tables[rng.below(tables.len())];
            let v = if rng.below(50) == 0 { rng.uniform(-3000.0, 3000.0) as i32 } else { rng.uniform(-8.0, 8.0).round() as i32 };
            syms.push(v);
            refs.push(t);
        }
        let bytes = range_encode(&syms, &refs).unwrap();
        assert_eq!(range_decode(&bytes, &refs).unwrap(), syms);
    }

    #[test]
    fn uniform_binary_source_costs_one_bit() {
        let t = two_symbol_table();
        let (f0, f1) = (t.freq(1), t.freq(2));
        assert!(f0.abs_diff(f1) <= 1, "{f0} {f1}");
        let mut rng = Rng64::new(1);
        let syms: Vec<i32> = (0..8000).map(|_| rng.below(2) as i32).collect();
        let refs = vec![&t; syms.len()];
        let bytes = range_encode(&syms, &refs).unwrap();
        let ideal: f64 = syms.iter().map(|&v| -((t.freq(t.slot_of(v).unwrap()) as f64) / TOTAL as f64).log2()).sum();
        assert!((bytes.len() as f64 - 1000.0).abs() <= 10.0 + 8.0, "{} bytes", bytes.len());
        assert!(bytes.len() as f64 * 8.0 <= ideal + 64.0, "{} bytes, ideal {ideal} bits", bytes.len());
        assert_eq!(range_decode(&bytes, &refs).unwrap(), syms);
    }

    #[test]
    fn truncated_stream_reports_offset() {
        let t = build_cdf(QuantParams::new(0.0, 2.0), SUPPORT);
        let syms: Vec<i32> = (0..500).map(|i| (i % 13) - 6).collect();
        let refs = vec![&t; syms.len()];
        let bytes = range_encode(&syms, &refs).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        match range_decode(cut, &refs) {
            Err(Error::Decode { offset, .. }) => assert!(offset <= cut.len()),
            other => panic!("expected a decode error, got {other:?}"),
        }
    }

    #[test]
    fn oversized_escape_is_rejected() {
        let t = build_cdf(QuantParams::new(0.0, 0.0), 4);
        assert!(range_encode(&[40_000], &[&t]).is_err());
        let bytes = range_encode(&[-32768, 32767], &[&t, &t]).unwrap();
        assert_eq!(range_decode(&bytes, &[&t, &t]).unwrap(), vec![-32768, 32767]);
    }

    proptest! {
        #[test]
        fn round_trip_and_length_bound(
            params in prop::collection::vec((-6.0f32..6.0, -6.0f32..4.0), 1..8),
            picks in prop::collection::vec((0usize..8, -20i32..20), 0..400),
        ) {
            let tables: Vec<CdfTable> = params.iter().map(|&(m, s)| build_cdf(QuantParams::new(m, s), 16)).collect();
            let refs: Vec<&CdfTable> = picks.iter().map(|&(i, _)| &tables[i % tables.len()]).collect();
            let syms: Vec<i32> = picks.iter().map(|&(_, v)| v).collect();
            let bytes = range_encode(&syms, &refs).unwrap();
            prop_assert_eq!(range_decode(&bytes, &refs).unwrap(), syms.clone());
            let ideal: f64 = syms.iter().zip(&refs).map(|(&v, t)| match t.slot_of(v) {
                Some(s) => -(t.freq(s) as f64 / TOTAL as f64).log2(),
                None => -(t.freq(t.escape_slot()) as f64 / TOTAL as f64).log2() + 16.0,
            }).sum();
            prop_assert!(bytes.len() as f64 * 8.0 <= ideal + 64.0, "{} bits vs ideal {}", bytes.len() * 8, ideal);
        }
    }
}
