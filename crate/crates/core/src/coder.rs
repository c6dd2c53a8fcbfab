//! Binary range coder with carry propagation, driven by adaptive
//! Krichevsky–Trofimov estimates.
//!
//! The coder keeps a 32-bit range and a 33-bit low end; bytes are emitted
//! most significant first, with a pending `0xFF` run absorbing carries. The
//! always-zero first byte is not written and the flush writes four bytes, so
//! a stream is exactly as long as the decoder reads and streams can be
//! concatenated without length prefixes.

use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
/// Counts are halved once their doubled total would exceed this.
const COUNT_LIMIT: u32 = 1 << 16;

/// Sequential KT estimate for one binary context: after `a` zeros and `b`
/// ones, `P(0) = (a + 1/2) / (a + b + 1)`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KtModel {
    zeros: u32,
    ones: u32,
}

impl KtModel {
    pub fn new() -> Self {
        Self::default()
    }

    /// Numerator and denominator of `P(0)`, both doubled to stay integral.
    fn p0(&self) -> (u64, u64) {
        (2 * self.zeros as u64 + 1, 2 * (self.zeros + self.ones) as u64 + 2)
    }

    /// Probability of `bit` under the current counts.
    pub fn probability(&self, bit: bool) -> f64 {
        let (num, den) = self.p0();
        let p0 = num as f64 / den as f64;
        if bit {
            1.0 - p0
        } else {
            p0
        }
    }

    fn update(&mut self, bit: bool) {
        if bit {
            self.ones += 1;
        } else {
            self.zeros += 1;
        }
        if 2 * (self.zeros + self.ones) + 2 > COUNT_LIMIT {
            self.zeros /= 2;
            self.ones /= 2;
        }
    }
}

fn split(range: u32, model: &KtModel) -> u32 {
    let (num, den) = model.p0();
    ((range as u64 * num) / den) as u32
}

#[derive(Debug)]
pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    started: bool,
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
            range: u32::MAX,
            cache: 0,
            pending: 1,
            started: false,
            out: Vec::new(),
        }
    }

    pub fn encode(&mut self, model: &mut KtModel, bit: bool) {
        let bound = split(self.range, model);
        if bit {
            self.low += bound as u64;
            self.range -= bound;
        } else {
            self.range = bound;
        }
        model.update(bit);
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn emit(&mut self, byte: u8) {
        if self.started {
            self.out.push(byte);
        } else {
            debug_assert_eq!(byte, 0, "leading byte is always zero");
            self.started = true;
        }
    }

    fn shift_low(&mut self) {
        if (self.low as u32) < 0xFF00_0000 || self.low >> 32 != 0 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            while self.pending > 0 {
                self.emit(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        self.out
    }
}

#[derive(Debug)]
pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        let mut d = Self {
            code: 0,
            range: u32::MAX,
            input,
            pos: 0,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self
            .input
            .get(self.pos)
            .ok_or(Error::Truncated("arithmetic-coded payload"))?;
        self.pos += 1;
        Ok(b)
    }

    pub fn decode(&mut self, model: &mut KtModel) -> Result<bool> {
        let bound = split(self.range, model);
        let bit = if self.code < bound {
            self.range = bound;
            false
        } else {
            self.code -= bound;
            self.range -= bound;
            true
        };
        model.update(bit);
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(bit)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }
}

/// Context set for one index grid: a relevant/discarded flag, then the
/// codeword bits most significant first, each bit position adapting on its own.
#[derive(Clone, Debug)]
pub struct IndexModel {
    flag: KtModel,
    bits: Vec<KtModel>,
}

impl IndexModel {
    pub fn new(log2_codebook: u8) -> Self {
        Self {
            flag: KtModel::new(),
            bits: vec![KtModel::new(); log2_codebook as usize],
        }
    }

    pub fn encode(&mut self, enc: &mut RangeEncoder, index: i32) {
        enc.encode(&mut self.flag, index >= 0);
        if index >= 0 {
            let n = self.bits.len();
            for (i, m) in self.bits.iter_mut().enumerate() {
                enc.encode(m, (index >> (n - 1 - i)) & 1 == 1);
            }
        }
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder<'_>) -> Result<i32> {
        if !dec.decode(&mut self.flag)? {
            return Ok(-1);
        }
        let mut index = 0i32;
        for m in self.bits.iter_mut() {
            index = (index << 1) | dec.decode(m)? as i32;
        }
        Ok(index)
    }
}
