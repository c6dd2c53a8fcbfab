//! The `.sqb` container: a fixed header followed by the image and
//! segmentation index grids.
//!
//! ```text
//! offset size field
//!      0    4 magic "SQGB"
//!      4    1 version (1)
//!      5    2 image height H, big-endian
//!      7    2 image width W
//!      9    1 log2 J
//!     10    1 payload mode: 0 fixed width, 1 arithmetic
//!     11    4 N_x, codewords kept in the image grid
//!     15    4 N_s, codewords kept in the segmentation grid
//!     19      payload_x, then payload_s
//! ```
//!
//! Each grid holds `K = (H/16)(W/16)` symbols in row-major order over the
//! alphabet `{0..J-1} ∪ {-1}`. Mode 0 writes a `K`-bit selection mask
//! (1 = kept) followed by the kept indices in `log2 J` bits each, most
//! significant bit first, and pads each grid to a byte. Mode 1 range-codes
//! each grid separately (see [`crate::coder`]).

use crate::coder::{IndexModel, RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::latent::IndexGrid;

pub const MAGIC: [u8; 4] = *b"SQGB";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PayloadMode {
    Fixed = 0,
    Arithmetic = 1,
}

impl PayloadMode {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(Self::Fixed),
            1 => Ok(Self::Arithmetic),
            other => Err(Error::UnknownPayloadMode(other)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BitstreamHeader {
    pub height: u16,
    pub width: u16,
    pub log2_codebook: u8,
    pub mode: PayloadMode,
    pub n_x: u32,
    pub n_s: u32,
}

impl BitstreamHeader {
    pub fn latent_dims(&self) -> (usize, usize) {
        (self.height as usize / 16, self.width as usize / 16)
    }

    pub fn positions(&self) -> usize {
        let (h, w) = self.latent_dims();
        h * w
    }

    pub fn codebook_size(&self) -> usize {
        1 << self.log2_codebook
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 16 != 0 || self.width % 16 != 0 {
            return Err(Error::InvalidHeader(format!(
                "dimensions {}x{} are not positive multiples of 16",
                self.height, self.width
            )));
        }
        if !(1..=16).contains(&self.log2_codebook) {
            return Err(Error::InvalidHeader(format!(
                "log2 codebook size {} not in 1..=16",
                self.log2_codebook
            )));
        }
        let k = self.positions();
        for (what, n) in [("N_x", self.n_x), ("N_s", self.n_s)] {
            if n as usize > k {
                return Err(Error::InvalidHeader(format!("{what}={n} exceeds {k} positions")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..4].copy_from_slice(&MAGIC);
        b[4] = VERSION;
        b[5..7].copy_from_slice(&self.height.to_be_bytes());
        b[7..9].copy_from_slice(&self.width.to_be_bytes());
        b[9] = self.log2_codebook;
        b[10] = self.mode as u8;
        b[11..15].copy_from_slice(&self.n_x.to_be_bytes());
        b[15..19].copy_from_slice(&self.n_s.to_be_bytes());
        b
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Truncated("header"));
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic(magic));
        }
        if bytes.len() < HEADER_LEN {
            return Err(Error::Truncated("header"));
        }
        if bytes[4] != VERSION {
            return Err(Error::UnsupportedVersion(bytes[4]));
        }
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let u32_at = |i: usize| u32::from_be_bytes(bytes[i..i + 4].try_into().unwrap());
        let header = Self {
            height: u16_at(5),
            width: u16_at(7),
            log2_codebook: bytes[9],
            mode: PayloadMode::from_byte(bytes[10])?,
            n_x: u32_at(11),
            n_s: u32_at(15),
        };
        header.validate()?;
        Ok(header)
    }
}

fn check_grid(grid: &IndexGrid, header: &BitstreamHeader, n: u32, what: &'static str) -> Result<()> {
    if grid.dims() != header.latent_dims() {
        return Err(Error::Shape(format!(
            "{what} grid is {:?}, header implies {:?}",
            grid.dims(),
            header.latent_dims()
        )));
    }
    grid.check_range(header.codebook_size())?;
    let actual = grid.count_selected();
    if actual != n as usize {
        return Err(Error::CountMismatch {
            what,
            expected: n as usize,
            actual,
        });
    }
    Ok(())
}

/// Writes the header and both payloads.
pub fn serialize(ix: &IndexGrid, is: &IndexGrid, header: &BitstreamHeader) -> Result<Vec<u8>> {
    header.validate()?;
    check_grid(ix, header, header.n_x, "image")?;
    check_grid(is, header, header.n_s, "segmentation")?;
    let mut out = header.to_bytes().to_vec();
    for grid in [ix, is] {
        match header.mode {
            PayloadMode::Fixed => write_fixed(&mut out, grid, header),
            PayloadMode::Arithmetic => out.extend(encode_arithmetic(grid, header.log2_codebook)),
        }
    }
    Ok(out)
}

/// Parses a complete stream; every byte must be accounted for.
pub fn deserialize(bytes: &[u8]) -> Result<(IndexGrid, IndexGrid, BitstreamHeader)> {
    let header = BitstreamHeader::parse(bytes)?;
    let mut pos = HEADER_LEN;
    let mut grids = Vec::with_capacity(2);
    for (what, n) in [("image", header.n_x), ("segmentation", header.n_s)] {
        let (grid, used) = match header.mode {
            PayloadMode::Fixed => read_fixed(&bytes[pos..], &header, n)?,
            PayloadMode::Arithmetic => decode_arithmetic(&bytes[pos..], &header, n)?,
        };
        pos += used;
        let actual = grid.count_selected();
        if actual != n as usize {
            return Err(Error::CountMismatch {
                what,
                expected: n as usize,
                actual,
            });
        }
        grids.push(grid);
    }
    if pos != bytes.len() {
        return Err(Error::TrailingBytes(bytes.len() - pos));
    }
    let is = grids.pop().unwrap();
    let ix = grids.pop().unwrap();
    Ok((ix, is, header))
}

/// Bytes of one mode-0 grid holding `n` kept codewords.
pub fn fixed_grid_bytes(header: &BitstreamHeader, n: u32) -> usize {
    (header.positions() + n as usize * header.log2_codebook as usize).div_ceil(8)
}

struct BitWriter<'a> {
    out: &'a mut Vec<u8>,
    acc: u64,
    filled: u32,
}

impl BitWriter<'_> {
    fn put(&mut self, value: u64, width: u32) {
        self.acc = (self.acc << width) | value;
        self.filled += width;
        while self.filled >= 8 {
            self.filled -= 8;
            self.out.push((self.acc >> self.filled) as u8);
        }
        self.acc &= (1u64 << self.filled) - 1;
    }

    fn finish(self) {
        if self.filled > 0 {
            self.out.push((self.acc << (8 - self.filled)) as u8);
        }
    }
}

struct BitReader<'a> {
    bytes: std::slice::Iter<'a, u8>,
    acc: u64,
    filled: u32,
}

impl BitReader<'_> {
    fn get(&mut self, width: u32) -> u64 {
        while self.filled < width {
            self.acc = (self.acc << 8) | *self.bytes.next().unwrap_or(&0) as u64;
            self.filled += 8;
        }
        self.filled -= width;
        let v = self.acc >> self.filled;
        self.acc &= (1u64 << self.filled) - 1;
        v
    }
}

fn write_fixed(out: &mut Vec<u8>, grid: &IndexGrid, header: &BitstreamHeader) {
    let mut w = BitWriter { out, acc: 0, filled: 0 };
    for &i in grid.indices() {
        w.put((i >= 0) as u64, 1);
    }
    for &i in grid.indices().iter().filter(|&&i| i >= 0) {
        w.put(i as u64, header.log2_codebook as u32);
    }
    w.finish();
}

fn read_fixed(bytes: &[u8], header: &BitstreamHeader, n: u32) -> Result<(IndexGrid, usize)> {
    let mut r = BitReader {
        bytes: bytes.iter(),
        acc: 0,
        filled: 0,
    };
    let k = header.positions();
    let kept: Vec<bool> = (0..k).map(|_| r.get(1) == 1).collect();
    let actual = kept.iter().filter(|&&b| b).count();
    if actual != n as usize {
        return Err(Error::CountMismatch {
            what: "selection mask",
            expected: n as usize,
            actual,
        });
    }
    let need = fixed_grid_bytes(header, n);
    if bytes.len() < need {
        return Err(Error::Truncated("fixed-width payload"));
    }
    let indices = kept
        .into_iter()
        .map(|b| if b { r.get(header.log2_codebook as u32) as i32 } else { IndexGrid::DISCARDED })
        .collect();
    let (h, w) = header.latent_dims();
    Ok((IndexGrid::new(h, w, indices)?, need))
}

/// Range-codes one grid. The result is self-delimiting.
pub fn encode_arithmetic(grid: &IndexGrid, log2_codebook: u8) -> Vec<u8> {
    let mut enc = RangeEncoder::new();
    let mut model = IndexModel::new(log2_codebook);
    for &i in grid.indices() {
        model.encode(&mut enc, i);
    }
    enc.finish()
}

fn decode_arithmetic(bytes: &[u8], header: &BitstreamHeader, n: u32) -> Result<(IndexGrid, usize)> {
    let mut dec = RangeDecoder::new(bytes)?;
    let mut model = IndexModel::new(header.log2_codebook);
    let k = header.positions();
    let mut indices = Vec::with_capacity(k.min(bytes.len() * 8 + 64));
    let mut kept = 0usize;
    for _ in 0..k {
        let i = model.decode(&mut dec)?;
        if i >= 0 {
            kept += 1;
            if kept > n as usize {
                return Err(Error::CountMismatch {
                    what: "arithmetic-coded",
                    expected: n as usize,
                    actual: kept,
                });
            }
        }
        indices.push(i);
    }
    let (h, w) = header.latent_dims();
    Ok((IndexGrid::new(h, w, indices)?, dec.position()))
}

/// Payload bits after the header, for reporting.
pub fn payload_bits(stream: &[u8]) -> u64 {
    (stream.len().saturating_sub(HEADER_LEN) * 8) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn header(mode: PayloadMode, ix: &IndexGrid, is: &IndexGrid) -> BitstreamHeader {
        BitstreamHeader {
            height: 256,
            width: 512,
            log2_codebook: 10,
            mode,
            n_x: ix.count_selected() as u32,
            n_s: is.count_selected() as u32,
        }
    }

    fn random_grid(rng: &mut impl Rng, p: f64) -> IndexGrid {
        let v = (0..512)
            .map(|_| if rng.gen_bool(p) { rng.gen_range(0..1024) } else { -1 })
            .collect();
        IndexGrid::new(16, 32, v).unwrap()
    }

    #[test]
    fn roundtrip_both_modes() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for mode in [PayloadMode::Fixed, PayloadMode::Arithmetic] {
            for p in [0.0, 0.3, 1.0] {
                let (a, b) = (random_grid(&mut rng, p), random_grid(&mut rng, 1.0 - p));
                let h = header(mode, &a, &b);
                let bytes = serialize(&a, &b, &h).unwrap();
                assert_eq!(deserialize(&bytes).unwrap(), (a, b, h));
            }
        }
    }

    #[test]
    fn fixed_payload_size() {
        let full = IndexGrid::new(16, 32, (0..512).map(|i| i * 2).collect()).unwrap();
        let h = header(PayloadMode::Fixed, &full, &full);
        let bytes = serialize(&full, &full, &h).unwrap();
        assert_eq!(payload_bits(&bytes), 2 * 512 * 11);
        let empty = IndexGrid::discarded(16, 32);
        let h = header(PayloadMode::Fixed, &empty, &full);
        assert_eq!(payload_bits(&serialize(&empty, &full, &h).unwrap()), 512 + 512 * 11);
    }

    #[test]
    fn arithmetic_beats_fixed_on_empty_grids() {
        let g = IndexGrid::discarded(16, 32);
        let fixed = serialize(&g, &g, &header(PayloadMode::Fixed, &g, &g)).unwrap();
        let arith = serialize(&g, &g, &header(PayloadMode::Arithmetic, &g, &g)).unwrap();
        assert!(arith.len() < fixed.len());
    }

    #[test]
    fn distinct_errors() {
        let g = IndexGrid::discarded(16, 32);
        let h = header(PayloadMode::Fixed, &g, &g);
        let good = serialize(&g, &g, &h).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(deserialize(&bad), Err(Error::BadMagic(_))));
        assert!(matches!(deserialize(&good[..good.len() - 1]), Err(Error::Truncated(_))));
        assert!(matches!(deserialize(&good[..10]), Err(Error::Truncated(_))));
        let mut extra = good.clone();
        extra.push(0);
        assert!(matches!(deserialize(&extra), Err(Error::TrailingBytes(1))));
        let mut counts = good.clone();
        counts[14] = 3;
        assert!(matches!(deserialize(&counts), Err(Error::CountMismatch { .. })));
        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(deserialize(&version), Err(Error::UnsupportedVersion(9))));
        let mut mode = good;
        mode[10] = 7;
        assert!(matches!(deserialize(&mode), Err(Error::UnknownPayloadMode(7))));
    }

    #[test]
    fn serialize_checks_counts() {
        let g = IndexGrid::discarded(16, 32);
        let mut h = header(PayloadMode::Fixed, &g, &g);
        h.n_x = 1;
        assert!(matches!(serialize(&g, &g, &h), Err(Error::CountMismatch { .. })));
    }

    #[test]
    fn header_bytes_are_big_endian() {
        let g = IndexGrid::discarded(16, 32);
        let mut h = header(PayloadMode::Arithmetic, &g, &g);
        h.n_x = 0;
        let b = h.to_bytes();
        assert_eq!(&b[..5], b"SQGB\x01");
        assert_eq!(&b[5..9], &[1, 0, 2, 0]);
        assert_eq!(b[9], 10);
        assert_eq!(b[10], 1);
    }
}
