//! Analytical rate accounting for the two index streams.

use crate::error::{Error, Result};

/// Binary entropy in bits, with `h2(0) = h2(1) = 0`.
pub fn h2(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        return 0.0;
    }
    -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
}

fn check_fraction(m: f64) -> Result<()> {
    if (0.0..=1.0).contains(&m) {
        Ok(())
    } else {
        Err(Error::MaskFraction(m))
    }
}

/// Bits per index for a sequence that keeps a fraction `m` of positions and
/// codes each kept one with `log2 J` bits: `h2(m) + m log2 J`.
pub fn rate_upper_bound(m: f64, codebook_size: usize) -> Result<f64> {
    check_fraction(m)?;
    Ok(h2(m) + m * (codebook_size as f64).log2())
}

/// `K (1 + m log2 J)`.
pub fn bits_budget(m: f64, codebook_size: usize, positions: usize) -> Result<f64> {
    check_fraction(m)?;
    Ok(positions as f64 * (1.0 + m * (codebook_size as f64).log2()))
}

/// `(10 (m_x + m_s) + 2) / 256`, the total rate for `J = 1024` and
/// `K / (H W) = 1 / 256`.
pub fn bpp_total(m_x: f64, m_s: f64) -> Result<f64> {
    check_fraction(m_x)?;
    check_fraction(m_s)?;
    Ok((10.0 * (m_x + m_s) + 2.0) / 256.0)
}

/// Rates of one encoded pair.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct RateReport {
    pub m_x: f64,
    pub m_s: f64,
    /// Bits per index bounds.
    pub r_x: f64,
    pub r_s: f64,
    /// Bit budgets.
    pub b_x: f64,
    pub b_s: f64,
    /// `(B_x + B_s) / (H W)`.
    pub bpp: f64,
    /// Bits actually written after the header, both payloads.
    pub actual_payload_bits: u64,
}

impl RateReport {
    pub fn new(
        m_x: f64,
        m_s: f64,
        codebook_size: usize,
        height: usize,
        width: usize,
        actual_payload_bits: u64,
    ) -> Result<Self> {
        let k = (height / 16) * (width / 16);
        let b_x = bits_budget(m_x, codebook_size, k)?;
        let b_s = bits_budget(m_s, codebook_size, k)?;
        Ok(Self {
            m_x,
            m_s,
            r_x: rate_upper_bound(m_x, codebook_size)?,
            r_s: rate_upper_bound(m_s, codebook_size)?,
            b_x,
            b_s,
            bpp: (b_x + b_s) / (height * width) as f64,
            actual_payload_bits,
        })
    }
}
