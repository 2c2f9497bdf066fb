//! Mapping from Intel 5300 CSI Tool captures onto the signal file format.
//!
//! A `.dat` capture is a stream of records `[u16 big-endian length][u8 code]
//! [payload]`. Records with code `0xBB` carry a beamforming report: a 20-byte
//! header (timestamp, bfee count, `Nrx`, `Ntx`, RSSI values, noise, AGC,
//! antenna permutation, payload length, rate) followed by a bit-packed matrix
//! of 30 subcarriers × `Ntx` × `Nrx` complex values with 8-bit signed real
//! and imaginary parts.
//!
//! The detector consumes one amplitude per (time, channel). With one
//! transmit/receive pair this is exactly 30 channels: channel `k` holds
//! `|H[k]|` for subcarrier group `k`, one row per report, and the rows are
//! resampled onto a uniform 100 Hz grid by the capture timestamp. Extra
//! antenna pairs would add 30 channels each in `(tx, rx, subcarrier)` order.
//!
//! Parsing the bit-packed payload is out of scope; [`amplitude_rows`] covers
//! the step after it.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of subcarrier groups reported per antenna pair.
pub const SUBCARRIERS: usize = 30;

/// Turn decoded complex CSI rows (`(re, im)` per subcarrier) into an
/// amplitude matrix suitable for [`write_signal`](super::write_signal).
pub fn amplitude_rows(rows: &[Vec<(f64, f64)>]) -> Result<Tensor> {
    let c = rows.first().map_or(SUBCARRIERS, Vec::len);
    let mut data = Vec::with_capacity(rows.len() * c);
    for (i, r) in rows.iter().enumerate() {
        if r.len() != c {
            return Err(Error::Shape(format!(
                "CSI row {i} has {} subcarriers, expected {c}",
                r.len()
            )));
        }
        data.extend(r.iter().map(|&(re, im)| re.hypot(im)));
    }
    Tensor::matrix(rows.len(), c, data)
}
