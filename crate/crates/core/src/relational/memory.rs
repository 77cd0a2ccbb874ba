use alloc::format;
use alloc::string::String;

use crate::error::{Error, Result};

/// Modeled peak bytes of the materializing angle loss for `(B, L, C)`
/// tokens stored with `bytes_per_element`: two `B·L²·C` difference tensors
/// plus the `B·L³` angle tensor.
pub fn angle_memory_model(b: usize, l: usize, c: usize, bytes_per_element: usize) -> Result<u64> {
    if b == 0 || l == 0 || c == 0 || bytes_per_element == 0 {
        return Err(Error::Contract("memory model arguments must be positive".into()));
    }
    let overflow = || Error::Contract(format!("memory model overflows for B={b} L={l} C={c}"));
    let (b, l, c, e) = (b as u64, l as u64, c as u64, bytes_per_element as u64);
    let l2 = l.checked_mul(l).ok_or_else(overflow)?;
    let diffs = [2, b, l2, c, e]
        .iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x))
        .ok_or_else(overflow)?;
    let angle = [b, l2, l, e]
        .iter()
        .try_fold(1u64, |acc, &x| acc.checked_mul(x))
        .ok_or_else(overflow)?;
    diffs.checked_add(angle).ok_or_else(overflow)
}

/// Decimal gigabytes with two decimals, e.g. `0.97 GB`.
pub fn format_gb(bytes: u64) -> String {
    format!("{:.2} GB", bytes as f64 / 1e9)
}
