//! Uncompressed row-major run-length encoding of binary masks.
//!
//! `counts` alternates background and foreground runs and always starts with a
//! background run, which may have length zero.

use super::mask::BinaryMask;

pub fn encode(mask: &BinaryMask) -> Vec<u64> {
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u64;
    for &b in mask.bits() {
        if b == current {
            run += 1;
        } else {
            counts.push(run);
            current = b;
            run = 1;
        }
    }
    counts.push(run);
    counts
}

/// Decodes `counts` into an `height×width` mask. The error string describes
/// the mismatch; callers attach the annotation it came from.
pub fn decode(counts: &[u64], height: usize, width: usize) -> Result<BinaryMask, String> {
    let total: u64 = counts.iter().sum();
    let expected = (height * width) as u64;
    if total != expected {
        return Err(format!(
            "run lengths sum to {total}, expected {height}x{width} = {expected}"
        ));
    }
    let mut bits = Vec::with_capacity(height * width);
    let mut value = false;
    for &run in counts {
        bits.extend(std::iter::repeat_n(value, run as usize));
        value = !value;
    }
    Ok(BinaryMask::from_bits(height, width, bits))
}
