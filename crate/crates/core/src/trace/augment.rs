use rand::Rng;

use super::{Result, TraceError};

/// Shifts `trace` right by `d` samples (left when negative); vacated
/// positions repeat the nearest edge value.
pub fn shift_by<T: Copy>(trace: &[T], d: isize) -> Vec<T> {
    let n = trace.len() as isize;
    (0..n)
        .map(|i| trace[(i - d).clamp(0, n - 1) as usize])
        .collect()
}

/// Shift by an offset drawn uniformly from `[-max_shift, max_shift]`.
/// Returns the shifted trace and the offset used.
pub fn random_shift<T: Copy, R: Rng + ?Sized>(
    trace: &[T],
    max_shift: usize,
    rng: &mut R,
) -> Result<(Vec<T>, isize)> {
    if max_shift > 0 && max_shift >= trace.len() {
        return Err(TraceError::ShiftTooLarge {
            max_shift,
            n_samples: trace.len(),
        });
    }
    if max_shift == 0 {
        return Ok((trace.to_vec(), 0));
    }
    let m = max_shift as i64;
    let d = rng.random_range(-m..=m) as isize;
    Ok((shift_by(trace, d), d))
}
