//! Small float helpers; `core` has no float intrinsics on stable.

#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    // Eight independent accumulators so the loop vectorizes without
    // reassociating a single running sum.
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] += a[i + l] * b[i + l];
        }
    }
    let mut sum = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for i in chunks * 8..a.len() {
        sum += a[i] * b[i];
    }
    sum
}

#[inline]
pub(crate) fn norm64(v: &[f32]) -> f64 {
    libm::sqrt(v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>())
}

/// `ceil(frac * n)` tolerant of representation error in `frac`
/// (`0.1 * 700` must give 70, not 71).
pub(crate) fn ceil_fraction(frac: f64, n: usize) -> usize {
    let x = frac * n as f64;
    let c = libm::ceil(x - 1e-9);
    if c < 0.0 {
        0
    } else {
        c as usize
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}
