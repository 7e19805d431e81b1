//! Shared numerical helpers: stable log-sum-exp, Swish, seeded RNG streams,
//! and a small Cholesky factorization.

use ndarray::{Array1, Array2};
use rand_chacha::rand_core::SeedableRng;

/// The deterministic stream generator used throughout the crate.
pub use rand_chacha::ChaCha8Rng as StreamRng;
use rand_chacha::ChaCha8Rng;

/// Log of the sum of exponentials, shifted by the maximum so that no raw
/// `exp(x)` of a large term is ever materialized.
///
/// Returns `-inf` for an empty slice or when every term is `-inf`.
pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // All -inf (empty sum) or a +inf/NaN dominates; either way the shift
        // is meaningless.
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Mean of a slice.
pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance (n - 1 denominator).
pub fn sample_variance(values: &[f64]) -> f64 {
    let m = mean(values);
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (values.len() - 1) as f64
}

/// Logistic sigmoid, evaluated without overflowing for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Swish activation `x * sigmoid(x)`.
#[inline]
pub fn swish(x: f64) -> f64 {
    x * sigmoid(x)
}

/// Derivative of Swish: `sigmoid(x) * (1 + x * (1 - sigmoid(x)))`.
#[inline]
pub fn swish_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Swish value and derivative in one call (shares the sigmoid).
#[inline]
pub fn swish_and_prime(x: f64) -> (f64, f64) {
    let s = sigmoid(x);
    (x * s, s * (1.0 + x * (1.0 - s)))
}

/// Log-density of an isotropic Gaussian `N(0, variance * I)` at `x`.
pub fn isotropic_gaussian_log_density(x: &[f64], variance: f64) -> f64 {
    let d = x.len() as f64;
    let sq: f64 = x.iter().map(|v| v * v).sum();
    -0.5 * d * (2.0 * std::f64::consts::PI * variance).ln() - 0.5 * sq / variance
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent, reproducible RNG stream from a base seed and a list
/// of stream tags (e.g. `[STREAM_WALKER, walker_index]`). Every random draw in
/// the crate flows through one of these streams, so runs are deterministic for
/// a fixed seed regardless of thread scheduling.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6A09_E667_F3BC_C908;
    let mut key = [0u8; 32];
    for &tag in tags {
        state ^= splitmix64(&mut state) ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derive a fresh 64-bit seed from a base seed and stream tags.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    use rand::RngCore;
    stream_rng(seed, tags).next_u64()
}

// Stream tags for the crate's RNG consumers.
pub const STREAM_NET_INIT: u64 = 1;
pub const STREAM_TRAIN_EPOCH: u64 = 2;
pub const STREAM_SPLIT: u64 = 3;
pub const STREAM_WALKER: u64 = 4;
pub const STREAM_FLOW_SAMPLE: u64 = 5;
pub const STREAM_HUTCHINSON: u64 = 6;
pub const STREAM_DIRECT_SAMPLE: u64 = 7;
pub const STREAM_PROBLEM: u64 = 8;
pub const STREAM_RUN: u64 = 9;
pub const STREAM_WALKER_INIT: u64 = 10;

/// Cholesky factorization of a symmetric positive-definite matrix.
/// Returns the lower-triangular factor `L` with `A = L L^T`, or `None` when a
/// pivot is not strictly positive.
pub fn cholesky(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky requires a square matrix");
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return None;
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    Some(l)
}

/// Solve `L y = b` by forward substitution for lower-triangular `L`.
pub fn forward_substitute(l: &Array2<f64>, b: &[f64]) -> Array1<f64> {
    let n = l.nrows();
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    y
}

/// Encode a slice of f64 as a hex string of the IEEE-754 bit patterns
/// (16 hex digits per value). Round-trips bit-exactly through [`hex_to_f64`].
pub fn f64_to_hex(values: &[f64]) -> String {
    let mut out = String::with_capacity(values.len() * 16);
    for v in values {
        out.push_str(&format!("{:016x}", v.to_bits()));
    }
    out
}

/// Decode a hex string produced by [`f64_to_hex`].
pub fn hex_to_f64(hex: &str) -> Result<Vec<f64>, String> {
    if hex.len() % 16 != 0 {
        return Err(format!("hex float blob has length {}", hex.len()));
    }
    let bytes = hex.as_bytes();
    let mut out = Vec::with_capacity(hex.len() / 16);
    for chunk in bytes.chunks_exact(16) {
        let s = std::str::from_utf8(chunk).map_err(|e| e.to_string())?;
        let bits = u64::from_str_radix(s, 16).map_err(|e| e.to_string())?;
        out.push(f64::from_bits(bits));
    }
    Ok(out)
}
