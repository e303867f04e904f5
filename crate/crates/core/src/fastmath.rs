//! `exp`, `tanh` and the logistic function for the tape's elementwise ops.
//!
//! libm's `tanh` dominated training time. These versions are branch-free so
//! slice maps vectorize: Cody-Waite range reduction, a fixed Taylor polynomial
//! for `expm1` on `[-ln2/2, ln2/2]`, and the power of two assembled from the
//! bits of the rounded exponent. All three agree with the std versions to a
//! few ulp (see tests).

const LN2_HI: f64 = 6.931_471_803_691_238_164_9e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
const LOG2E: f64 = std::f64::consts::LOG2_E;
/// `1.5 * 2^52`: adding it rounds to an integer held in the low mantissa bits.
const ROUND: f64 = 6_755_399_441_055_744.0;

/// 1/k! for k = 2..=13.
const C: [f64; 12] = [
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40320.0,
    1.0 / 362_880.0,
    1.0 / 3_628_800.0,
    1.0 / 39_916_800.0,
    1.0 / 479_001_600.0,
    1.0 / 6_227_020_800.0,
];

#[inline(always)]
fn expm1_reduced(r: f64) -> f64 {
    let mut p = C[11];
    p = p * r + C[10];
    p = p * r + C[9];
    p = p * r + C[8];
    p = p * r + C[7];
    p = p * r + C[6];
    p = p * r + C[5];
    p = p * r + C[4];
    p = p * r + C[3];
    p = p * r + C[2];
    p = p * r + C[1];
    p = p * r + C[0];
    r + p * r * r
}

/// Returns `(2^n, expm1(r))` with `x = n ln2 + r`. Requires `|x| <= 708`.
#[inline(always)]
fn reduce(x: f64) -> (f64, f64) {
    let shifted = x * LOG2E + ROUND;
    let n = shifted - ROUND;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // The low 32 bits of `shifted` hold n as a two's complement integer.
    let k = (shifted.to_bits() as i32) as i64;
    let scale = f64::from_bits(((k + 1023) as u64) << 52);
    (scale, expm1_reduced(r))
}

#[inline(always)]
fn clamp(x: f64, lo: f64, hi: f64) -> f64 {
    let x = if x < lo { lo } else { x };
    if x > hi {
        hi
    } else {
        x
    }
}

/// `exp(x)`, saturating outside `[-708, 708]`.
#[inline]
pub fn exp(x: f64) -> f64 {
    let (s, m) = reduce(clamp(x, -708.0, 708.0));
    s + s * m
}

#[inline]
pub fn tanh(x: f64) -> f64 {
    // tanh|x| = -m / (2 + m) with m = expm1(-2|x|); beyond 20 the result is 1.
    let y = -2.0 * clamp(x.abs(), 0.0, 20.0);
    let (s, m) = reduce(y);
    let em1 = s * m + (s - 1.0);
    (-em1 / (2.0 + em1)).copysign(x)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + exp(-x))
}

macro_rules! slice_kernel {
    ($(#[$doc:meta])* $name:ident, $f:ident) => {
        $(#[$doc])*
        pub fn $name(xs: &[f64]) -> Vec<f64> {
            #[cfg(target_arch = "x86_64")]
            {
                if std::arch::is_x86_feature_detected!("avx512f") {
                    // SAFETY: the required CPU feature was detected at runtime.
                    return unsafe { wide::$name(xs) };
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: as above.
                    return unsafe { wide::avx2::$name(xs) };
                }
            }
            xs.iter().map(|&x| $f(x)).collect()
        }
    };
}

slice_kernel!(
    /// Elementwise [`tanh`].
    tanh_slice, tanh
);
slice_kernel!(
    /// Elementwise [`sigmoid`].
    sigmoid_slice, sigmoid
);

/// Copies of the slice kernels compiled for wider vector units. They call the
/// same scalar code, and Rust never fuses multiply-adds on its own, so results
/// are bit-identical to the portable path.
#[cfg(target_arch = "x86_64")]
mod wide {
    #[target_feature(enable = "avx512f")]
    pub unsafe fn tanh_slice(xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| super::tanh(x)).collect()
    }

    #[target_feature(enable = "avx512f")]
    pub unsafe fn sigmoid_slice(xs: &[f64]) -> Vec<f64> {
        xs.iter().map(|&x| super::sigmoid(x)).collect()
    }

    pub mod avx2 {
        #[target_feature(enable = "avx2")]
        pub unsafe fn tanh_slice(xs: &[f64]) -> Vec<f64> {
            xs.iter().map(|&x| super::super::tanh(x)).collect()
        }

        #[target_feature(enable = "avx2")]
        pub unsafe fn sigmoid_slice(xs: &[f64]) -> Vec<f64> {
            xs.iter().map(|&x| super::super::sigmoid(x)).collect()
        }
    }
}
