//! Floating-point abstraction shared by the model, losses and metrics.
//!
//! Everything numeric in the crate is generic over [`Scalar`]; training runs
//! in `f32` for throughput while gradient checks run in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints so a file declares its element width.
    const DTYPE: &'static str;

    /// Lossy conversion from an `f64` literal.
    #[inline(always)]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Hyperbolic tangent used by the GELU activation. Exact `tanh` by
    /// default; single precision uses a branch-free rational approximation
    /// that vectorizes.
    #[inline(always)]
    fn tanh_act(self) -> Self {
        self.tanh()
    }

    /// Exponential used inside attention softmax; exact by default, a
    /// vectorizable polynomial in single precision.
    #[inline(always)]
    fn exp_act(self) -> Self {
        self.exp()
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    #[inline(always)]
    #[allow(clippy::excessive_precision)]
    fn tanh_act(self) -> Self {
        // Odd rational fit, clamped where tanh rounds to 1; absolute error ~1e-6.
        const CLAMP: f32 = 7.905_311;
        const A: [f32; 7] = [
            4.893_524_6e-3,
            6.372_619_3e-4,
            1.485_722_4e-5,
            5.122_297e-8,
            -8.604_671_5e-11,
            2.000_188e-13,
            -2.760_768_5e-16,
        ];
        const B: [f32; 4] = [4.893_525e-3, 2.268_434_6e-3, 1.185_347_1e-4, 1.198_258_4e-6];
        let x = self.clamp(-CLAMP, CLAMP);
        let x2 = x * x;
        let mut p = A[6];
        for &a in A[..6].iter().rev() {
            p = p * x2 + a;
        }
        let q = ((B[3] * x2 + B[2]) * x2 + B[1]) * x2 + B[0];
        x * p / q
    }

    #[inline(always)]
    #[allow(clippy::excessive_precision)]
    fn exp_act(self) -> Self {
        // Range reduction x = n ln2 + r with |r| <= ln2 / 2, degree-6
        // polynomial for e^r, then scale by 2^n through the exponent bits.
        const LOG2E: f32 = std::f32::consts::LOG2_E;
        const LN2_HI: f32 = 0.693_359_4;
        const LN2_LO: f32 = -2.121_944_4e-4;
        let x = self.clamp(-87.0, 88.0);
        // Adding and removing 1.5 * 2^23 rounds to the nearest integer.
        const ROUND: f32 = 12_582_912.0;
        let n = (x * LOG2E + ROUND) - ROUND;
        let r = x - n * LN2_HI - n * LN2_LO;
        let mut p = 1.987_569_1e-4f32;
        p = p * r + 1.398_2e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_5e-1;
        p = p * r + 5.000_000_1e-1;
        let y = p * r * r + r + 1.0;
        y * f32::from_bits(((n as i32 + 127) as u32) << 23)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}
