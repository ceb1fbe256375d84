//! Floating-point abstraction for the numeric core: `f32` or `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the numeric kernels are generic over.
///
/// Beyond the `num_traits` arithmetic surface this adds the little-endian
/// byte codec used by checkpoint files and ulp stepping used to pin exact
/// parameter initializations.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag recorded in checkpoint headers ("f32" or "f64").
    const DTYPE: &'static str;
    /// Encoded width in bytes.
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    /// Decodes from exactly `Self::BYTES` bytes.
    fn read_le(bytes: &[u8]) -> Self;
    fn next_up(self) -> Self;
    fn next_down(self) -> Self;
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 byte width"))
    }
    fn next_up(self) -> Self {
        f32::next_up(self)
    }
    fn next_down(self) -> Self {
        f32::next_down(self)
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 byte width"))
    }
    fn next_up(self) -> Self {
        f64::next_up(self)
    }
    fn next_down(self) -> Self {
        f64::next_down(self)
    }
}

/// Converts an `f64` constant into the working scalar type.
#[inline]
pub fn fl<T: Scalar>(v: f64) -> T {
    T::from_f64(v).expect("constant representable in scalar type")
}

/// Encodes a parameter slice as little-endian bytes.
pub fn params_to_le_bytes<T: Scalar>(params: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(params.len() * T::BYTES);
    for &p in params {
        p.write_le(&mut out);
    }
    out
}

/// Decodes a parameter vector from little-endian bytes.
pub fn params_from_le_bytes<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    assert!(bytes.len() % T::BYTES == 0, "byte length not a multiple of scalar width");
    bytes.chunks_exact(T::BYTES).map(T::read_le).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip_is_bit_exact() {
        let xs: Vec<f32> = vec![0.0, -0.0, 1.5, f32::MIN_POSITIVE, -3.25e-7, 8.9e37];
        let back = params_from_le_bytes::<f32>(&params_to_le_bytes(&xs));
        for (a, b) in xs.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let ys: Vec<f64> = vec![0.1, -7.25, f64::MIN_POSITIVE, 2.2e300];
        let back = params_from_le_bytes::<f64>(&params_to_le_bytes(&ys));
        for (a, b) in ys.iter().zip(&back) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn ulp_stepping_moves_one_representable() {
        let x = 1.0f64;
        assert!(Scalar::next_up(x) > x);
        assert!(Scalar::next_down(x) < x);
        assert_eq!(Scalar::next_down(Scalar::next_up(x)), x);
    }
}
