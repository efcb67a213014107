//! Scalar abstraction for the numerical core.
//!
//! Everything numeric in this crate is generic over [`Real`], so the same
//! code instantiates at `f32` and `f64`. Concrete `f64` aliases for the
//! user-facing types live at the crate root.

use num_traits::FromPrimitive;

/// Floating-point scalar usable throughout the planner core.
pub trait Real: nalgebra::RealField + Copy + Default + FromPrimitive + Send + Sync {
    /// Lossy conversion to `f64` (exact for `f32`/`f64`).
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64(self) -> f64 {
        self
    }
}

/// Converts an `f64` literal into the working scalar type.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal must convert into the scalar type")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_conversion_round_trips() {
        let x: f64 = real(0.25);
        assert_eq!(x, 0.25);
        let y: f32 = real(0.25);
        assert_eq!(y, 0.25f32);
    }
}
