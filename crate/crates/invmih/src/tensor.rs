//! Rank-4 tensor conventions and small helpers.
//!
//! Every image-like value in this crate is an `Array4<F>` laid out as
//! (batch, channels, height, width). `ImageTensor` values live in the
//! canonical [0,1] pixel range; `FeatureMap` values are unconstrained
//! apart from finiteness.

use ndarray::{Array4, NdFloat};

use crate::error::{InvMihError, Result};

/// Scalar trait for all numeric code in this crate; implemented by f32 and f64.
pub trait Scalar: NdFloat + num_traits::FromPrimitive + num_traits::ToPrimitive {}
impl Scalar for f32 {}
impl Scalar for f64 {}

/// Convert an f64 literal into the working scalar type.
#[inline]
pub fn fc<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("literal conversion")
}

/// Check that all values are finite; `context` names the operation boundary.
pub fn check_finite<F: Scalar>(x: &Array4<F>, context: &str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(InvMihError::NonFinite {
            context: context.to_string(),
        })
    }
}

/// Max absolute difference between two same-shaped tensors.
pub fn max_abs_diff<F: Scalar>(a: &Array4<F>, b: &Array4<F>) -> F {
    debug_assert_eq!(a.dim(), b.dim());
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (*x - *y).abs())
        .fold(F::zero(), F::max)
}

/// L2 norm over all elements.
pub fn l2_norm<F: Scalar>(a: &Array4<F>) -> F {
    a.iter().map(|v| *v * *v).fold(F::zero(), |s, v| s + v).sqrt()
}

/// Format a dimension tuple for error messages.
pub fn dim_str(d: (usize, usize, usize, usize)) -> String {
    format!("({}, {}, {}, {})", d.0, d.1, d.2, d.3)
}
