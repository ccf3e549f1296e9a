/// Floating-point scalar the analytic routines are generic over: f32 or f64.
pub trait Scalar: num_traits::Float + num_traits::FromPrimitive + core::fmt::Debug {}

impl<T> Scalar for T where T: num_traits::Float + num_traits::FromPrimitive + core::fmt::Debug {}
