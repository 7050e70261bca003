//! Real-valued scalar abstraction for pixel data.
//!
//! Everything downstream of input binarization is integer or bit arithmetic;
//! only dataset pixels and the binarization threshold are real.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};

/// f32 or f64
pub trait Real: Float + FromPrimitive + Debug + Send + Sync + 'static {}

impl Real for f32 {}
impl Real for f64 {}
