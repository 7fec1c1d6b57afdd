use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sinusoidal encodings, one row per (possibly negative) offset:
/// `E[r, 2i] = sin(o / 10000^(2i/D))`, `E[r, 2i+1] = cos(o / 10000^(2i/D))`.
pub fn positional_encoding<T: Scalar>(offsets: &[i64], dim: usize) -> Result<Tensor<T>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::contract(format!("positional encoding dim must be even, got {dim}")));
    }
    if offsets.is_empty() {
        return Err(Error::contract("positional encoding needs at least one offset"));
    }
    let mut data = Vec::with_capacity(offsets.len() * dim);
    for &o in offsets {
        for i in 0..dim / 2 {
            let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
            let angle = o as f64 * freq;
            data.push(T::lit(angle.sin()));
            data.push(T::lit(angle.cos()));
        }
    }
    Tensor::matrix(offsets.len(), dim, data)
}
