//! Seeded weight initialization. All draws go through f64 before conversion,
//! so a given seed produces the same weight stream regardless of precision.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dtype::Scalar;
use crate::tensor::Tensor;

pub type InitRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> InitRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Normal(0, std) truncated to two standard deviations by rejection;
/// the usual initializer for projection weights.
pub fn trunc_normal<T: Scalar>(shape: &[usize], std: f64, rng: &mut InitRng) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            data.push(T::from_f64(z * std));
        }
    }
    Tensor::from_vec(data, shape).expect("trunc_normal shape").requiring_grad()
}

/// Fan-out-scaled normal for conv kernels: std = sqrt(2 / (kh*kw*co/groups)).
pub fn conv_normal<T: Scalar>(shape: &[usize], groups: usize, rng: &mut InitRng) -> Tensor<T> {
    let [co, _, kh, kw] = [shape[0], shape[1], shape[2], shape[3]];
    let fan_out = (kh * kw * co / groups) as f64;
    let std = (2.0 / fan_out).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::from_vec(data, shape).expect("conv_normal shape").requiring_grad()
}

/// Fan-out-scaled normal for transposed-conv kernels. The weight layout is
/// [ci, co, kh, kw], so fan-out reads from the second axis.
pub fn deconv_normal<T: Scalar>(shape: &[usize], rng: &mut InitRng) -> Tensor<T> {
    let fan_out = (shape[1] * shape[2] * shape[3]) as f64;
    let std = (2.0 / fan_out).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let z: f64 = rng.sample(StandardNormal);
            T::from_f64(z * std)
        })
        .collect();
    Tensor::from_vec(data, shape).expect("deconv_normal shape").requiring_grad()
}

/// Trainable zeros (biases, norm offsets).
pub fn zeros_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::zeros(shape).requiring_grad()
}

/// Trainable ones (norm gains).
pub fn ones_param<T: Scalar>(shape: &[usize]) -> Tensor<T> {
    Tensor::full(shape, T::one()).requiring_grad()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let mut a = seeded_rng(42);
        let mut b = seeded_rng(42);
        let ta: Tensor<f32> = trunc_normal(&[4, 7], 0.02, &mut a);
        let tb: Tensor<f32> = trunc_normal(&[4, 7], 0.02, &mut b);
        assert_eq!(ta.data(), tb.data());
        let mut c = seeded_rng(43);
        let tc: Tensor<f32> = trunc_normal(&[4, 7], 0.02, &mut c);
        assert_ne!(ta.data(), tc.data());
    }

    #[test]
    fn truncated_normal_respects_bounds() {
        let mut rng = seeded_rng(7);
        let t: Tensor<f64> = trunc_normal(&[1000], 0.02, &mut rng);
        for v in t.data() {
            assert!(v.abs() <= 2.0 * 0.02 + 1e-12);
        }
    }

    #[test]
    fn f32_and_f64_streams_agree() {
        let mut a = seeded_rng(5);
        let mut b = seeded_rng(5);
        let ta: Tensor<f32> = conv_normal(&[8, 4, 3, 3], 1, &mut a);
        let tb: Tensor<f64> = conv_normal(&[8, 4, 3, 3], 1, &mut b);
        for (x, y) in ta.data().iter().zip(tb.data()) {
            assert_eq!(*x, *y as f32);
        }
    }
}
