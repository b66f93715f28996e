use medrek_autodiff::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape, data).expect("positive shape")
}

/// Normal-ish small values for embedding tables (sum of uniforms, std ≈ `scale`).
pub(crate) fn embedding(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let s: f64 = (0..4).map(|_| rng.gen_range(-1.0..1.0)).sum();
            s * scale * (3.0f64 / 4.0).sqrt()
        })
        .collect();
    Tensor::new(shape, data).expect("positive shape")
}
