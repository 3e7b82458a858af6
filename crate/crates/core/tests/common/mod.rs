#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rdt_core::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Central finite-difference gradient of a scalar function of several tensors.
///
/// Independent of the autodiff path: it only ever evaluates `f` forward.
pub fn finite_diff_grad(
    inputs: &[Tensor],
    which: usize,
    step: f64,
    f: &dyn Fn(&[Tensor]) -> f64,
) -> Vec<f64> {
    let mut grads = Vec::with_capacity(inputs[which].numel());
    for i in 0..inputs[which].numel() {
        let mut plus = inputs.to_vec();
        plus[which].data_mut()[i] += step;
        let mut minus = inputs.to_vec();
        minus[which].data_mut()[i] -= step;
        grads.push((f(&plus) - f(&minus)) / (2.0 * step));
    }
    grads
}

/// `max(|auto - fd|) <= max(1e-5, 1e-3 * |fd|)` per element.
pub fn grads_agree(auto: &[f64], fd: &[f64]) -> Result<(), String> {
    assert_eq!(auto.len(), fd.len());
    for (i, (a, f)) in auto.iter().zip(fd).enumerate() {
        let tol = f64::max(1e-5, 1e-3 * f.abs());
        if (a - f).abs() > tol {
            return Err(format!("element {i}: autodiff {a} vs finite-diff {f} (tol {tol})"));
        }
    }
    Ok(())
}

pub fn vocab(d: usize) -> rdt_core::data::GenreVocabulary {
    let names: Vec<String> = (0..d).map(|i| format!("G{i}")).collect();
    rdt_core::data::GenreVocabulary::new(&names).unwrap()
}

/// Synthetic posters as tensors plus labels.
pub fn synthetic(n: usize, d: usize, side: usize, seed: u64) -> (Vec<Tensor>, Vec<rdt_core::data::MultiHotLabel>) {
    rdt_core::data::synth::synthetic_set(n, d, side, seed)
        .unwrap()
        .into_iter()
        .map(|(img, l)| (img.into_tensor(), l))
        .unzip()
}
