//! Shared fixtures for the criterion benches.

use actmil::data::{synth_generate, Corpus, SynthSpec};
use actmil::Tensor;

/// Deterministic pseudo-random fill in `[-1, 1]`.
pub fn filled(dims: &[usize], salt: f64) -> Tensor {
    let n: usize = dims.iter().product();
    let data = (0..n)
        .map(|i| ((i as f64 + salt) * 12.9898).sin())
        .collect();
    Tensor::new(dims.to_vec(), data).expect("dims match data")
}

/// Conv input, weight and bias: `c_in x size x size` in, `c_out` 3x3 filters.
pub fn conv_case(c_in: usize, c_out: usize, size: usize) -> (Tensor, Tensor, Tensor) {
    (
        filled(&[c_in, size, size], 0.0),
        filled(&[c_out, c_in, 3, 3], 1.0)
            .scale(0.2)
            .expect("finite"),
        filled(&[c_out], 2.0),
    )
}

/// A small synthetic training corpus.
pub fn toy_corpus(n_images: usize) -> Corpus {
    let spec = SynthSpec {
        n_images,
        n_test: 1,
        ..SynthSpec::default()
    };
    synth_generate(&spec).expect("valid spec").0
}

/// Paired `n x dx` and `n x dy` views sharing a linear signal.
pub fn cca_views(n: usize, dx: usize, dy: usize) -> (Tensor, Tensor) {
    let x = filled(&[n, dx], 3.0);
    let noise = filled(&[n, dy], 4.0).scale(0.5).expect("finite");
    let y = x
        .matmul(&filled(&[dx, dy], 5.0))
        .and_then(|y| y.add(&noise))
        .expect("dims match");
    (x, y)
}
