//! Finite-difference oracles shared by unit tests.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Evaluates `build` on fresh tapes and compares the reverse-mode directional
/// derivative along random directions with a central difference.
/// Returns the worst relative error.
pub fn jvp_error(
    inputs: &[Tensor],
    build: impl Fn(&mut Tape, &[Var]) -> Var,
    directions: usize,
    h: f64,
    seed: u64,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars);
    let grads = tape.backward(root).unwrap();
    let gs: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.len()))
        .collect();

    let eval = |shift: f64, dirs: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(dirs)
            .map(|(t, d)| {
                let mut moved = t.clone();
                for (x, dx) in moved.data_mut().iter_mut().zip(d.data()) {
                    *x += shift * dx;
                }
                tape.leaf(moved)
            })
            .collect();
        let root = build(&mut tape, &vars);
        tape.item(root)
    };

    let mut worst: f64 = 0.0;
    for k in 0..directions {
        let dirs: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| random_tensor(t.shape(), -1.0, 1.0, seed + 1000 * k as u64 + i as u64))
            .collect();
        let analytic: f64 = gs
            .iter()
            .zip(&dirs)
            .map(|(g, d)| g.iter().zip(d.data()).map(|(a, b)| a * b).sum::<f64>())
            .sum();
        let numeric = (eval(h, &dirs) - eval(-h, &dirs)) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic - numeric).abs() / scale);
    }
    worst
}
