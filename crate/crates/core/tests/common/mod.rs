#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tce_core::baselines::EncoderLayer;
use tce_core::neighborhood::BatchNeighbors;
use tce_core::params::{Forward, Mode, ModelParams, ParamId};
use tce_core::tensor::{grad_check, GradCheckReport, Scalar, Tape, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    uniform(shape, -1.0, 1.0, rng)
}

/// Projects an output onto fixed random weights so every element matters.
pub fn project<T: Scalar>(tape: &mut Tape<T>, out: Var, seed: u64) -> tce_core::Result<Var> {
    let w = random(&tape.shape(out).to_vec(), &mut rng(seed)).cast::<T>();
    let w = tape.constant(w)?;
    let m = tape.mul(out, w)?;
    tape.sum_all(m)
}

/// Finite-difference check of a layer with respect to its input features
/// and every trainable tensor.
pub fn layer_grad_check(
    layer: &EncoderLayer,
    params: &ModelParams<f64>,
    coords: &Tensor<f64>,
    feats: &Tensor<f64>,
    graph: &BatchNeighbors,
) -> GradCheckReport {
    let ids: Vec<ParamId> = params.trainable().collect();
    let mut inputs = vec![feats.clone()];
    inputs.extend(ids.iter().map(|&id| params.get(id).clone()));
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> tce_core::Result<Var> {
        let bound: Vec<(ParamId, Var)> = ids.iter().copied().zip(vars[1..].iter().copied()).collect();
        let mut fwd = Forward::with_bound(std::mem::take(tape), params, &bound, Mode::Train, 1);
        let result = fwd
            .tape
            .constant(coords.clone())
            .and_then(|c| layer.forward(&mut fwd, c, vars[0], graph))
            .and_then(|y| project(&mut fwd.tape, y, 77));
        *tape = fwd.into_parts().0;
        result
    };
    grad_check(f, &inputs, EPS, TOL).unwrap()
}

pub fn permutation(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

/// Row `i` of `rows` moves to row `perm[i]`.
pub fn permute_rows<T: Copy + Default>(rows: &[T], width: usize, perm: &[usize]) -> Vec<T> {
    let mut out = vec![T::default(); rows.len()];
    for (i, &p) in perm.iter().enumerate() {
        out[p * width..(p + 1) * width].copy_from_slice(&rows[i * width..(i + 1) * width]);
    }
    out
}
