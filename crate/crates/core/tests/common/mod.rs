#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use usp_core::numerics::{Dims4, Scalar, Tensor4};

pub fn random<T: Scalar>(dims: Dims4, seed: u64) -> Tensor4<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(dims, |_, _, _, _| T::from_f64_lossy(rng.random_range(-1.0..1.0))).unwrap()
}

pub struct Qkv<T> {
    pub q: Tensor4<T>,
    pub k: Tensor4<T>,
    pub v: Tensor4<T>,
    pub d_o: Tensor4<T>,
}

pub fn qkv<T: Scalar>(bs: usize, seq: usize, heads: usize, kv_heads: usize, hs: usize, seed: u64) -> Qkv<T> {
    let qd = Dims4::new(bs, seq, heads, hs);
    let kd = qd.with_heads(kv_heads);
    Qkv {
        q: random(qd, seed),
        k: random(kd, seed + 1),
        v: random(kd, seed + 2),
        d_o: random(qd, seed + 3),
    }
}

/// Every `(ulysses, ring)` with `ulysses * ring == n`.
pub fn factorizations(n: usize) -> Vec<(usize, usize)> {
    (1..=n).filter(|u| n % u == 0).map(|u| (u, n / u)).collect()
}
