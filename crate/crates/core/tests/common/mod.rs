#![allow(dead_code)]

pub mod formats;
pub mod gradcheck;

use rendertime_core::volume::{gen_synthetic, Recipe, Volume, VolumeMeta};

pub fn synthetic_set(n: usize, dim: usize, seed0: u64) -> Vec<(VolumeMeta, Volume)> {
    (0..n)
        .map(|i| {
            let (v, m) = gen_synthetic(seed0 + i as u64, [dim; 3], Recipe::ALL[i % Recipe::ALL.len()]).unwrap();
            (m, v)
        })
        .collect()
}
