//! Gaussian-lobe transfer functions and their baked lookup tables.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TfError {
    #[error("kappa length {0} is not a positive multiple of 3")]
    KappaLength(usize),
    #[error("lobe {lobe}: {field} = {value} out of range")]
    LobeOutOfRange { lobe: usize, field: &'static str, value: f32 },
}

/// One Gaussian opacity lobe `h * exp(-(s - c)^2 / w)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub center: f32,
    pub width: f32,
    pub height: f32,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Colormap {
    #[default]
    Viridis,
}

// Eight control points of the viridis ramp.
const VIRIDIS: [[f32; 3]; 8] = [
    [0.267, 0.005, 0.329],
    [0.275, 0.194, 0.497],
    [0.213, 0.359, 0.552],
    [0.153, 0.498, 0.558],
    [0.122, 0.632, 0.531],
    [0.290, 0.762, 0.428],
    [0.622, 0.854, 0.223],
    [0.993, 0.906, 0.144],
];

impl Colormap {
    pub fn color(self, s: f32) -> [f32; 3] {
        let t = s.clamp(0.0, 1.0) * (VIRIDIS.len() - 1) as f32;
        let i = (t as usize).min(VIRIDIS.len() - 2);
        let f = t - i as f32;
        std::array::from_fn(|k| VIRIDIS[i][k] + (VIRIDIS[i + 1][k] - VIRIDIS[i][k]) * f)
    }
}

pub const DEFAULT_LOBES: usize = 3;
pub const WIDTH_SAMPLE_RANGE: (f32, f32) = (0.005, 0.2);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferFunction {
    lobes: Vec<Lobe>,
    #[serde(default)]
    colormap: Colormap,
}

impl TransferFunction {
    pub fn new(lobes: Vec<Lobe>) -> Result<Self, TfError> {
        if lobes.is_empty() {
            return Err(TfError::KappaLength(0));
        }
        for (i, l) in lobes.iter().enumerate() {
            let check = |field, value: f32, ok: bool| {
                if ok && value.is_finite() {
                    Ok(())
                } else {
                    Err(TfError::LobeOutOfRange { lobe: i, field, value })
                }
            };
            check("center", l.center, (0.0..=1.0).contains(&l.center))?;
            check("width", l.width, l.width > 0.0 && l.width <= 1.0)?;
            check("height", l.height, (0.0..=1.0).contains(&l.height))?;
        }
        Ok(Self { lobes, colormap: Colormap::Viridis })
    }

    /// Parses `(c0, w0, h0, c1, w1, h1, ...)`.
    pub fn from_kappa(kappa: &[f32]) -> Result<Self, TfError> {
        if kappa.is_empty() || !kappa.len().is_multiple_of(3) {
            return Err(TfError::KappaLength(kappa.len()));
        }
        Self::new(
            kappa
                .chunks_exact(3)
                .map(|c| Lobe { center: c[0], width: c[1], height: c[2] })
                .collect(),
        )
    }

    pub fn kappa(&self) -> Vec<f32> {
        self.lobes.iter().flat_map(|l| [l.center, l.width, l.height]).collect()
    }

    pub fn lobes(&self) -> &[Lobe] {
        &self.lobes
    }

    pub fn colormap(&self) -> Colormap {
        self.colormap
    }

    /// Unclamped opacity; the width divides the squared distance directly.
    pub fn opacity(&self, s: f32) -> f32 {
        self.lobes
            .iter()
            .map(|l| {
                let d = s - l.center;
                l.height * (-(d * d) / l.width).exp()
            })
            .sum()
    }

    /// Upper bound on |dO/ds|: each lobe peaks at `h * sqrt(2/w) * e^{-1/2}`.
    pub fn max_slope(&self) -> f32 {
        self.lobes
            .iter()
            .map(|l| l.height * (2.0 / l.width).sqrt() * (-0.5f32).exp())
            .sum()
    }

    pub fn bake_lut(&self) -> OpacityLut {
        let entries = std::array::from_fn(|k| {
            let s = k as f32 / 255.0;
            let [r, g, b] = self.colormap.color(s);
            [r, g, b, self.opacity(s).clamp(0.0, 1.0)]
        });
        OpacityLut { entries: Box::new(entries) }
    }
}

/// 256 `(r, g, b, opacity)` entries over s in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct OpacityLut {
    pub entries: Box<[[f32; 4]; 256]>,
}

impl OpacityLut {
    pub fn nearest(&self, s: f32) -> [f32; 4] {
        let k = (s.clamp(0.0, 1.0) * 255.0).round() as usize;
        self.entries[k]
    }

    /// Linearly filtered lookup, the way a 1D texture is sampled.
    #[inline]
    pub fn linear(&self, s: f32) -> [f32; 4] {
        let t = s.clamp(0.0, 1.0) * 255.0;
        let i = (t as usize).min(254);
        let f = t - i as f32;
        let a = &self.entries[i];
        let b = &self.entries[i + 1];
        [
            a[0] + (b[0] - a[0]) * f,
            a[1] + (b[1] - a[1]) * f,
            a[2] + (b[2] - a[2]) * f,
            a[3] + (b[3] - a[3]) * f,
        ]
    }

    #[inline]
    pub fn opacity_linear(&self, s: f32) -> f32 {
        let t = s.clamp(0.0, 1.0) * 255.0;
        let i = (t as usize).min(254);
        let f = t - i as f32;
        let a = self.entries[i][3];
        a + (self.entries[i + 1][3] - a) * f
    }

    /// Largest tabulated opacity reachable by linear filtering of any value
    /// in `[lo, hi]`.
    pub fn max_opacity_in(&self, lo: f32, hi: f32) -> f32 {
        let a = (lo.clamp(0.0, 1.0) * 255.0).floor() as usize;
        let b = ((hi.clamp(0.0, 1.0) * 255.0).ceil() as usize).min(255);
        self.entries[a..=b].iter().map(|e| e[3]).fold(0.0, f32::max)
    }
}

/// Random transfer function: `c ~ U[0,1]`, `w ~ U[0.005, 0.2]`, `h ~ U[0,1]`.
pub fn sample_tf(rng: &mut impl Rng, m: usize) -> TransferFunction {
    let lobes = (0..m.max(1))
        .map(|_| Lobe {
            center: rng.random_range(0.0..=1.0),
            width: rng.random_range(WIDTH_SAMPLE_RANGE.0..=WIDTH_SAMPLE_RANGE.1),
            height: rng.random_range(0.0..=1.0),
        })
        .collect();
    TransferFunction::new(lobes).expect("sampled lobes are within bounds")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng_for;

    fn tf(lobes: &[(f32, f32, f32)]) -> TransferFunction {
        TransferFunction::new(
            lobes.iter().map(|&(c, w, h)| Lobe { center: c, width: w, height: h }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn opacity_examples() {
        let single = tf(&[(0.3, 0.05, 0.7)]);
        assert!((single.opacity(0.3) - 0.7).abs() < 1e-7);
        let mid = tf(&[(0.5, 0.1, 1.0)]);
        // exp(-0.01 / 0.1) = exp(-0.1)
        assert!((mid.opacity(0.6) - 0.904_837_4).abs() < 1e-6);
        let zero = tf(&[(0.2, 0.1, 0.0), (0.8, 0.02, 0.0)]);
        for k in 0..=20 {
            assert_eq!(zero.opacity(k as f32 / 20.0), 0.0);
        }
    }

    #[test]
    fn lut_endpoints_and_clamp() {
        let t = tf(&[(0.1, 0.05, 0.4), (0.9, 0.01, 0.8)]);
        let lut = t.bake_lut();
        assert!((lut.entries[0][3] - t.opacity(0.0)).abs() < 1e-6);
        assert!((lut.entries[255][3] - t.opacity(1.0)).abs() < 1e-6);

        let heavy = tf(&[(0.5, 0.2, 0.9), (0.5, 0.2, 0.9)]);
        assert!(heavy.opacity(0.5) > 1.7);
        assert_eq!(heavy.bake_lut().nearest(0.5)[3], 1.0);
    }

    #[test]
    fn lut_nearest_error_within_lipschitz_bound() {
        let mut rng = rng_for(42, 0);
        for _ in 0..5 {
            let t = sample_tf(&mut rng, 3);
            let lut = t.bake_lut();
            let bound = t.max_slope() * 0.5 / 255.0 + 1e-6;
            for _ in 0..10_000 {
                let s: f32 = rng.random();
                let err = (lut.nearest(s)[3] - t.opacity(s).clamp(0.0, 1.0)).abs();
                assert!(err <= bound, "err {err} bound {bound}");
            }
        }
    }

    #[test]
    fn kappa_round_trip_and_validation() {
        let t = tf(&[(0.1, 0.2, 0.3), (0.4, 0.05, 0.6)]);
        let k = t.kappa();
        assert_eq!(k, vec![0.1, 0.2, 0.3, 0.4, 0.05, 0.6]);
        assert_eq!(TransferFunction::from_kappa(&k).unwrap(), t);
        assert_eq!(TransferFunction::from_kappa(&k[..5]), Err(TfError::KappaLength(5)));
        assert!(matches!(
            TransferFunction::from_kappa(&[0.5, 0.0, 0.5]),
            Err(TfError::LobeOutOfRange { field: "width", .. })
        ));
        assert!(TransferFunction::from_kappa(&[1.5, 0.1, 0.5]).is_err());
    }

    #[test]
    fn opacity_invariant_under_lobe_permutation() {
        let a = tf(&[(0.1, 0.2, 0.3), (0.4, 0.05, 0.6), (0.8, 0.1, 0.9)]);
        let b = tf(&[(0.8, 0.1, 0.9), (0.1, 0.2, 0.3), (0.4, 0.05, 0.6)]);
        for k in 0..=100 {
            let s = k as f32 / 100.0;
            assert!((a.opacity(s) - b.opacity(s)).abs() < 1e-6);
        }
    }

    #[test]
    fn sampled_tfs_respect_bounds() {
        let mut rng = rng_for(1, 0);
        for _ in 0..1000 {
            let t = sample_tf(&mut rng, 3);
            assert_eq!(t.kappa().len(), 9);
            for l in t.lobes() {
                assert!((0.0..=1.0).contains(&l.center));
                assert!((0.005..=0.2).contains(&l.width));
                assert!((0.0..=1.0).contains(&l.height));
            }
        }
    }

    #[test]
    fn max_opacity_in_covers_interpolated_values() {
        let t = tf(&[(0.5, 0.001, 1.0)]);
        let lut = t.bake_lut();
        // Endpoints are transparent but the lobe sits between them.
        assert!(lut.opacity_linear(0.3) < 1e-4 && lut.opacity_linear(0.7) < 1e-4);
        assert!(lut.max_opacity_in(0.3, 0.7) > 0.9);
        assert!(lut.max_opacity_in(0.0, 0.1) < 1e-4);
    }
}
