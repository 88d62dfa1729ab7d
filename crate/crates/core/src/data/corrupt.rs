use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, tags};

pub const IMAGE_SIDE: usize = 28;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    WhiteNoise,
    SaltPepper,
    Blur,
}

impl NoiseKind {
    pub const CORRUPTIONS: [NoiseKind; 3] =
        [NoiseKind::WhiteNoise, NoiseKind::SaltPepper, NoiseKind::Blur];

    /// Benchmark level `1..=4` → σ (white, blur) or p (salt & pepper).
    pub fn canonical_level(self, index: usize) -> Result<f32> {
        if !(1..=4).contains(&index) {
            return Err(Error::Parameter(format!("benchmark level {index} not in 1..=4")));
        }
        let i = index as f32;
        Ok(match self {
            NoiseKind::None => 0.0,
            NoiseKind::WhiteNoise => 0.2 * i,
            NoiseKind::SaltPepper => 0.1 * i,
            NoiseKind::Blur => i,
        })
    }

    /// Short tag used on the command line and in CSV output.
    pub fn tag(self) -> &'static str {
        match self {
            NoiseKind::None => "none",
            NoiseKind::WhiteNoise => "white",
            NoiseKind::SaltPepper => "sp",
            NoiseKind::Blur => "blur",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(NoiseKind::None),
            "white" | "white_noise" => Ok(NoiseKind::WhiteNoise),
            "sp" | "salt_pepper" => Ok(NoiseKind::SaltPepper),
            "blur" => Ok(NoiseKind::Blur),
            other => Err(Error::Config(format!("unknown noise kind {other:?}"))),
        }
    }

    fn id(self) -> u64 {
        match self {
            NoiseKind::None => 0,
            NoiseKind::WhiteNoise => 1,
            NoiseKind::SaltPepper => 2,
            NoiseKind::Blur => 3,
        }
    }
}

/// One degradation and its strength: σ for white noise and blur, the
/// corruption probability p for salt & pepper.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: NoiseKind,
    pub level: f32,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn none() -> Self {
        CorruptionSpec {
            kind: NoiseKind::None,
            level: 0.0,
            seed: 0,
        }
    }

    pub fn new(kind: NoiseKind, level: f32, seed: u64) -> Self {
        CorruptionSpec { kind, level, seed }
    }

    pub fn canonical(kind: NoiseKind, index: usize, seed: u64) -> Result<Self> {
        Ok(CorruptionSpec::new(kind, kind.canonical_level(index)?, seed))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.level.is_finite() || self.level < 0.0 {
            return Err(Error::Parameter(format!("corruption level {} must be ≥ 0", self.level)));
        }
        if self.kind == NoiseKind::SaltPepper && self.level > 1.0 {
            return Err(Error::Parameter(format!(
                "salt & pepper probability {} exceeds 1",
                self.level
            )));
        }
        Ok(())
    }
}

/// Corrupts every row of `x` (flattened 28×28 images in `[0, 1]`). Row `i`
/// draws from its own stream `first_id + i`, so a sample's corruption does
/// not depend on which batch it arrives in.
pub fn corrupt_rows(x: ArrayView2<f32>, spec: &CorruptionSpec, first_id: u64) -> Result<Array2<f32>> {
    spec.validate()?;
    let mut out = x.to_owned();
    let seed = derive_seed(&[tags::CORRUPT, spec.seed, spec.kind.id()]);
    match spec.kind {
        NoiseKind::None => {}
        NoiseKind::WhiteNoise => {
            let normal = Normal::new(0.0f32, spec.level).expect("σ validated");
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let mut rng = stream_rng(seed, first_id + i as u64);
                for v in row.iter_mut() {
                    *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
        NoiseKind::SaltPepper => {
            for (i, mut row) in out.rows_mut().into_iter().enumerate() {
                let mut rng = stream_rng(seed, first_id + i as u64);
                for v in row.iter_mut() {
                    let hit = rng.random::<f32>() < spec.level;
                    let salt = rng.random::<bool>();
                    if hit {
                        *v = if salt { 1.0 } else { 0.0 };
                    }
                }
            }
        }
        NoiseKind::Blur => {
            if x.ncols() != IMAGE_SIDE * IMAGE_SIDE {
                return Err(Error::Dimension(format!(
                    "blur expects {}-pixel images, got {}",
                    IMAGE_SIDE * IMAGE_SIDE,
                    x.ncols()
                )));
            }
            for mut row in out.rows_mut() {
                let img = row.as_slice_mut().expect("contiguous row");
                let blurred = gaussian_blur(img, IMAGE_SIDE, IMAGE_SIDE, spec.level);
                for (d, b) in img.iter_mut().zip(blurred) {
                    *d = b.clamp(0.0, 1.0);
                }
            }
        }
    }
    Ok(out)
}

/// Corrupts `x` using row indices as sample ids.
pub fn corrupt(x: ArrayView2<f32>, spec: &CorruptionSpec) -> Result<Array2<f32>> {
    corrupt_rows(x, spec, 0)
}

/// Truncated Gaussian kernel with radius `ceil(3σ)`, normalized to sum 1.
pub fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i32;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * (sigma as f64).powi(2))).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| (v / s) as f32).collect()
}

/// Folds an out-of-range index back into `0..n` by half-sample symmetric
/// reflection (`… b a | a b c … | c b …`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian blur of one `height × width` image with reflect
/// padding. No clamping, so the operator is linear.
pub fn gaussian_blur(img: &[f32], height: usize, width: usize, sigma: f32) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f32; img.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * img[y * width + reflect(x as isize + j as isize - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0f32; img.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(j, w)| w * tmp[reflect(y as isize + j as isize - r, height) * width + x])
                .sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn random_images(n: usize, seed: u64) -> Array2<f32> {
        let mut rng = stream_rng(seed, 0);
        Array2::from_shape_fn((n, 784), |_| rng.random::<f32>())
    }

    #[test]
    fn zero_white_noise_is_identity() {
        let x = random_images(3, 1);
        let y = corrupt(x.view(), &CorruptionSpec::new(NoiseKind::WhiteNoise, 0.0, 9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn certain_salt_pepper_is_balanced_binary() {
        let x = random_images(13, 2);
        let y = corrupt(x.view(), &CorruptionSpec::new(NoiseKind::SaltPepper, 1.0, 4)).unwrap();
        assert!(y.iter().all(|&v| v == 0.0 || v == 1.0));
        let ones = y.iter().filter(|&&v| v == 1.0).count() as f64 / y.len() as f64;
        assert!((ones - 0.5).abs() < 0.02, "fraction of ones {ones}");
    }

    #[test]
    fn salt_pepper_rate_matches_probability() {
        // Inputs strictly inside (0, 1) so every changed pixel is visible.
        let x = Array2::from_elem((20, 784), 0.5f32);
        for p in [0.1f32, 0.2, 0.3, 0.4] {
            let y = corrupt(x.view(), &CorruptionSpec::new(NoiseKind::SaltPepper, p, 1)).unwrap();
            let rate = y.iter().filter(|&&v| v != 0.5).count() as f64 / y.len() as f64;
            assert!((rate - p as f64).abs() < 0.02, "p = {p}: rate {rate}");
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let x = Array2::from_elem((1, 784), 0.37f32);
        for s in [1.0, 2.0, 3.0, 4.0] {
            let y = corrupt(x.view(), &CorruptionSpec::new(NoiseKind::Blur, s, 0)).unwrap();
            assert!(y.iter().all(|&v| (v - 0.37).abs() < 1e-6));
        }
    }

    #[test]
    fn kernel_is_normalized_with_three_sigma_support() {
        for s in [0.5f32, 1.0, 2.5, 4.0] {
            let k = gaussian_kernel(s);
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
            assert!((k.iter().sum::<f32>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn reflection_folds_symmetrically() {
        let idx: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 3, 2, 1]);
    }

    #[test]
    fn negative_level_is_rejected() {
        let x = random_images(1, 3);
        let spec = CorruptionSpec::new(NoiseKind::WhiteNoise, -0.1, 0);
        assert!(matches!(corrupt(x.view(), &spec), Err(Error::Parameter(_))));
    }

    #[test]
    fn distinct_seeds_give_distinct_white_noise() {
        let x = random_images(1, 4);
        let a = corrupt(x.view(), &CorruptionSpec::new(NoiseKind::WhiteNoise, 0.4, 1)).unwrap();
        let b = corrupt(x.view(), &CorruptionSpec::new(NoiseKind::WhiteNoise, 0.4, 2)).unwrap();
        let diff = a.iter().zip(b.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f32::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn corruption_of_a_row_does_not_depend_on_batch_position() {
        let x = random_images(4, 5);
        let spec = CorruptionSpec::new(NoiseKind::SaltPepper, 0.3, 8);
        let all = corrupt(x.view(), &spec).unwrap();
        let tail = corrupt_rows(x.slice(ndarray::s![2.., ..]), &spec, 2).unwrap();
        assert_eq!(all.slice(ndarray::s![2.., ..]), tail);
    }

    #[test]
    fn canonical_levels() {
        let w: Vec<f32> = (1..=4).map(|i| NoiseKind::WhiteNoise.canonical_level(i).unwrap()).collect();
        assert_eq!(w, vec![0.2, 0.4, 0.6, 0.8]);
        let b: Vec<f32> = (1..=4).map(|i| NoiseKind::Blur.canonical_level(i).unwrap()).collect();
        assert_eq!(b, vec![1.0, 2.0, 3.0, 4.0]);
        assert!(NoiseKind::SaltPepper.canonical_level(5).is_err());
    }

    proptest! {
        #[test]
        fn output_stays_in_unit_range_and_shape(
            kind in prop_oneof![Just(NoiseKind::WhiteNoise), Just(NoiseKind::SaltPepper), Just(NoiseKind::Blur)],
            level in 0.0f32..1.0,
            seed in any::<u64>(),
        ) {
            let x = random_images(2, seed);
            let level = if kind == NoiseKind::Blur { level * 4.0 } else { level };
            let spec = CorruptionSpec::new(kind, level, seed);
            let y = corrupt(x.view(), &spec).unwrap();
            prop_assert_eq!(y.dim(), x.dim());
            prop_assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert_eq!(y, corrupt(x.view(), &spec).unwrap());
        }

        #[test]
        fn blur_is_linear(a in -2.0f32..2.0, b in -2.0f32..2.0, sigma in 0.5f32..4.0, seed in any::<u64>()) {
            let x = random_images(1, seed);
            let y = random_images(1, seed.wrapping_add(1));
            let combo: Vec<f32> = x.iter().zip(y.iter()).map(|(p, q)| a * p + b * q).collect();
            let lhs = gaussian_blur(&combo, 28, 28, sigma);
            let bx = gaussian_blur(x.as_slice().unwrap(), 28, 28, sigma);
            let by = gaussian_blur(y.as_slice().unwrap(), 28, 28, sigma);
            for ((l, p), q) in lhs.iter().zip(&bx).zip(&by) {
                prop_assert!((l - (a * p + b * q)).abs() < 1e-5);
            }
        }
    }
}
