use std::path::PathBuf;

use iverlab::data::{batches, corrupt, corrupt_rows, gaussian_blur, load_split, CorruptionSpec, NoiseKind, Split};
use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mnist_dir() -> PathBuf {
    std::env::var_os("IVERLAB_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

#[test]
fn official_files_have_standard_shape() {
    let train = load_split(&mnist_dir(), Split::Train).unwrap();
    let test = load_split(&mnist_dir(), Split::Test).unwrap();
    assert_eq!((train.len(), test.len()), (60_000, 10_000));
    assert!(train.images.iter().all(|v| (0.0..=1.0).contains(v)));
    assert!(train.label_histogram().iter().all(|&c| c > 5000));
    let b: Vec<_> = batches(&test, 1024, 0).unwrap().collect();
    assert_eq!(b.len(), 10);
    assert_eq!(b.last().unwrap().0.nrows(), 784);
}

fn image(rng: &mut ChaCha8Rng, rows: usize) -> Array2<f32> {
    Array2::from_shape_fn((rows, 784), |_| rng.random::<f32>())
}

#[test]
fn blur_is_linear() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (x, y) = (image(&mut rng, 1), image(&mut rng, 1));
    let (a, b) = (0.7f32, -1.3f32);
    let mix: Vec<f32> = x.iter().zip(y.iter()).map(|(u, v)| a * u + b * v).collect();
    for sigma in [1.0, 2.5, 4.0] {
        let lhs = gaussian_blur(&mix, 28, 28, sigma);
        let bx = gaussian_blur(x.as_slice().unwrap(), 28, 28, sigma);
        let by = gaussian_blur(y.as_slice().unwrap(), 28, 28, sigma);
        for i in 0..784 {
            assert!((lhs[i] - (a * bx[i] + b * by[i])).abs() < 1e-5);
        }
    }
}

fn kind() -> impl Strategy<Value = NoiseKind> {
    prop_oneof![
        Just(NoiseKind::None),
        Just(NoiseKind::WhiteNoise),
        Just(NoiseKind::SaltPepper),
        Just(NoiseKind::Blur),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn corruption_stays_in_range_and_shape(kind in kind(), level in 0.0f32..1.0, seed in any::<u64>(), rows in 1usize..4) {
        let level = if kind == NoiseKind::Blur { 0.5 + 4.0 * level } else { level };
        let x = image(&mut ChaCha8Rng::seed_from_u64(seed), rows);
        let spec = CorruptionSpec::new(kind, level, seed);
        let y = corrupt(x.view(), &spec).unwrap();
        prop_assert_eq!(y.dim(), x.dim());
        prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(&y, &corrupt(x.view(), &spec).unwrap());
    }

    #[test]
    fn salt_pepper_rate_tracks_p(p in 0.05f32..0.95, seed in any::<u64>()) {
        let x = Array2::from_elem((16, 784), 0.5f32);
        let y = corrupt_rows(x.view(), &CorruptionSpec::new(NoiseKind::SaltPepper, p, seed), 0).unwrap();
        let rate = y.iter().filter(|&&v| v != 0.5).count() as f32 / y.len() as f32;
        prop_assert!((rate - p).abs() < 0.02, "{rate} vs {p}");
    }
}
