use bdc_core::latents::{
    fit_linear_autoencoder, fit_patches, sample_future_frames, FrameSamplePlan, LatentTokenizer, MinMax, Normalizer,
};
use bdc_core::Error;
use bdc_sim::{record_expert_episode, Episode, Image, TaskId};
use bdc_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn demo_episodes() -> Vec<Episode> {
    (0..3).map(|s| record_expert_episode(&TaskId::Handover.spec(), s).unwrap().0).collect()
}

#[test]
fn uniform_plans() {
    assert_eq!(FrameSamplePlan::uniform(8, 4).unwrap().timestamps, vec![2, 4, 6, 8]);
    assert_eq!(FrameSamplePlan::uniform(20, 8).unwrap().timestamps, vec![3, 5, 8, 10, 13, 15, 18, 20]);
    assert_eq!(FrameSamplePlan::uniform(5, 5).unwrap().timestamps, vec![1, 2, 3, 4, 5]);
    assert_eq!(FrameSamplePlan::uniform(7, 1).unwrap().timestamps, vec![7]);
    assert!(FrameSamplePlan::uniform(4, 5).is_err());
    for n in 1..=40 {
        for f in 1..=n {
            let ts = FrameSamplePlan::uniform(n, f).unwrap().timestamps;
            assert_eq!(ts.len(), f);
            assert!(ts.windows(2).all(|w| w[0] < w[1]));
            assert!(ts[0] >= 1 && *ts.last().unwrap() == n);
        }
    }
}

#[test]
fn future_frames_slice_and_pad() {
    let ep = &demo_episodes()[0];
    let n = 6;
    let plan = FrameSamplePlan::uniform(n, n).unwrap();
    let (frames, ts) = sample_future_frames(ep, 2, &plan).unwrap();
    assert_eq!(ts, (1..=n).collect::<Vec<_>>());
    for (i, f) in frames.iter().enumerate() {
        assert_eq!(*f, &ep.images[3 + i]);
    }
    let last = ep.images.len() - 1;
    let (frames, _) = sample_future_frames(ep, ep.len() - 1, &plan).unwrap();
    assert!(frames.iter().skip(1).all(|f| *f == &ep.images[last]));
    assert!(sample_future_frames(ep, ep.len(), &plan).is_err());
}

#[test]
fn single_channel_shape_arithmetic() {
    let tok = LatentTokenizer::downsample_patch(4, 4, 1);
    assert_eq!(tok.patches_per_frame(32, 32).unwrap(), 4);
    let mut img = Image::blank(32, 32, 1);
    for y in 0..32 {
        for x in 0..32 {
            img.set(y, x, 0, 51);
        }
    }
    let t = tok.tokenize_frames(&[&img, &img, &img, &img]).unwrap();
    assert_eq!(t.shape(), &[16, 16]);
    assert!(t.data().iter().all(|&v| v == 51.0 / 255.0));
    assert!(tok.patches_per_frame(30, 32).is_err());
    let odd = Image::blank(24, 24, 1);
    assert!(tok.tokenize_frames(&[&odd]).is_err());
}

#[test]
fn token_count_formula() {
    for f in [1, 2] {
        for p in [1, 2, 4] {
            for c in [1, 3] {
                let tok = LatentTokenizer::downsample_patch(f, p, c);
                let img = Image::blank(32, 32, c);
                let frames = [&img, &img, &img];
                let t = tok.tokenize_frames(&frames).unwrap();
                let side = 32 / (f * p);
                assert_eq!(t.shape(), &[3 * side * side, p * p * c]);
            }
        }
    }
}

#[test]
fn unfitted_autoencoder_is_rejected() {
    let tok = LatentTokenizer::linear_autoencoder(4, 4, 3);
    let img = Image::blank(32, 32, 3);
    assert!(matches!(tok.tokenize_frames(&[&img]), Err(Error::NotFitted(_))));
    assert!(matches!(tok.latent_dim(), Err(Error::NotFitted(_))));
    assert!(matches!(Normalizer::default().action(), Err(Error::NotFitted(_))));
}

proptest! {
    #[test]
    fn patchify_round_trip(seed in any::<u64>(), p in 1usize..5, blocks in 1usize..4, c in 1usize..4) {
        let tok = LatentTokenizer::downsample_patch(1, p, c);
        let side = p * blocks;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map: Vec<f64> = (0..side * side * c).map(|_| rng.gen()).collect();
        let patches = tok.patchify(&map, side, side);
        prop_assert_eq!(patches.len(), blocks * blocks);
        prop_assert_eq!(tok.unpatchify(&patches, side, side), map);
    }

    #[test]
    fn normalize_round_trip(seed in any::<u64>(), dim in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| (0..dim).map(|_| rng.gen_range(-50.0..50.0)).collect()).collect();
        let stats = MinMax::fit(rows.iter().map(Vec::as_slice), dim).unwrap();
        let x = Tensor::from_rows(&rows).unwrap();
        let y = stats.normalize(&x).unwrap();
        prop_assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for d in 0..dim {
            let col: Vec<f64> = (0..20).map(|r| y.data()[r * dim + d]).collect();
            prop_assert!(col.iter().any(|&v| v == -1.0) && col.contains(&1.0));
        }
        let back = stats.denormalize(&y).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            prop_assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn normalizer_edge_cases() {
    let stats = MinMax { min: vec![-1.5, 2.0], max: vec![0.5, 2.0] };
    assert_eq!(stats.normalize_value(0, -0.5), 0.0);
    assert_eq!(stats.normalize_value(0, 10.0), 1.0);
    assert_eq!(stats.normalize_value(0, -10.0), -1.0);
    assert_eq!(stats.normalize_value(1, 7.0), 0.0);
    assert_eq!(stats.denormalize_value(1, 0.3), 2.0);
    assert_eq!(stats.denormalize_value(0, 1.0), 0.5);
}

fn random_patches(seed: u64, rank: usize, dim: usize, count: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<Vec<f64>> = (0..rank).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let mean: Vec<f64> = (0..dim).map(|_| rng.gen()).collect();
    (0..count)
        .map(|_| {
            let coef: Vec<f64> = (0..rank).map(|_| rng.gen_range(-2.0..2.0)).collect();
            (0..dim).map(|i| mean[i] + dirs.iter().zip(&coef).map(|(d, a)| d[i] * a).sum::<f64>()).collect()
        })
        .collect()
}

#[test]
fn autoencoder_recovers_low_rank_patches() {
    let tok = LatentTokenizer::linear_autoencoder(1, 2, 3);
    let patches = random_patches(5, 2, 12, 400);
    let fitted = fit_patches(&tok, patches.clone(), 2, 0).unwrap();
    let ae = fitted.autoencoder.as_ref().unwrap();
    assert!(ae.recon_error < 1e-8, "{}", ae.recon_error);
    for p in patches.iter().take(20) {
        let decoded = fitted.decode_token(&encode(&fitted, p)).unwrap();
        for (a, b) in decoded.iter().zip(p) {
            assert!((a - b).abs() < 1e-8);
        }
    }
}

fn encode(tok: &LatentTokenizer, patch: &[f64]) -> Vec<f64> {
    let ae = tok.autoencoder.as_ref().unwrap();
    let l = ae.latent_dim;
    (0..l)
        .map(|j| patch.iter().zip(&ae.mean).enumerate().map(|(i, (x, m))| (x - m) * ae.basis[i * l + j]).sum())
        .collect()
}

#[test]
fn autoencoder_full_rank_is_lossless() {
    let tok = LatentTokenizer::linear_autoencoder(1, 2, 3);
    let patches = random_patches(9, 12, 12, 300);
    let fitted = fit_patches(&tok, patches, 12, 0).unwrap();
    assert!(fitted.autoencoder.unwrap().recon_error < 1e-8);
}

#[test]
fn autoencoder_basis_is_orthonormal() {
    let tok = LatentTokenizer::linear_autoencoder(1, 2, 3);
    let fitted = fit_patches(&tok, random_patches(1, 12, 12, 300), 5, 0).unwrap();
    let ae = fitted.autoencoder.unwrap();
    for a in 0..5 {
        for b in 0..5 {
            let dot: f64 = (0..12).map(|i| ae.basis[i * 5 + a] * ae.basis[i * 5 + b]).sum();
            assert!((dot - if a == b { 1.0 } else { 0.0 }).abs() < 1e-10);
        }
    }
}

#[test]
fn autoencoder_argument_checks() {
    let tok = LatentTokenizer::linear_autoencoder(1, 2, 3);
    assert!(fit_patches(&tok, random_patches(1, 3, 12, 99), 2, 0).is_err());
    assert!(fit_patches(&tok, random_patches(1, 3, 12, 200), 13, 0).is_err());
    assert!(fit_patches(&tok, random_patches(1, 3, 12, 200), 0, 0).is_err());
}

#[test]
fn reconstruction_error_falls_with_latent_dim_on_demo_frames() {
    let episodes = demo_episodes();
    let frames: Vec<&Image> = episodes.iter().flat_map(|e| e.images.iter()).collect();
    let tok = LatentTokenizer::linear_autoencoder(4, 4, 3);
    let errors: Vec<f64> = [1, 2, 4, 8, 16, 32, 48]
        .into_iter()
        .map(|d| {
            fit_linear_autoencoder(&tok, frames.iter().copied(), d, 0)
                .unwrap()
                .autoencoder
                .unwrap()
                .recon_error
        })
        .collect();
    assert!(errors.windows(2).all(|w| w[1] <= w[0] + 1e-15), "{errors:?}");
    assert!(errors[4] < errors[2]);
    assert!(errors[6] < 1e-8);
}
