use bdc_core::eval::{sample_chunk, Denoiser};
use bdc_core::model::DecoderOutput;
use bdc_core::schedule::{build_cosine_schedule, ddim_step, forward_noise, make_inference_timesteps};
use bdc_tensor::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference_alpha_bars() -> Vec<f64> {
    include_str!("golden/cosine_k100.txt").lines().map(|l| l.trim().parse().unwrap()).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

#[test]
fn cosine_schedule_matches_high_precision_reference() {
    let sched = build_cosine_schedule(100).unwrap();
    let reference = reference_alpha_bars();
    assert_eq!(reference.len(), 101);
    let worst = sched
        .alpha_bars()
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-12, "max deviation {worst:e}");
}

#[test]
fn schedule_is_monotone_and_bounded() {
    for k in [1, 2, 10, 50, 100, 1000] {
        let s = build_cosine_schedule(k).unwrap();
        assert_eq!(s.alpha_bar(0), 1.0);
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0] && w[1] > 0.0);
        }
        for j in 1..=k {
            assert!(s.beta(j) <= 0.999 + 1e-15);
        }
    }
    assert!(build_cosine_schedule(0).is_err());
}

#[test]
fn inference_timesteps_examples() {
    let t = make_inference_timesteps(100, 10).unwrap();
    assert_eq!(t.steps(), &[100, 90, 80, 70, 60, 50, 40, 30, 20, 10, 0]);
    assert_eq!(make_inference_timesteps(100, 1).unwrap().steps(), &[100, 0]);
    assert_eq!(make_inference_timesteps(100, 3).unwrap().steps(), &[100, 66, 33, 0]);
    let full = make_inference_timesteps(5, 5).unwrap();
    assert_eq!(full.steps(), &[5, 4, 3, 2, 1, 0]);
    assert!(make_inference_timesteps(10, 11).is_err());
    assert!(make_inference_timesteps(10, 0).is_err());
}

proptest! {
    #[test]
    fn noise_is_recoverable(seed in any::<u64>(), k in 1usize..=100) {
        let sched = build_cosine_schedule(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random_tensor(&mut rng, &[4, 3], 1.0);
        let eps = random_tensor(&mut rng, &[4, 3], 3.0);
        let xk = forward_noise(&x0, &eps, k, &sched).unwrap();
        let ab = sched.alpha_bar(k);
        for i in 0..12 {
            let rec = (xk.data()[i] - ab.sqrt() * x0.data()[i]) / (1.0 - ab).sqrt();
            prop_assert!((rec - eps.data()[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn ddim_with_true_clean_sample_follows_forward_process(seed in any::<u64>(), k in 2usize..=100, gap in 1usize..50) {
        let sched = build_cosine_schedule(100).unwrap();
        let k_prev = k.saturating_sub(gap).max(1);
        prop_assume!(k_prev < k);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random_tensor(&mut rng, &[3, 5], 1.0);
        let eps = random_tensor(&mut rng, &[3, 5], 2.0);
        let xk = forward_noise(&x0, &eps, k, &sched).unwrap();
        let stepped = ddim_step(&xk, &x0, k, k_prev, &sched, false).unwrap();
        let direct = forward_noise(&x0, &eps, k_prev, &sched).unwrap();
        for (a, b) in stepped.data().iter().zip(direct.data()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn ddim_final_step_lands_on_clipped_estimate() {
    let sched = build_cosine_schedule(100).unwrap();
    let x = Tensor::new(&[1, 3], vec![0.3, -2.0, 5.0]).unwrap();
    let x0 = Tensor::new(&[1, 3], vec![1.5, -0.25, -3.0]).unwrap();
    let out = ddim_step(&x, &x0, 10, 0, &sched, true).unwrap();
    assert_eq!(out.data(), &[1.0, -0.25, -1.0]);
    assert!(ddim_step(&x, &x0, 10, 10, &sched, true).is_err());
    assert!(ddim_step(&x, &x0, 101, 0, &sched, true).is_err());
}

/// Always predicts the same clean sample, whatever the input.
struct Oracle {
    target: Tensor<f64>,
}

impl Denoiser<f64> for Oracle {
    fn action_shape(&self) -> [usize; 2] {
        [self.target.shape()[0], self.target.shape()[1]]
    }

    fn latent_shape(&self) -> Option<[usize; 2]> {
        None
    }

    fn requires_latents(&self) -> bool {
        false
    }

    fn denoise(
        &self,
        _obs: &Tensor<f64>,
        _k: usize,
        _actions: &Tensor<f64>,
        _latents: Option<&Tensor<f64>>,
    ) -> bdc_core::Result<DecoderOutput<f64>> {
        Ok(DecoderOutput { a0_hat: self.target.clone(), v0_hat: None })
    }
}

#[test]
fn oracle_sampler_recovers_clean_sample() {
    let sched = build_cosine_schedule(100).unwrap();
    let steps = make_inference_timesteps(100, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let obs = Tensor::zeros(&[1, 4]);
    for trial in 0..20 {
        let target = random_tensor(&mut rng, &[8, 6], 1.0);
        let oracle = Oracle { target: target.clone() };
        let out = sample_chunk(&oracle, &obs, &sched, &steps, trial, false).unwrap();
        let err = out.data().iter().zip(target.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "trial {trial}: {err:e}");
    }
}

#[test]
fn oracle_trajectory_keeps_its_noise_estimate() {
    let sched = build_cosine_schedule(100).unwrap();
    let steps = make_inference_timesteps(100, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x0 = random_tensor(&mut rng, &[4, 2], 1.0);
    let mut x = random_tensor(&mut rng, &[4, 2], 2.0);
    let eps_of = |x: &Tensor<f64>, k: usize| -> Vec<f64> {
        let ab = sched.alpha_bar(k);
        x.data().iter().zip(x0.data()).map(|(v, c)| (v - ab.sqrt() * c) / (1.0 - ab).sqrt()).collect()
    };
    let first = eps_of(&x, 100);
    for (k, k_prev) in steps.pairs().filter(|&(_, p)| p > 0) {
        x = ddim_step(&x, &x0, k, k_prev, &sched, false).unwrap();
        for (a, b) in eps_of(&x, k_prev).iter().zip(&first) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
