//! End-to-end acceptance checks. Each criterion prints one `PASS`/`FAIL`
//! line; the test fails if any criterion outside `KNOWN_FAILURES` fails.
//!
//! Criteria 6 and 7 train a grid of twelve policies. Finished cells are
//! reused from `<workspace>/runs` (or `BDC_RUNS_DIR`) when their config,
//! data manifest and files still match, so only the first run is slow.

use std::path::{Path, PathBuf};
use std::time::Instant;

use bdc_core::ablate::{run_suite, AblateOptions, Suite, SuiteSummary};
use bdc_core::eval::{evaluate, measure_inference_time, sample_chunk, Denoiser, DiffusionPolicy};
use bdc_core::latents::{fit_linear_autoencoder, LatentTokenizer, MinMax};
use bdc_core::model::{
    build_attention_mask, load_checkpoint, AttentionMaskSpec, AttentionMode, DecoderOutput, MaskGranularity,
    ModelConfig, PolicyModel,
};
use bdc_core::scalar_head::{ScalarDiffusionHead, ScalarHeadConfig, TwoModes};
use bdc_core::schedule::{build_cosine_schedule, make_inference_timesteps};
use bdc_core::train::{collect_demos, train, Dataset, TrainConfig};
use bdc_sim::{record_expert_episode, render, reset, Image, TaskId};
use bdc_tensor::{check_gradients_sampled, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Criteria expected to fail; see the project decision log.
const KNOWN_FAILURES: &[usize] = &[2];

/// Training overrides shared by the prediction-weight grid and `bdc ablate`.
const GRID_SETTINGS: &[(&str, &str)] = &[
    ("batch_size", "16"),
    ("total_steps", "3000"),
    ("base_lr", "0.001"),
    ("warmup_steps", "200"),
    ("log_every", "250"),
    ("val_every", "500"),
];
const GRID_SEEDS: [u64; 3] = [0, 1, 2];
const GRID_EPISODES: usize = 50;
const DEMOS: usize = 60;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").canonicalize().unwrap()
}

fn runs_dir() -> PathBuf {
    std::env::var_os("BDC_RUNS_DIR").map(PathBuf::from).unwrap_or_else(|| workspace().join("runs"))
}

fn handover_data() -> PathBuf {
    let dir = workspace().join("data/handover");
    if Dataset::load(&dir).is_err() {
        collect_demos(TaskId::Handover, DEMOS, 0, &dir).unwrap();
    }
    dir
}

fn grid_base() -> TrainConfig {
    let mut cfg = TrainConfig { data_dir: handover_data(), ..TrainConfig::default() };
    for (k, v) in GRID_SETTINGS {
        cfg.set(k, v).unwrap();
    }
    cfg.validate().unwrap();
    cfg
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::blank(32, 32, 3);
    for v in img.data.iter_mut() {
        *v = rng.gen();
    }
    img
}

fn grid_checkpoint(setting: &str, seed: u64) -> PathBuf {
    runs_dir()
        .join(Suite::PredWeight.name())
        .join(TaskId::Handover.to_string())
        .join(format!("{setting}_s{seed}"))
        .join("checkpoint.bin")
}

fn latent_skip_equivalence() -> Verdict {
    let ckpt = load_checkpoint(&grid_checkpoint("0.2", 0)).unwrap();
    assert_eq!(ckpt.model.config().attention_mode, AttentionMode::Unidirectional);
    let skip = DiffusionPolicy::from_checkpoint(ckpt, 10).unwrap();
    let mut joint = skip.clone();
    joint.co_denoise = true;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let spec = TaskId::Handover.spec();
    let mut differing = 0;
    for i in 0..100u64 {
        let (image, proprio) = if i % 2 == 0 {
            let s = reset(&spec, 10_000 + i);
            (render(&s), s.proprio().to_vec())
        } else {
            (random_image(&mut rng), (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect())
        };
        let a = skip.infer_action_chunk(&image, &proprio, i).unwrap();
        let b = joint.infer_action_chunk(&image, &proprio, i).unwrap();
        if bits(&a) != bits(&b) {
            differing += 1;
        }
    }
    verdict(
        differing == 0 && joint.decoder_tokens() > skip.decoder_tokens(),
        format!(
            "{differing}/100 chunks differ ({} vs {} decoder tokens)",
            joint.decoder_tokens(),
            skip.decoder_tokens()
        ),
    )
}

fn decoder(model: &PolicyModel<f64>, obs: &Tensor<f64>, a: &Tensor<f64>, v: &Tensor<f64>) -> DecoderOutput<f64> {
    model.denoise_forward(obs, 40, a, Some(v)).unwrap()
}

fn perturb_row(t: &Tensor<f64>, row: usize) -> Tensor<f64> {
    let cols = t.shape()[1];
    let mut data = t.data().to_vec();
    for v in &mut data[row * cols..(row + 1) * cols] {
        *v += 0.75;
    }
    Tensor::new(t.shape(), data).unwrap()
}

fn row_bits(t: &Tensor<f64>, start: usize, count: usize) -> Vec<u64> {
    let cols = t.shape()[1];
    t.data()[start * cols..(start + count) * cols].iter().map(|v| v.to_bits()).collect()
}

/// Counts `(action i, frame group j)` pairs with `i ≥ s_j` whose
/// perturbation changes group `j`'s latent outputs.
fn later_action_leaks(cfg: &ModelConfig) -> (usize, usize) {
    let model = PolicyModel::<f64>::new(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let obs = model.encode_observation(&random_tensor(&mut rng, &[32, 32, 3]).map(|v| v.abs()), &[0.1; 6]).unwrap();
    let a = random_tensor(&mut rng, &[cfg.chunk_size, cfg.action_dim]);
    let v = random_tensor(&mut rng, &[cfg.frame_token_count(), cfg.latent_dim]);
    let base = decoder(&model, &obs, &a, &v).v0_hat.unwrap();
    let tpf = cfg.tokens_per_frame;
    let (mut checked, mut leaks) = (0, 0);
    for i in 0..cfg.chunk_size {
        let out = decoder(&model, &obs, &perturb_row(&a, i), &v).v0_hat.unwrap();
        for (j, &s) in cfg.frame_timestamps.iter().enumerate() {
            if i >= s {
                checked += 1;
                if row_bits(&out, j * tpf, tpf) != row_bits(&base, j * tpf, tpf) {
                    leaks += 1;
                }
            }
        }
    }
    (checked, leaks)
}

fn latent_perturbations_reaching_actions(mode: AttentionMode) -> usize {
    let cfg = ModelConfig { attention_mode: mode, ..ModelConfig::default() };
    let model = PolicyModel::<f64>::new(cfg.clone(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let obs = model.encode_observation(&random_tensor(&mut rng, &[32, 32, 3]).map(|v| v.abs()), &[0.2; 6]).unwrap();
    let a = random_tensor(&mut rng, &[cfg.chunk_size, cfg.action_dim]);
    let v = random_tensor(&mut rng, &[cfg.frame_token_count(), cfg.latent_dim]);
    let base = bits(&decoder(&model, &obs, &a, &v).a0_hat);
    (0..cfg.frame_token_count())
        .filter(|&r| bits(&decoder(&model, &obs, &a, &perturb_row(&v, r)).a0_hat) != base)
        .count()
}

fn causality() -> Verdict {
    let per_frame = ModelConfig::default();
    let (checked, leaks) = later_action_leaks(&per_frame);
    let (one_checked, one_leaks) = later_action_leaks(&ModelConfig { decoder_layers: 1, ..ModelConfig::default() });
    let uni = latent_perturbations_reaching_actions(AttentionMode::Unidirectional);
    let dec = latent_perturbations_reaching_actions(AttentionMode::Decoupled);
    verdict(
        leaks == 0 && uni == 0 && dec == 0,
        format!(
            "later actions change earlier frame groups in {leaks}/{checked} pairs with {} decoder layers \
             ({one_leaks}/{one_checked} with 1 layer); latent perturbations reaching actions: \
             unidirectional {uni}, decoupled {dec}",
            per_frame.decoder_layers
        ),
    )
}

fn gradient_soundness() -> Verdict {
    let cfg = ModelConfig {
        width: 32,
        heads: 4,
        encoder_layers: 2,
        decoder_layers: 2,
        chunk_size: 8,
        frame_timestamps: vec![3, 8],
        tokens_per_frame: 2,
        latent_dim: 5,
        ..ModelConfig::default()
    };
    let model = PolicyModel::<f64>::new(cfg.clone(), 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let image = random_tensor(&mut rng, &[32, 32, 3]).map(|v| (v + 1.0) / 2.0);
    let proprio = random_tensor(&mut rng, &[1, 6]);
    let actions = random_tensor(&mut rng, &[8, 6]);
    let latents = random_tensor(&mut rng, &[cfg.frame_token_count(), 5]);
    let ta = random_tensor(&mut rng, &[8, 6]);
    let tv = random_tensor(&mut rng, &[cfg.frame_token_count(), 5]);
    let params: Vec<Tensor<f64>> = model.params().iter().map(|(_, _, t)| t.clone()).collect();
    let spec = cfg.mask_spec();
    let f = |tape: &mut Tape<f64>, vars: &[Var]| -> bdc_tensor::Result<Var> {
        for (id, &v) in model.params().ids().zip(vars) {
            tape.bind_param(id, v)?;
        }
        let tensor_err = |e: bdc_core::Error| match e {
            bdc_core::Error::Tensor(t) => t,
            other => panic!("{other}"),
        };
        let img = tape.constant(image.clone());
        let p = tape.constant(proprio.clone());
        let obs = model.encode_observation_var(tape, img, p).map_err(tensor_err)?;
        let a = tape.constant(actions.clone());
        let l = tape.constant(latents.clone());
        let out = model.denoise_forward_var(tape, obs, 37, a, Some(l), &spec).map_err(tensor_err)?;
        let ta = tape.constant(ta.clone());
        let tv = tape.constant(tv.clone());
        let la = tape.mse_loss(out.actions, ta)?;
        let lv = tape.mse_loss(out.latents.expect("latent head"), tv)?;
        tape.add(la, lv)
    };
    let err = check_gradients_sampled(f, &params, 1e-5, 12, 1e-6).unwrap();
    verdict(err < 1e-4, format!("max relative error {err:.2e} over {} parameter tensors", params.len()))
}

struct Oracle(Tensor<f64>);

impl Denoiser<f64> for Oracle {
    fn action_shape(&self) -> [usize; 2] {
        [self.0.shape()[0], self.0.shape()[1]]
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
        _a: &Tensor<f64>,
        _v: Option<&Tensor<f64>>,
    ) -> bdc_core::Result<DecoderOutput<f64>> {
        Ok(DecoderOutput { a0_hat: self.0.clone(), v0_hat: None })
    }
}

fn scheduler_oracles() -> Verdict {
    let golden: Vec<f64> =
        include_str!("golden/cosine_k100.txt").lines().map(|l| l.trim().parse().unwrap()).collect();
    let sched = build_cosine_schedule(100).unwrap();
    let schedule_err = golden
        .iter()
        .enumerate()
        .map(|(k, g)| (sched.alpha_bar(k) - g).abs())
        .fold(0.0, f64::max);
    let ts = make_inference_timesteps(100, 10).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut recover_err = 0.0f64;
    for trial in 0..20 {
        let x0 = random_tensor(&mut rng, &[20, 6]);
        let out = sample_chunk(&Oracle(x0.clone()), &Tensor::zeros(&[1, 1]), &sched, &ts, trial, false).unwrap();
        recover_err = out.data().iter().zip(x0.data()).map(|(a, b)| (a - b).abs()).fold(recover_err, f64::max);
    }
    let expect: Vec<usize> = (0..=10).rev().map(|i| i * 10).collect();
    let ok = schedule_err <= 1e-12 && recover_err <= 1e-9 && ts.steps() == expect.as_slice();
    verdict(
        ok,
        format!("alpha-bar error {schedule_err:.1e}, oracle DDIM error {recover_err:.1e}, timesteps {:?}", ts.steps()),
    )
}

fn multimodality() -> Verdict {
    let cfg = ScalarHeadConfig::default();
    let mut head = ScalarDiffusionHead::new(&cfg).unwrap();
    head.fit(&TwoModes { mode: 0.7 }, &cfg).unwrap();
    let draws = head.sample(0.3, 0..1000, 10).unwrap();
    let pos = draws.iter().filter(|v| **v > 0.0).count();
    let neg = draws.iter().filter(|v| **v < 0.0).count();
    verdict(pos >= 300 && neg >= 300, format!("{pos} positive / {neg} negative of 1000 draws"))
}

fn pred_weight_grid() -> SuiteSummary {
    let opts =
        AblateOptions { runs_dir: runs_dir(), seeds: GRID_SEEDS.to_vec(), eval_episodes: GRID_EPISODES, inference_steps: None };
    let (results, summary) = run_suite(Suite::PredWeight, &grid_base(), &opts).unwrap();
    let reused = results.iter().filter(|r| r.reused).count();
    println!("prediction-weight grid: {} cells, {reused} reused from {}", results.len(), opts.runs_dir.display());
    for s in &summary.settings {
        println!("  w = {:<5} success {:?} mean {:.1}", s.setting, s.success_rates, s.mean);
    }
    summary
}

fn coordination_trend(grid: &SuiteSummary) -> Verdict {
    let joint = grid.setting("0.2").unwrap();
    let base = grid.setting("0").unwrap();
    let wins = joint.success_rates.iter().zip(&base.success_rates).filter(|(j, b)| j > b).count();
    let diff = joint.mean - base.mean;
    verdict(
        diff > 0.0 && wins >= 2,
        format!("w=0.2 {:.1}% vs w=0 {:.1}% (difference {diff:+.1}), joint wins {wins}/3 seeds", joint.mean, base.mean),
    )
}

fn weight_ordering(grid: &SuiteSummary) -> Verdict {
    let base = grid.setting("0").unwrap().mean;
    let better: Vec<String> = ["0.05", "0.2", "0.5"]
        .iter()
        .filter_map(|w| grid.setting(w).filter(|s| s.mean > base).map(|s| format!("w={} {:.1}%", w, s.mean)))
        .collect();
    verdict(!better.is_empty(), format!("w=0 {base:.1}%; above it: {}", if better.is_empty() { "none".into() } else { better.join(", ") }))
}

fn inference_efficiency() -> Verdict {
    let ckpt = load_checkpoint(&grid_checkpoint("0.2", 0)).unwrap();
    let cfg = ckpt.model.config().clone();
    let uni = DiffusionPolicy::from_checkpoint(ckpt, 10).unwrap();
    let full_cfg = ModelConfig { attention_mode: AttentionMode::Full, ..cfg.clone() };
    let full = DiffusionPolicy::new(PolicyModel::new(full_cfg, 0).unwrap(), uni.normalizer.clone(), 10).unwrap();
    let state = reset(&TaskId::Handover.spec(), 0);
    let timings =
        measure_inference_time(&[("unidirectional", &uni), ("full", &full)], &render(&state), &state.proprio(), 100)
            .unwrap();
    let ratio = timings[0].mean_ms / timings[1].mean_ms;
    verdict(
        ratio <= 0.7 && cfg.frame_token_count() >= cfg.chunk_size,
        format!(
            "unidirectional {:.2} ms ({} tokens) vs full {:.2} ms ({} tokens), ratio {ratio:.2}",
            timings[0].mean_ms, timings[0].decoder_tokens, timings[1].mean_ms, timings[1].decoder_tokens
        ),
    )
}

fn mask_fidelity() -> Verdict {
    let golden: Vec<Vec<bool>> = include_str!("golden/unidirectional_block_n4_f2.txt")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split_whitespace().map(|c| c == "1").collect())
        .collect();
    let spec = AttentionMaskSpec::new(AttentionMode::Unidirectional, 4, &[2, 2], 1, MaskGranularity::Block);
    let mask = build_attention_mask(&spec).unwrap();
    let grid: Vec<Vec<bool>> = (0..mask.rows()).map(|r| (0..mask.cols()).map(|c| mask.get(r, c)).collect()).collect();
    let wrong = grid.iter().flatten().zip(golden.iter().flatten()).filter(|(a, b)| a != b).count();
    verdict(grid == golden, format!("{wrong} cells differ from the {}×{} golden grid", golden.len(), golden.len()))
}

/// Settings for the reproducibility run: the default model, lighter batches.
const PIPELINE_SETTINGS: &[(&str, &str)] = &[
    ("batch_size", "4"),
    ("total_steps", "2000"),
    ("base_lr", "0.001"),
    ("warmup_steps", "100"),
    ("log_every", "100"),
    ("val_every", "500"),
];

fn pipeline_once(root: &Path) -> (Vec<u8>, bdc_core::eval::EvalReport) {
    let data = root.join("data");
    collect_demos(TaskId::SidePick, 20, 0, &data).unwrap();
    let mut cfg = TrainConfig { task: TaskId::SidePick, data_dir: data, out_dir: root.join("run"), ..TrainConfig::default() };
    for (k, v) in PIPELINE_SETTINGS {
        cfg.set(k, v).unwrap();
    }
    let outcome = train(&cfg).unwrap();
    let csv = std::fs::read(&outcome.metrics).unwrap();
    let mut policy = DiffusionPolicy::from_checkpoint(load_checkpoint(&outcome.checkpoint).unwrap(), 10).unwrap();
    let report = evaluate(&mut policy, &TaskId::SidePick.spec(), 5, &[0], "unidirectional", serde_json::Value::Null)
        .unwrap()
        .without_timing();
    (csv, report)
}

fn pipeline_reproducibility() -> Verdict {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (csv_a, rep_a) = pipeline_once(a.path());
    let (csv_b, rep_b) = pipeline_once(b.path());
    let rows = csv_a.iter().filter(|&&c| c == b'\n').count().saturating_sub(1);
    verdict(
        csv_a == csv_b && rep_a == rep_b,
        format!(
            "loss CSVs {} ({rows} rows), eval reports {} (success {:?})",
            if csv_a == csv_b { "byte-identical" } else { "differ" },
            if rep_a == rep_b { "identical" } else { "differ" },
            rep_a.success_rates
        ),
    )
}

fn invariants() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let rows: Vec<Vec<f64>> = (0..200).map(|_| (0..6).map(|_| rng.gen_range(-3.0..3.0)).collect()).collect();
    let stats = MinMax::fit(rows.iter().map(Vec::as_slice), 6).unwrap();
    let x = Tensor::from_rows(&rows).unwrap();
    let back = stats.denormalize(&stats.normalize(&x).unwrap()).unwrap();
    let norm_err = back.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let tok = LatentTokenizer::downsample_patch(1, 4, 3);
    let map: Vec<f64> = (0..32 * 32 * 3).map(|_| rng.gen()).collect();
    let patch_exact = tok.unpatchify(&tok.patchify(&map, 32, 32), 32, 32) == map;

    let episodes: Vec<_> = (0..3).map(|s| record_expert_episode(&TaskId::Handover.spec(), s).unwrap().0).collect();
    let frames: Vec<&Image> = episodes.iter().flat_map(|e| e.images.iter()).collect();
    let ae = LatentTokenizer::linear_autoencoder(4, 4, 3);
    let errors: Vec<f64> = [1, 2, 4, 8, 16, 32, 48]
        .into_iter()
        .map(|d| fit_linear_autoencoder(&ae, frames.iter().copied(), d, 0).unwrap().autoencoder.unwrap().recon_error)
        .collect();
    let monotone = errors.windows(2).all(|w| w[1] <= w[0]);
    verdict(
        norm_err <= 1e-6 && patch_exact && monotone,
        format!(
            "round-trip error {norm_err:.1e}, patchify exact {patch_exact}, reconstruction error by dim {:?}",
            errors.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>()
        ),
    )
}

#[test]
fn acceptance_criteria() {
    let names = [
        "latent-skip equivalence",
        "causality",
        "gradient soundness",
        "scheduler oracles",
        "multimodality",
        "coordination trend",
        "prediction-weight ordering",
        "inference efficiency",
        "mask fidelity",
        "pipeline reproducibility",
        "normalization and tokenization invariants",
    ];
    let grid = pred_weight_grid();
    let checks: Vec<Box<dyn Fn() -> Verdict + '_>> = vec![
        Box::new(latent_skip_equivalence),
        Box::new(causality),
        Box::new(gradient_soundness),
        Box::new(scheduler_oracles),
        Box::new(multimodality),
        Box::new(|| coordination_trend(&grid)),
        Box::new(|| weight_ordering(&grid)),
        Box::new(inference_efficiency),
        Box::new(mask_fidelity),
        Box::new(pipeline_reproducibility),
        Box::new(invariants),
    ];
    let mut unexpected = Vec::new();
    for (i, (name, check)) in names.iter().zip(&checks).enumerate() {
        let id = i + 1;
        let start = Instant::now();
        let v = check();
        let status = if v.pass { "PASS" } else { "FAIL" };
        let note = if !v.pass && KNOWN_FAILURES.contains(&id) { " [known]" } else { "" };
        println!(
            "criterion {id:>2} {status}{note} {name} ({:.1} s): {}",
            start.elapsed().as_secs_f64(),
            v.detail
        );
        if !v.pass && !KNOWN_FAILURES.contains(&id) {
            unexpected.push(id);
        }
    }
    assert!(unexpected.is_empty(), "unexpected failures: {unexpected:?}");
}
