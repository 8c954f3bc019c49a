use std::path::PathBuf;

use bdc_sim::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn run_expert(spec: &TaskSpec, seed: u64) -> (bool, Vec<(WorldState, ActionVec)>) {
    let mut s = reset(spec, seed);
    let mut trace = Vec::new();
    while !s.is_terminal() {
        let a = scripted_expert(&s).unwrap();
        trace.push((s.clone(), a));
        s = step(&s, &a).unwrap();
    }
    (check_success(&s), trace)
}

#[test]
fn expert_success_rate_per_task() {
    for id in TaskId::ALL {
        let spec = id.spec();
        let wins = (0..200).filter(|&seed| run_expert(&spec, seed).0).count();
        println!("{id}: expert {wins}/200");
        assert!(wins >= 190, "{id}: {wins}/200");
    }
}

#[test]
fn expert_is_still_once_successful() {
    for id in TaskId::ALL {
        let spec = id.spec();
        let (ok, trace) = run_expert(&spec, 42);
        assert!(ok);
        let (done, a) = trace.iter().find(|(s, _)| check_success(s)).unwrap();
        assert!(check_success(done));
        for i in [0, 1, 3, 4] {
            assert!(a.0[i].abs() < 1e-3, "{id}: {:?}", a.0);
        }
    }
}

#[test]
fn handover_right_never_closes_before_left_releases() {
    let spec = TaskId::Handover.spec();
    for seed in 0..50 {
        let (_, trace) = run_expert(&spec, seed);
        let mut left_released = false;
        let mut left_grasped = false;
        for (s, a) in &trace {
            if s.blocks[0].held_by == Holder::Left {
                left_grasped = true;
            }
            if left_grasped && s.blocks[0].held_by == Holder::None && s.left_grip <= 0.0 {
                left_released = true;
            }
            if a.right()[2] > 0.0 {
                assert!(left_released, "seed {seed}: right closed at step {}", s.step_count);
            }
        }
        assert!(left_released);
    }
}

#[test]
fn reset_is_deterministic_and_handover_spawns_left() {
    for id in TaskId::ALL {
        assert_eq!(reset(&id.spec(), 77), reset(&id.spec(), 77));
    }
    let spec = TaskId::Handover.spec();
    for seed in 0..1000 {
        assert!(reset(&spec, seed).blocks[0].pos[0] < 0.45);
    }
}

#[test]
fn side_pick_spawn_sides_are_balanced() {
    let spec = TaskId::SidePick.spec();
    let left = (0..1000).filter(|&s| reset(&spec, s).blocks[0].pos[0] < 0.5).count();
    println!("side_pick left spawns: {left}/1000");
    assert!((400..=600).contains(&left), "{left}");
}

#[test]
fn random_actions_preserve_invariants() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut steps = 0;
    while steps < 10_000 {
        let id = TaskId::ALL[rng.gen_range(0..3)];
        let mut s = reset(&id.spec(), rng.gen());
        while !s.is_terminal() {
            let a = ActionVec(std::array::from_fn(|_| rng.gen_range(-0.2..0.2)));
            s = step(&s, &a).unwrap();
            steps += 1;
            for p in [s.left_ee, s.right_ee] {
                assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
            }
            assert!(s.left_ee[0] <= s.spec.left_x_max && s.right_ee[0] >= s.spec.right_x_min);
            assert!(s.blocks.iter().filter(|b| b.held_by == Holder::Left).count() <= 1);
            assert!(s.blocks.iter().filter(|b| b.held_by == Holder::Right).count() <= 1);
        }
    }
}

#[test]
fn trajectories_are_reproducible() {
    let spec = TaskId::DualPick.spec();
    let roll = || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut s = reset(&spec, 3);
        let mut frames = Vec::new();
        while !s.is_terminal() {
            let a = ActionVec(std::array::from_fn(|_| rng.gen_range(-0.06..0.06)));
            s = step(&s, &a).unwrap();
            frames.push((s.proprio(), render(&s)));
        }
        frames
    };
    let (a, b) = (roll(), roll());
    for ((pa, ia), (pb, ib)) in a.iter().zip(&b) {
        assert!(pa.iter().zip(pb).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert_eq!(ia, ib);
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/empty_workspace.ppm")
}

fn empty_workspace() -> WorldState {
    let mut s = reset(&TaskId::SidePick.spec(), 0);
    s.blocks.clear();
    s.spec.goals.clear();
    s
}

#[test]
fn empty_workspace_matches_golden_image() {
    let img = render(&empty_workspace());
    if std::env::var_os("BDC_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), img.to_ppm()).unwrap();
    }
    let golden = Image::from_ppm(&std::fs::read(golden_path()).unwrap()).unwrap();
    assert_eq!(img, golden);
}

#[test]
fn identical_states_render_identically() {
    let s = reset(&TaskId::Handover.spec(), 12);
    assert_eq!(render(&s).data, render(&s.clone()).data);
    assert!(render(&s).to_unit().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn recorded_demo_round_trips_through_disk() {
    let spec = TaskId::Handover.spec();
    let (ep, ok) = record_expert_episode(&spec, 5).unwrap();
    assert!(ok);
    assert!(ep.len() < spec.episode_len);
    assert!(ep.proprio.iter().all(|p| p.len() == PROPRIO_DIM));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ep.bin");
    ep.write(&path).unwrap();
    let back = Episode::read(&path).unwrap();
    assert_eq!(back, ep);
    assert_eq!(back.header().task, TaskId::Handover);
}

#[test]
fn corrupt_episode_is_rejected() {
    let (ep, _) = record_expert_episode(&TaskId::SidePick.spec(), 1).unwrap();
    let mut bytes = ep.to_bytes();
    bytes[0] = b'X';
    assert!(Episode::from_bytes(&bytes).is_err());
    let mut bytes = ep.to_bytes();
    bytes.pop();
    assert!(Episode::from_bytes(&bytes).is_err());
}

proptest! {
    #[test]
    fn proprio_and_actions_round_trip_exactly(
        values in prop::collection::vec(prop::num::f64::ANY, 12..=12),
        pixel in any::<u8>(),
    ) {
        let ep = Episode {
            task: TaskId::DualPick,
            images: vec![Image { height: 2, width: 2, channels: 3, data: vec![pixel; 12] }],
            proprio: vec![values[..6].to_vec()],
            actions: vec![values[6..].to_vec()],
        };
        let back = Episode::from_bytes(&ep.to_bytes()).unwrap();
        for (a, b) in back.proprio[0].iter().chain(&back.actions[0]).zip(values.iter()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
