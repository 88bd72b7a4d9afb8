//! Randomized invariants over scenes, rewards, samplers and optimizer
//! plumbing.

use proptest::prelude::*;

use geoedit::flow::{ode_step, sde_step};
use geoedit::grpo::{compute_advantages, nfe_accounting, select_exit_step, SamplerConfig};
use geoedit::nn::{GradientBuffer, Mlp, Architecture};
use geoedit::rewards::{compute_reward, RewardConfig};
use geoedit::rng;
use geoedit::scene::{
    decode_latent, encode_scene, sample_instruction, sample_scene, wrap_deg, EditCondition, GenerationConfig, Task,
};

fn task_of(i: u8) -> Task {
    [Task::Translate, Task::Rotate, Task::Resize][i as usize % 3]
}

fn angle_gap(a: f64, b: f64) -> f64 {
    wrap_deg(a - b).abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn advantages_are_centered_and_affine_invariant(
        rewards in prop::collection::vec(-5.0f64..5.0, 2..32),
        scale in 0.1f64..10.0,
        shift in -10.0f64..10.0,
    ) {
        let a = compute_advantages(&rewards);
        prop_assert!(a.iter().sum::<f64>().abs() < 1e-10);
        let b = compute_advantages(&rewards.iter().map(|r| scale * r + shift).collect::<Vec<_>>());
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn encode_decode_round_trips(seed in any::<u64>()) {
        let scene = sample_scene(seed, &GenerationConfig::default()).unwrap();
        let back = decode_latent(&encode_scene(&scene), &scene);
        for (o, b) in scene.objects.iter().zip(&back.objects).take(scene.active_count) {
            prop_assert!((o.position[0] - b.position[0]).abs() < 1e-9);
            prop_assert!((o.position[1] - b.position[1]).abs() < 1e-9);
            prop_assert!((o.depth - b.depth).abs() < 1e-9);
            prop_assert!((o.scale - b.scale).abs() < 1e-9 * o.scale.max(1.0));
            for k in 0..3 {
                prop_assert!(angle_gap(o.orientation[k], b.orientation[k]) < 1e-7);
            }
        }
    }

    #[test]
    fn oracle_edits_succeed_and_noops_fail(seed in any::<u64>(), t in 0u8..3) {
        let scene = sample_scene(seed, &GenerationConfig::default()).unwrap();
        let instr = sample_instruction(seed ^ 0x9e37, &scene, Some(task_of(t)));
        let cond = EditCondition::new(scene, instr);
        let rc = RewardConfig::default();
        let oracle = compute_reward(&cond.scene, &cond.oracle_target(), &cond.instruction, &rc).unwrap();
        prop_assert!(oracle.success);
        prop_assert!((oracle.total - 1.0).abs() < 1e-12);
        let noop = compute_reward(&cond.scene, &cond.scene, &cond.instruction, &rc).unwrap();
        prop_assert!(!noop.success);
        prop_assert!(noop.total < oracle.total);
    }

    #[test]
    fn noiseless_sde_step_is_the_euler_step(
        x in prop::collection::vec(-3.0f64..3.0, 8),
        v in prop::collection::vec(-3.0f64..3.0, 8),
        i in 0usize..10,
    ) {
        let t = 1.0 - i as f64 / 10.0;
        let mut r = rng::stream(0);
        let step = sde_step(i, &x, &v, t, 0.1, 0.0, &mut r).unwrap();
        prop_assert_eq!(step.sample, ode_step(&x, &v, 0.1));
        prop_assert!(!step.perturbed && step.log_prob.is_none());
    }

    #[test]
    fn nfe_budgets_follow_the_mode(
        steps in 2usize..20,
        k_frac in 0.0f64..1.0,
        epochs in 1usize..5,
        g in 2usize..32,
    ) {
        let k = 1 + ((steps - 1) as f64 * k_frac) as usize;
        let active = nfe_accounting(&SamplerConfig::active(steps, 1.0, k), g, epochs);
        prop_assert_eq!((active.per_rollout_old, active.per_rollout_train), (k + 1, k * epochs));
        prop_assert_eq!((active.group_old, active.group_train), (g * (k + 1), g * k * epochs));
        let full = nfe_accounting(&SamplerConfig::full(steps, 1.0), g, epochs);
        prop_assert_eq!((full.per_rollout_old, full.per_rollout_train), (steps, steps * epochs));
        let window = nfe_accounting(&SamplerConfig::sliding_window(steps, 1.0, k, 25), g, epochs);
        prop_assert_eq!((window.per_rollout_old, window.per_rollout_train), (steps, k * epochs));
    }

    #[test]
    fn exit_step_is_the_last_argmax(values in prop::collection::vec(0u8..5, 2..12)) {
        let mut profile: Vec<f64> = values.iter().map(|&v| v as f64).collect();
        profile[0] = 0.0;
        let max = profile[1..].iter().cloned().fold(0.0, f64::max);
        match select_exit_step(&profile) {
            Ok(k) => {
                prop_assert!(k >= 1 && profile[k] == max);
                prop_assert!(profile[k + 1..].iter().all(|&v| v < max));
            }
            Err(_) => prop_assert_eq!(max, 0.0),
        }
    }

    #[test]
    fn clipping_bounds_the_global_norm(seed in any::<u64>(), max_norm in 0.01f64..10.0) {
        let net = Mlp::init(seed, Architecture::new(3, vec![5], 2)).unwrap();
        let mut grads = GradientBuffer::zeros_like(&net);
        let mut r = rng::stream(seed);
        for g in grads.values_mut() {
            *g = rand::Rng::random_range(&mut r, -4.0..4.0);
        }
        let before = grads.global_norm();
        let reported = grads.clip_global_norm(max_norm);
        prop_assert_eq!(reported, before);
        prop_assert!(grads.global_norm() <= max_norm * (1.0 + 1e-12) || before <= max_norm);
        if before <= max_norm {
            prop_assert_eq!(grads.global_norm(), before);
        }
    }

    #[test]
    fn wrap_stays_in_half_open_range(a in -1e4f64..1e4) {
        let w = wrap_deg(a);
        prop_assert!((-180.0..180.0).contains(&w));
        prop_assert!(angle_gap(w, a) < 1e-9);
    }
}
