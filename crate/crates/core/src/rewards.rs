//! Spatially grounded rewards and success criteria, computed exactly from
//! scene parameters.
//!
//! Every reward shares one structure:
//! `total = task_score − λ_id·identity_penalty − λ_bg·consistency_penalty`.
//! Penalties are L1 distances over encoded channels, capped at 1 so that
//! `total` stays in `[−(λ_id + λ_bg), 1]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{
    channel, encode_object, encode_scene, wrap_deg, Displacement, Instruction, SceneSpec, Task,
    BACKGROUND_CHANNELS, CANONICAL_SHIFT, MAX_OBJECTS, SLOT_CHANNELS,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardConfig {
    pub lambda_identity: f64,
    pub lambda_consistency: f64,
    pub movement_threshold: f64,
    pub identity_tolerance: f64,
    pub background_threshold: f64,
    pub rotation_tolerance_deg: f64,
    pub resize_tolerance: f64,
    pub canonical_shift: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda_identity: 0.5,
            lambda_consistency: 0.5,
            movement_threshold: 0.05,
            identity_tolerance: 0.1,
            background_threshold: 0.2,
            rotation_tolerance_deg: 20.0,
            resize_tolerance: 0.10,
            canonical_shift: CANONICAL_SHIFT,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_identity,
            self.lambda_consistency,
            self.movement_threshold,
            self.identity_tolerance,
            self.background_threshold,
            self.rotation_tolerance_deg,
            self.resize_tolerance,
            self.canonical_shift,
        ];
        if all.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Config("reward config values must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub task: Task,
    pub task_score: f64,
    pub identity_penalty: f64,
    pub consistency_penalty: f64,
    pub total: f64,
    pub success: bool,
    pub criteria: BTreeMap<String, bool>,
    pub diagnostics: BTreeMap<String, f64>,
}

impl RewardBreakdown {
    /// Headline task metric: displacement for translation, normalized error
    /// for rotation and resize.
    pub fn task_metric(&self) -> f64 {
        let key = match self.task {
            Task::Translate => "displacement",
            Task::Rotate => "normalized_error",
            Task::Resize => "normalized_error",
        };
        self.diagnostics[key]
    }
}

const ORIENTATION_CHANNELS: std::ops::Range<usize> = channel::ORIENTATION..channel::ORIENTATION + 6;
const PLACEMENT_CHANNELS: [usize; 3] = [channel::U, channel::V, channel::DEPTH];

fn l1(a: &[f64], b: &[f64], channels: impl IntoIterator<Item = usize>) -> f64 {
    channels.into_iter().map(|i| (a[i] - b[i]).abs()).sum()
}

/// Mean absolute difference over the encoded channels of every active
/// non-target object and the background.
pub fn consistency_l1(reference: &SceneSpec, edited: &SceneSpec, target: usize) -> f64 {
    let a = encode_scene(reference).0;
    let b = encode_scene(edited).0;
    let mut total = 0.0;
    let mut count = 0usize;
    for slot in (0..reference.active_count).filter(|&s| s != target) {
        let base = slot * SLOT_CHANNELS;
        total += l1(&a, &b, base..base + SLOT_CHANNELS);
        count += SLOT_CHANNELS;
    }
    let bg = MAX_OBJECTS * SLOT_CHANNELS;
    total += l1(&a, &b, bg..bg + BACKGROUND_CHANNELS);
    count += BACKGROUND_CHANNELS;
    total / count as f64
}

struct Shared {
    ref_target: [f64; SLOT_CHANNELS],
    edit_target: [f64; SLOT_CHANNELS],
    consistency: f64,
}

fn shared(reference: &SceneSpec, edited: &SceneSpec, instr: &Instruction) -> Shared {
    Shared {
        ref_target: encode_object(&reference.objects[instr.target]),
        edit_target: encode_object(&edited.objects[instr.target]),
        consistency: consistency_l1(reference, edited, instr.target),
    }
}

fn finish(
    task: Task,
    task_score: f64,
    identity_l1: f64,
    consistency_l1: f64,
    criteria: BTreeMap<String, bool>,
    mut diagnostics: BTreeMap<String, f64>,
    cfg: &RewardConfig,
) -> RewardBreakdown {
    let identity_penalty = identity_l1.min(1.0);
    let consistency_penalty = consistency_l1.min(1.0);
    diagnostics.insert("identity_l1".into(), identity_l1);
    diagnostics.insert("consistency_l1".into(), consistency_l1);
    let total = task_score - cfg.lambda_identity * identity_penalty - cfg.lambda_consistency * consistency_penalty;
    let success = criteria.values().all(|&c| c);
    RewardBreakdown {
        task,
        task_score,
        identity_penalty,
        consistency_penalty,
        total,
        success,
        criteria,
        diagnostics,
    }
}

fn check_task(instr: &Instruction, expected: Task) -> Result<()> {
    if instr.task != expected {
        return Err(Error::TaskMismatch {
            expected,
            got: instr.task,
        });
    }
    Ok(())
}

pub fn translation_reward(
    reference: &SceneSpec,
    edited: &SceneSpec,
    instr: &Instruction,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    check_task(instr, Task::Translate)?;
    let dir = instr
        .direction
        .ok_or_else(|| Error::InvalidInstruction("translation without direction".into()))?;
    let before = &reference.objects[instr.target];
    let after = &edited.objects[instr.target];
    let du = after.position[0] - before.position[0];
    let dv = after.position[1] - before.position[1];
    let (axis, sign) = dir.axis_and_sign();
    let (along, orth) = match axis {
        Displacement::U => (sign * du, dv.abs()),
        Displacement::V => (sign * dv, du.abs()),
        Displacement::Depth => (sign * (after.depth - before.depth), 0.0),
    };
    let delta = cfg.canonical_shift;
    let task_score = ((along / delta).clamp(0.0, 1.0) - 0.5 * (orth / delta).clamp(0.0, 1.0)).clamp(0.0, 1.0);

    let s = shared(reference, edited, instr);
    let identity = l1(&s.ref_target, &s.edit_target, ORIENTATION_CHANNELS.chain([channel::SCALE]));

    let mut criteria = BTreeMap::new();
    criteria.insert("movement".into(), along > cfg.movement_threshold && along > orth);
    criteria.insert("identity".into(), identity.min(1.0) < cfg.identity_tolerance);
    // a fixed-slot scene cannot duplicate an object, so this always holds
    criteria.insert("no_duplication".into(), true);
    criteria.insert("preservation".into(), s.consistency.min(1.0) <= cfg.background_threshold);

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("along".into(), along);
    diagnostics.insert("orthogonal".into(), orth);
    let displacement = match axis {
        Displacement::Depth => (after.depth - before.depth).abs(),
        _ => du.hypot(dv),
    };
    diagnostics.insert("displacement".into(), displacement);
    Ok(finish(Task::Translate, task_score, identity, s.consistency, criteria, diagnostics, cfg))
}

pub fn rotation_reward(
    reference: &SceneSpec,
    edited: &SceneSpec,
    instr: &Instruction,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    check_task(instr, Task::Rotate)?;
    let axis = instr
        .axis
        .ok_or_else(|| Error::InvalidInstruction("rotation without axis".into()))?;
    let wanted = instr
        .signed_angle()
        .ok_or_else(|| Error::InvalidInstruction("rotation without direction or angle".into()))?;
    let k = axis.index();
    let achieved = wrap_deg(edited.objects[instr.target].orientation[k] - reference.objects[instr.target].orientation[k]);
    let err_deg = wrap_deg(achieved - wanted).abs();
    let err = err_deg / 180.0;
    let task_score = 1.0 - err;

    let s = shared(reference, edited, instr);
    let identity = l1(&s.ref_target, &s.edit_target, PLACEMENT_CHANNELS.into_iter().chain([channel::SCALE]));

    let mut criteria = BTreeMap::new();
    criteria.insert("angle".into(), err_deg <= cfg.rotation_tolerance_deg);
    criteria.insert("preservation".into(), s.consistency.min(1.0) <= cfg.background_threshold);

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("achieved_deg".into(), achieved);
    diagnostics.insert("target_deg".into(), wanted);
    diagnostics.insert("normalized_error".into(), err);
    Ok(finish(Task::Rotate, task_score, identity, s.consistency, criteria, diagnostics, cfg))
}

pub fn resize_reward(
    reference: &SceneSpec,
    edited: &SceneSpec,
    instr: &Instruction,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    check_task(instr, Task::Resize)?;
    let ratio = instr
        .ratio
        .ok_or_else(|| Error::InvalidInstruction("resize without ratio".into()))?;
    let before = reference.objects[instr.target].scale;
    if before <= 0.0 {
        return Err(Error::InvalidScene("reference scale must be positive".into()));
    }
    let achieved = edited.objects[instr.target].scale / before;
    let abs_err = (achieved - ratio).abs();
    let err = abs_err / ratio;
    let task_score = 1.0 - err.min(1.0);

    let s = shared(reference, edited, instr);
    let identity = l1(&s.ref_target, &s.edit_target, PLACEMENT_CHANNELS.into_iter().chain(ORIENTATION_CHANNELS));

    let mut criteria = BTreeMap::new();
    criteria.insert("ratio".into(), err <= cfg.resize_tolerance);
    criteria.insert("preservation".into(), s.consistency.min(1.0) <= cfg.background_threshold);

    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("achieved_ratio".into(), achieved);
    diagnostics.insert("absolute_error".into(), abs_err);
    diagnostics.insert("normalized_error".into(), err);
    Ok(finish(Task::Resize, task_score, identity, s.consistency, criteria, diagnostics, cfg))
}

pub fn compute_reward(
    reference: &SceneSpec,
    edited: &SceneSpec,
    instr: &Instruction,
    cfg: &RewardConfig,
) -> Result<RewardBreakdown> {
    match instr.task {
        Task::Translate => translation_reward(reference, edited, instr, cfg),
        Task::Rotate => rotation_reward(reference, edited, instr, cfg),
        Task::Resize => resize_reward(reference, edited, instr, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{apply_oracle_edit, Axis, Direction, ObjectState, RotDir};

    fn scene(active: usize) -> SceneSpec {
        let mut objects: Vec<ObjectState> = (0..MAX_OBJECTS).map(ObjectState::placeholder).collect();
        objects[0].position = [0.5, 0.5];
        objects[0].depth = 0.6;
        objects[0].scale = 0.1;
        objects[1].position = [0.2, 0.3];
        objects[1].depth = 0.3;
        objects[1].scale = 0.15;
        SceneSpec {
            objects,
            active_count: active,
            background: [0.3, 0.4, 0.5, 0.6],
        }
    }

    fn cfg() -> RewardConfig {
        RewardConfig::default()
    }

    #[test]
    fn translate_left_exact() {
        let s = scene(3);
        let i = Instruction::translate(0, Direction::Left);
        let mut e = s.clone();
        e.objects[0].position = [0.25, 0.5];
        let r = translation_reward(&s, &e, &i, &cfg()).unwrap();
        assert_eq!(r.diagnostics["along"], 0.25);
        assert_eq!(r.task_score, 1.0);
        assert!(r.success);
    }

    #[test]
    fn translate_noop_fails_movement() {
        let s = scene(3);
        let r = translation_reward(&s, &s, &Instruction::translate(0, Direction::Up), &cfg()).unwrap();
        assert_eq!(r.diagnostics["along"], 0.0);
        assert!(!r.criteria["movement"]);
        assert!(!r.success);
    }

    #[test]
    fn translate_forward_uses_depth() {
        let s = scene(2);
        let mut e = s.clone();
        e.objects[0].depth = 0.35;
        let r = translation_reward(&s, &e, &Instruction::translate(0, Direction::Forward), &cfg()).unwrap();
        assert!((r.diagnostics["along"] - 0.25).abs() < 1e-15);
        assert!((r.task_score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rotation_examples() {
        let s = scene(2);
        let i = Instruction::rotate(0, Axis::Y, RotDir::Counterclockwise, 90);
        let mut e = s.clone();
        e.objects[0].orientation[1] = 90.0;
        let r = rotation_reward(&s, &e, &i, &cfg()).unwrap();
        assert_eq!(r.task_score, 1.0);
        assert!(r.success);

        e.objects[0].orientation[1] = 60.0;
        let r = rotation_reward(&s, &e, &i, &cfg()).unwrap();
        assert!((r.diagnostics["normalized_error"] - 30.0 / 180.0).abs() < 1e-15);
        assert!(!r.success);

        let half = Instruction::rotate(0, Axis::Y, RotDir::Clockwise, 180);
        e.objects[0].orientation[1] = -180.0;
        let r = rotation_reward(&s, &e, &half, &cfg()).unwrap();
        assert_eq!(r.diagnostics["normalized_error"], 0.0);
    }

    #[test]
    fn rotation_tolerance_is_inclusive() {
        let s = scene(2);
        let i = Instruction::rotate(0, Axis::X, RotDir::Counterclockwise, 45);
        let mut e = s.clone();
        e.objects[0].orientation[0] = 25.0;
        assert!(rotation_reward(&s, &e, &i, &cfg()).unwrap().success);
        e.objects[0].orientation[0] = 24.9;
        assert!(!rotation_reward(&s, &e, &i, &cfg()).unwrap().success);
    }

    #[test]
    fn resize_examples() {
        let s = scene(2);
        let i = Instruction::resize(0, 2.0);
        let mut e = s.clone();
        e.objects[0].scale = 0.2;
        let r = resize_reward(&s, &e, &i, &cfg()).unwrap();
        assert_eq!(r.diagnostics["normalized_error"], 0.0);
        assert!(r.success);
        e.objects[0].scale = 0.25;
        let r = resize_reward(&s, &e, &i, &cfg()).unwrap();
        assert!((r.diagnostics["normalized_error"] - 0.25).abs() < 1e-12);
        assert!(!r.success);
        e.objects[0].scale = 0.21;
        let r = resize_reward(&s, &e, &i, &cfg()).unwrap();
        assert!((r.diagnostics["normalized_error"] - 0.05).abs() < 1e-12);
        assert!(r.success);
    }

    #[test]
    fn task_mismatch_is_rejected() {
        let s = scene(2);
        let err = rotation_reward(&s, &s, &Instruction::resize(0, 2.0), &cfg()).unwrap_err();
        assert!(matches!(err, Error::TaskMismatch { expected: Task::Rotate, got: Task::Resize }));
    }

    #[test]
    fn oracle_and_noop_for_every_task() {
        let s = scene(3);
        let instrs = [
            Instruction::translate(1, Direction::Down),
            Instruction::rotate(0, Axis::Z, RotDir::Clockwise, 135),
            Instruction::resize(2, 1.25),
        ];
        for i in instrs {
            let oracle = compute_reward(&s, &apply_oracle_edit(&s, &i), &i, &cfg()).unwrap();
            assert!((oracle.total - 1.0).abs() < 1e-12, "{i:?}: {}", oracle.total);
            assert!(oracle.success);
            assert_eq!(oracle.identity_penalty, 0.0);
            assert_eq!(oracle.consistency_penalty, 0.0);
            let noop = compute_reward(&s, &s, &i, &cfg()).unwrap();
            assert!(!noop.success);
        }
    }

    #[test]
    fn shifted_neighbor_breaks_preservation() {
        let s = scene(2);
        let i = Instruction::translate(0, Direction::Left);
        let mut e = apply_oracle_edit(&s, &i);
        e.objects[1].position[0] += 0.5;
        e.objects[1].position[1] += 0.5;
        e.objects[1].depth += 0.5;
        let r = compute_reward(&s, &e, &i, &cfg()).unwrap();
        assert!(r.consistency_penalty > 0.2);
        assert!(!r.criteria["preservation"]);
    }
}
