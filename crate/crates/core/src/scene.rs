//! Parametric scenes, templated edit instructions, oracle edits, and the
//! encodings between scenes, latents and conditioning vectors.
//!
//! A scene is a fixed set of [`MAX_OBJECTS`] object slots, of which the first
//! `active_count` take part in instructions. The latent layout is, per slot,
//!
//! ```text
//! [u, v, d, cos θx, sin θx, cos θy, sin θy, cos θz, sin θz, s]
//! ```
//!
//! followed by four background channels. Affine channels live in [-1, 1],
//! scale is encoded in the log domain so that a resize is an additive shift.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MAX_OBJECTS: usize = 5;
pub const MIN_ACTIVE: usize = 2;
pub const SLOT_CHANNELS: usize = 10;
pub const BACKGROUND_CHANNELS: usize = 4;
pub const LATENT_DIM: usize = MAX_OBJECTS * SLOT_CHANNELS + BACKGROUND_CHANNELS;
pub const INSTRUCTION_DIM: usize = 3 + MAX_OBJECTS + 6 + 3 + 2 + 4 + 5;
pub const CONDITION_DIM: usize = LATENT_DIM + INSTRUCTION_DIM;

pub const SCALE_MIN: f64 = 0.02;
pub const SCALE_MAX: f64 = 0.8;
/// Displacement applied by the oracle for a translation instruction.
pub const CANONICAL_SHIFT: f64 = 0.25;
/// Translated centers must stay inside `[EDGE_MARGIN, 1 - EDGE_MARGIN]`.
pub const EDGE_MARGIN: f64 = 0.05;

pub const ANGLES_DEG: [u32; 4] = [45, 90, 135, 180];
pub const RATIOS: [f64; 5] = [1.25, 1.5, 2.0, 3.0, 4.0];

/// Channel offsets inside one slot.
pub mod channel {
    pub const U: usize = 0;
    pub const V: usize = 1;
    pub const DEPTH: usize = 2;
    /// First of the three (cos, sin) pairs.
    pub const ORIENTATION: usize = 3;
    pub const SCALE: usize = 9;
}

/// Wraps an angle in degrees to `[-180, 180)`.
pub fn wrap_deg(angle: f64) -> f64 {
    let w = (angle + 180.0).rem_euclid(360.0) - 180.0;
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if w >= 180.0 {
        w - 360.0
    } else {
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub index: usize,
    /// (u, v) in normalized image coordinates.
    pub position: [f64; 2],
    /// 0 is nearest to the camera.
    pub depth: f64,
    /// (θx, θy, θz) in degrees, wrapped to [-180, 180).
    pub orientation: [f64; 3],
    pub scale: f64,
}

impl ObjectState {
    pub fn placeholder(index: usize) -> Self {
        Self {
            index,
            position: [0.5, 0.5],
            depth: 0.5,
            orientation: [0.0; 3],
            scale: SCALE_MIN,
        }
    }

    fn validate(&self, slot: usize) -> Result<()> {
        let fields = [
            self.position[0],
            self.position[1],
            self.depth,
            self.orientation[0],
            self.orientation[1],
            self.orientation[2],
            self.scale,
        ];
        if fields.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidScene(format!("slot {slot} has non-finite fields")));
        }
        if self.index != slot {
            return Err(Error::InvalidScene(format!("slot {slot} carries index {}", self.index)));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.position[0]) || !unit(self.position[1]) || !unit(self.depth) {
            return Err(Error::InvalidScene(format!("slot {slot} position/depth outside [0,1]")));
        }
        if self.orientation.iter().any(|a| !(-180.0..180.0).contains(a)) {
            return Err(Error::InvalidScene(format!("slot {slot} orientation not wrapped")));
        }
        if !(SCALE_MIN..=SCALE_MAX).contains(&self.scale) {
            return Err(Error::InvalidScene(format!("slot {slot} scale {} out of range", self.scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectState>,
    pub active_count: usize,
    pub background: [f64; 4],
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.len() != MAX_OBJECTS {
            return Err(Error::InvalidScene(format!(
                "expected {MAX_OBJECTS} object slots, got {}",
                self.objects.len()
            )));
        }
        if !(MIN_ACTIVE..=MAX_OBJECTS).contains(&self.active_count) {
            return Err(Error::InvalidScene(format!("active_count {} outside [2,5]", self.active_count)));
        }
        for (slot, obj) in self.objects.iter().enumerate() {
            obj.validate(slot)?;
        }
        if self.background.iter().any(|b| !b.is_finite() || !(0.0..=1.0).contains(b)) {
            return Err(Error::InvalidScene("background outside [0,1]".into()));
        }
        Ok(())
    }

    pub fn target(&self, instr: &Instruction) -> &ObjectState {
        &self.objects[instr.target]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Translate,
    Rotate,
    Resize,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Translate, Task::Rotate, Task::Resize];

    pub fn name(self) -> &'static str {
        match self {
            Task::Translate => "translate",
            Task::Rotate => "rotate",
            Task::Resize => "resize",
        }
    }

    fn one_hot_index(self) -> usize {
        self as usize
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translate" => Ok(Task::Translate),
            "rotate" => Ok(Task::Rotate),
            "resize" => Ok(Task::Resize),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
    Forward,
    Backward,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::Left,
        Direction::Right,
        Direction::Up,
        Direction::Down,
        Direction::Forward,
        Direction::Backward,
    ];

    /// Which object channel the direction moves along, and the sign.
    pub fn axis_and_sign(self) -> (Displacement, f64) {
        match self {
            Direction::Left => (Displacement::U, -1.0),
            Direction::Right => (Displacement::U, 1.0),
            Direction::Up => (Displacement::V, -1.0),
            Direction::Down => (Displacement::V, 1.0),
            Direction::Forward => (Displacement::Depth, -1.0),
            Direction::Backward => (Displacement::Depth, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Displacement {
    U,
    V,
    Depth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotDir {
    Clockwise,
    Counterclockwise,
}

impl RotDir {
    pub const ALL: [RotDir; 2] = [RotDir::Clockwise, RotDir::Counterclockwise];

    pub fn sign(self) -> f64 {
        match self {
            RotDir::Clockwise => -1.0,
            RotDir::Counterclockwise => 1.0,
        }
    }
}

/// A templated edit command. Only the fields of the active task are set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Instruction {
    pub task: Task,
    pub target: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<Axis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rot_dir: Option<RotDir>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle_deg: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
}

impl Instruction {
    pub fn translate(target: usize, direction: Direction) -> Self {
        Self {
            task: Task::Translate,
            target,
            direction: Some(direction),
            axis: None,
            rot_dir: None,
            angle_deg: None,
            ratio: None,
        }
    }

    pub fn rotate(target: usize, axis: Axis, rot_dir: RotDir, angle_deg: u32) -> Self {
        Self {
            task: Task::Rotate,
            target,
            direction: None,
            axis: Some(axis),
            rot_dir: Some(rot_dir),
            angle_deg: Some(angle_deg),
            ratio: None,
        }
    }

    pub fn resize(target: usize, ratio: f64) -> Self {
        Self {
            task: Task::Resize,
            target,
            direction: None,
            axis: None,
            rot_dir: None,
            angle_deg: None,
            ratio: Some(ratio),
        }
    }

    /// Signed rotation in degrees, counterclockwise positive.
    pub fn signed_angle(&self) -> Option<f64> {
        Some(self.rot_dir?.sign() * f64::from(self.angle_deg?))
    }

    pub fn validate(&self, scene: &SceneSpec) -> Result<()> {
        if self.target >= scene.active_count {
            return Err(Error::InvalidInstruction(format!(
                "target {} is not an active slot (active_count {})",
                self.target, scene.active_count
            )));
        }
        let populated = [
            self.direction.is_some(),
            self.axis.is_some(),
            self.rot_dir.is_some(),
            self.angle_deg.is_some(),
            self.ratio.is_some(),
        ];
        let expected = match self.task {
            Task::Translate => [true, false, false, false, false],
            Task::Rotate => [false, true, true, true, false],
            Task::Resize => [false, false, false, false, true],
        };
        if populated != expected {
            return Err(Error::InvalidInstruction(format!(
                "fields populated {populated:?} do not match task {:?}",
                self.task
            )));
        }
        if let Some(a) = self.angle_deg {
            if !ANGLES_DEG.contains(&a) {
                return Err(Error::InvalidInstruction(format!("angle {a} not in template grid")));
            }
        }
        if let Some(r) = self.ratio {
            if !RATIOS.contains(&r) {
                return Err(Error::InvalidInstruction(format!("ratio {r} not in template grid")));
            }
        }
        Ok(())
    }
}

/// Bounds for [`sample_scene`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub min_separation: f64,
    /// Range for object centers and depth.
    pub position_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub max_attempts: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            min_separation: 0.15,
            position_range: [EDGE_MARGIN, 1.0 - EDGE_MARGIN],
            scale_range: [SCALE_MIN, 0.2],
            max_attempts: 1000,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.position_range;
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::Config("position_range must be an increasing pair in [0,1]".into()));
        }
        let [slo, shi] = self.scale_range;
        if slo < SCALE_MIN || shi > SCALE_MAX || slo > shi {
            return Err(Error::Config(format!("scale_range must lie in [{SCALE_MIN}, {SCALE_MAX}]")));
        }
        // the largest ratio must keep a resized object in range
        if shi * RATIOS[RATIOS.len() - 1] > SCALE_MAX + 1e-12 {
            return Err(Error::Config("scale_range upper bound too large for 4x resize".into()));
        }
        if self.min_separation < 0.0 || self.max_attempts == 0 {
            return Err(Error::Config("min_separation must be >= 0 and max_attempts > 0".into()));
        }
        Ok(())
    }
}

pub fn sample_scene(seed: u64, config: &GenerationConfig) -> Result<SceneSpec> {
    config.validate()?;
    let mut rng = rng::stream(seed);
    let active_count = rng.random_range(MIN_ACTIVE..=MAX_OBJECTS);
    let [lo, hi] = config.position_range;
    let [slo, shi] = config.scale_range;

    let mut objects: Vec<ObjectState> = Vec::with_capacity(MAX_OBJECTS);
    for index in 0..MAX_OBJECTS {
        let mut placed = None;
        for _ in 0..config.max_attempts {
            let position = [rng.random_range(lo..=hi), rng.random_range(lo..=hi)];
            let clear = objects.iter().all(|o| {
                let du = o.position[0] - position[0];
                let dv = o.position[1] - position[1];
                (du * du + dv * dv).sqrt() >= config.min_separation
            });
            if clear {
                placed = Some(position);
                break;
            }
        }
        let position = placed.ok_or(Error::SeparationUnreachable {
            object: index + 1,
            separation: config.min_separation,
            attempts: config.max_attempts,
        })?;
        let depth = rng.random_range(lo..=hi);
        let orientation = [
            rng.random_range(-180.0..180.0),
            rng.random_range(-180.0..180.0),
            rng.random_range(-180.0..180.0),
        ];
        let scale = rng.random_range(slo..=shi);
        objects.push(ObjectState {
            index,
            position,
            depth,
            orientation,
            scale,
        });
    }
    let background = [rng.random(), rng.random(), rng.random(), rng.random()];
    Ok(SceneSpec {
        objects,
        active_count,
        background,
    })
}

/// Whether a translation of `obj` in `dir` by the canonical shift keeps the
/// moved coordinate inside the margin.
pub fn translation_allowed(obj: &ObjectState, dir: Direction) -> bool {
    let (axis, sign) = dir.axis_and_sign();
    let current = match axis {
        Displacement::U => obj.position[0],
        Displacement::V => obj.position[1],
        Displacement::Depth => obj.depth,
    };
    let moved = current + sign * CANONICAL_SHIFT;
    (EDGE_MARGIN..=1.0 - EDGE_MARGIN).contains(&moved)
}

/// All instructions of the template grid that are valid for `scene`.
pub fn template_grid(scene: &SceneSpec, task: Task) -> Vec<Instruction> {
    let mut out = Vec::new();
    for target in 0..scene.active_count {
        match task {
            Task::Translate => {
                let obj = &scene.objects[target];
                out.extend(
                    Direction::ALL
                        .iter()
                        .filter(|&&d| translation_allowed(obj, d))
                        .map(|&d| Instruction::translate(target, d)),
                );
            }
            Task::Rotate => {
                for axis in Axis::ALL {
                    for rot_dir in RotDir::ALL {
                        for angle in ANGLES_DEG {
                            out.push(Instruction::rotate(target, axis, rot_dir, angle));
                        }
                    }
                }
            }
            Task::Resize => out.extend(RATIOS.iter().map(|&r| Instruction::resize(target, r))),
        }
    }
    out
}

/// Draws an instruction uniformly from the template grid of `task`. Without
/// a filter the task itself is drawn uniformly first.
pub fn sample_instruction(seed: u64, scene: &SceneSpec, task: Option<Task>) -> Instruction {
    let mut rng = rng::stream(seed);
    let task = task.unwrap_or_else(|| Task::ALL[rng.random_range(0..Task::ALL.len())]);
    let grid = template_grid(scene, task);
    // Each object keeps at least one direction per in-plane axis, so the grid
    // is never empty for a scene from sample_scene.
    grid[rng.random_range(0..grid.len())]
}

pub fn apply_oracle_edit(scene: &SceneSpec, instr: &Instruction) -> SceneSpec {
    let mut out = scene.clone();
    let obj = &mut out.objects[instr.target];
    match instr.task {
        Task::Translate => {
            let dir = instr.direction.expect("translate instruction carries a direction");
            let (axis, sign) = dir.axis_and_sign();
            let slot = match axis {
                Displacement::U => &mut obj.position[0],
                Displacement::V => &mut obj.position[1],
                Displacement::Depth => &mut obj.depth,
            };
            *slot = (*slot + sign * CANONICAL_SHIFT).clamp(0.0, 1.0);
        }
        Task::Rotate => {
            let axis = instr.axis.expect("rotate instruction carries an axis");
            let delta = instr.signed_angle().expect("rotate instruction carries an angle");
            let a = &mut obj.orientation[axis.index()];
            *a = wrap_deg(*a + delta);
        }
        Task::Resize => {
            let ratio = instr.ratio.expect("resize instruction carries a ratio");
            obj.scale = (obj.scale * ratio).min(SCALE_MAX);
        }
    }
    out
}

/// Flat scene latent of length [`LATENT_DIM`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneLatent(pub Vec<f64>);

/// Flat conditioning vector of length [`CONDITION_DIM`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConditionVector(pub Vec<f64>);

fn unit_to_raw(x: f64) -> f64 {
    2.0 * x - 1.0
}

fn raw_to_unit(r: f64) -> f64 {
    (r.clamp(-1.0, 1.0) + 1.0) / 2.0
}

fn scale_to_raw(s: f64) -> f64 {
    let (lo, hi) = (SCALE_MIN.ln(), SCALE_MAX.ln());
    2.0 * (s.ln() - lo) / (hi - lo) - 1.0
}

fn raw_to_scale(r: f64) -> f64 {
    let (lo, hi) = (SCALE_MIN.ln(), SCALE_MAX.ln());
    let ln_s = lo + (r.clamp(-1.0, 1.0) + 1.0) / 2.0 * (hi - lo);
    ln_s.exp().clamp(SCALE_MIN, SCALE_MAX)
}

/// Decodes a (cos, sin) pair to degrees; near-zero pairs decode to 0.
fn pair_to_angle(cos_raw: f64, sin_raw: f64) -> f64 {
    if cos_raw.hypot(sin_raw) < 1e-6 {
        return 0.0;
    }
    wrap_deg(sin_raw.atan2(cos_raw).to_degrees())
}

pub fn encode_object(obj: &ObjectState) -> [f64; SLOT_CHANNELS] {
    let mut out = [0.0; SLOT_CHANNELS];
    out[channel::U] = unit_to_raw(obj.position[0]);
    out[channel::V] = unit_to_raw(obj.position[1]);
    out[channel::DEPTH] = unit_to_raw(obj.depth);
    for (k, angle) in obj.orientation.iter().enumerate() {
        let rad = angle.to_radians();
        out[channel::ORIENTATION + 2 * k] = rad.cos();
        out[channel::ORIENTATION + 2 * k + 1] = rad.sin();
    }
    out[channel::SCALE] = scale_to_raw(obj.scale);
    out
}

pub fn encode_scene(scene: &SceneSpec) -> SceneLatent {
    let mut x = vec![0.0; LATENT_DIM];
    for obj in scene.objects.iter().take(scene.active_count) {
        let base = obj.index * SLOT_CHANNELS;
        x[base..base + SLOT_CHANNELS].copy_from_slice(&encode_object(obj));
    }
    let bg = MAX_OBJECTS * SLOT_CHANNELS;
    for (k, b) in scene.background.iter().enumerate() {
        x[bg + k] = unit_to_raw(*b);
    }
    SceneLatent(x)
}

/// Total inverse of [`encode_scene`]. Inactive slots are copied from the
/// template since they carry no latent information.
pub fn decode_latent(x: &SceneLatent, template: &SceneSpec) -> SceneSpec {
    assert_eq!(x.0.len(), LATENT_DIM, "latent length");
    let mut out = template.clone();
    for slot in 0..template.active_count {
        let c = &x.0[slot * SLOT_CHANNELS..(slot + 1) * SLOT_CHANNELS];
        let obj = &mut out.objects[slot];
        obj.position = [raw_to_unit(c[channel::U]), raw_to_unit(c[channel::V])];
        obj.depth = raw_to_unit(c[channel::DEPTH]);
        for k in 0..3 {
            obj.orientation[k] =
                pair_to_angle(c[channel::ORIENTATION + 2 * k], c[channel::ORIENTATION + 2 * k + 1]);
        }
        obj.scale = raw_to_scale(c[channel::SCALE]);
    }
    let bg = MAX_OBJECTS * SLOT_CHANNELS;
    for k in 0..BACKGROUND_CHANNELS {
        out.background[k] = raw_to_unit(x.0[bg + k]);
    }
    out
}

/// Instruction one-hot blocks, in layout order.
pub fn encode_instruction(instr: &Instruction) -> [f64; INSTRUCTION_DIM] {
    let mut out = [0.0; INSTRUCTION_DIM];
    let mut offset = 0;
    let mut hot = |width: usize, index: Option<usize>, out: &mut [f64; INSTRUCTION_DIM]| {
        if let Some(i) = index {
            out[offset + i] = 1.0;
        }
        offset += width;
    };
    hot(3, Some(instr.task.one_hot_index()), &mut out);
    hot(MAX_OBJECTS, Some(instr.target), &mut out);
    hot(6, instr.direction.map(|d| d as usize), &mut out);
    hot(3, instr.axis.map(Axis::index), &mut out);
    hot(2, instr.rot_dir.map(|r| r as usize), &mut out);
    hot(4, instr.angle_deg.and_then(|a| ANGLES_DEG.iter().position(|&g| g == a)), &mut out);
    hot(5, instr.ratio.and_then(|r| RATIOS.iter().position(|&g| g == r)), &mut out);
    out
}

pub fn encode_condition(scene: &SceneSpec, instr: &Instruction) -> ConditionVector {
    let mut c = encode_scene(scene).0;
    c.extend_from_slice(&encode_instruction(instr));
    ConditionVector(c)
}

/// A reference scene with its instruction and conditioning vector; the unit
/// a rollout is generated for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditCondition {
    pub scene: SceneSpec,
    pub instruction: Instruction,
    pub vector: ConditionVector,
}

impl EditCondition {
    pub fn new(scene: SceneSpec, instruction: Instruction) -> Self {
        let vector = encode_condition(&scene, &instruction);
        Self {
            scene,
            instruction,
            vector,
        }
    }

    pub fn oracle_target(&self) -> SceneSpec {
        apply_oracle_edit(&self.scene, &self.instruction)
    }
}
