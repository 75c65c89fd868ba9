//! Deterministic 2D tabletop simulator.
//!
//! A session is a continuous third-person recording spanning several
//! episodes, per-episode ego streams, ground-truth embodiment masks, a
//! noisy pose log and a static background reference.

mod expert;
mod render;

pub use expert::{expert_command, expert_step};
pub use render::{render, render_start_marker, Camera, Palette, PALETTE};

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::segment::PromptSet;
use crate::session::{self, EpisodeSpan, PoseRow, Session};
use crate::types::{
    interval_ns, jitter_clamp_ns, ActionLabel, Embodiment, Frame, Mask, Pose2, Rgb,
    SessionManifest, ViewRole, SCHEMA_VERSION,
};

/// Per-step translation cap of the gripper (m).
pub const MAX_STEP_M: f64 = 0.015;
/// Per-step rotation cap (rad).
pub const MAX_STEP_RAD: f64 = 0.05;
/// Per-step gripper width change cap (m).
pub const MAX_WIDTH_STEP_M: f64 = 0.02;
/// Diameter of the manipulated object; the gripper stops closing here.
pub const OBJECT_SIZE_M: f64 = 0.024;
/// Grasp succeeds when the object center lies within this distance of
/// the jaw line.
pub const GRASP_TOLERANCE_M: f64 = 0.015;
/// Closing to within this margin of the object size grasps it.
pub const GRASP_MARGIN_M: f64 = 0.006;
/// Opening past `OBJECT_SIZE_M + RELEASE_MARGIN_M` releases the object.
pub const RELEASE_MARGIN_M: f64 = 0.012;
/// Success radius of a container.
pub const CONTAINER_RADIUS_M: f64 = 0.04;
/// Distance from the gripper center back to the hand holding it.
pub const HAND_OFFSET_M: f64 = 0.10;
/// Upper bound on expert episode length in steps.
pub const MAX_EPISODE_STEPS: usize = 400;

pub const MASKS_DIR: &str = "masks";
pub const COMMANDS_FILE: &str = "commands.csv";
pub const EVENTS_FILE: &str = "sim_events.json";
pub const PROMPTS_FILE: &str = "prompts.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "cup-place")]
    CupPlace,
    #[serde(rename = "slot-insert")]
    SlotInsert,
}

impl Task {
    pub fn id(self) -> &'static str {
        match self {
            Task::CupPlace => "cup-place",
            Task::SlotInsert => "slot-insert",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub task_id: Task,
    pub n_containers: u32,
    pub world_width_m: f64,
    pub world_height_m: f64,
    pub fps_ego: f64,
    pub fps_third: f64,
    pub ego_crop_m: f64,
    pub ego_px: u32,
    pub third_width_px: u32,
    pub third_height_px: u32,
    pub jitter_std_ns: f64,
    pub pose_noise_xy_m: f64,
    pub pose_noise_theta_rad: f64,
    pub w_max_m: f64,
    pub episode_gap_s: f64,
    pub preroll_frames: u32,
    pub marker_frames: u32,
    /// Std of the operator's per-step hand tremor during demonstrations (m).
    pub operator_noise_m: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            task_id: Task::CupPlace,
            n_containers: 3,
            world_width_m: 1.0,
            world_height_m: 0.75,
            fps_ego: 30.0,
            fps_third: 30.0,
            ego_crop_m: 0.25,
            ego_px: 96,
            third_width_px: 160,
            third_height_px: 120,
            jitter_std_ns: 2e6,
            pose_noise_xy_m: 0.001,
            pose_noise_theta_rad: 0.5f64.to_radians(),
            w_max_m: crate::types::DEFAULT_W_MAX,
            episode_gap_s: 0.5,
            preroll_frames: 2,
            marker_frames: 3,
            operator_noise_m: 0.003,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: SimConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("SimConfig always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("world_width_m", self.world_width_m),
            ("world_height_m", self.world_height_m),
            ("fps_ego", self.fps_ego),
            ("fps_third", self.fps_third),
            ("ego_crop_m", self.ego_crop_m),
            ("w_max_m", self.w_max_m),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("jitter_std_ns", self.jitter_std_ns),
            ("pose_noise_xy_m", self.pose_noise_xy_m),
            ("pose_noise_theta_rad", self.pose_noise_theta_rad),
            ("episode_gap_s", self.episode_gap_s),
            ("operator_noise_m", self.operator_noise_m),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        if self.ego_px == 0 || self.third_width_px == 0 || self.third_height_px == 0 {
            return Err(Error::InvalidConfig(
                "pixel extents must be positive".into(),
            ));
        }
        if self.n_containers == 0 {
            return Err(Error::InvalidConfig(
                "n_containers must be at least 1".into(),
            ));
        }
        if self.w_max_m <= OBJECT_SIZE_M + RELEASE_MARGIN_M {
            return Err(Error::InvalidConfig(format!(
                "w_max_m must exceed {}",
                OBJECT_SIZE_M + RELEASE_MARGIN_M
            )));
        }
        if self.marker_frames == 0 {
            return Err(Error::InvalidConfig(
                "marker_frames must be at least 1".into(),
            ));
        }
        Ok(())
    }

    /// Meters per ego pixel; the scale used to turn marker distances into widths.
    pub fn ego_scale_m_per_px(&self) -> f64 {
        self.ego_crop_m / self.ego_px as f64
    }

    pub fn manifest(&self, embodiment: Embodiment) -> SessionManifest {
        SessionManifest {
            session_id: format!("{}-{}-s{}", self.task_id.id(), embodiment, self.seed),
            fps_ego: self.fps_ego,
            fps_third: self.fps_third,
            resolution_ego: [self.ego_px, self.ego_px],
            resolution_third: [self.third_width_px, self.third_height_px],
            seed: self.seed,
            task_id: self.task_id.id().to_string(),
            embodiment,
            w_max: self.w_max_m,
            scale_m_per_px: self.ego_scale_m_per_px(),
            schema_version: SCHEMA_VERSION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    Disk { radius: f64 },
    Rect { half_w: f64, half_h: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: u32,
    pub shape: Shape,
    pub pose: Pose2,
    pub color: Rgb,
    pub held: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Container {
    pub pose: Pose2,
    pub radius: f64,
    pub is_target: bool,
    /// Slot already occupied (slot-insert distractors).
    pub filled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneState {
    pub task: Task,
    pub gripper: Pose2,
    pub gripper_width: f64,
    pub w_max: f64,
    pub objects: Vec<SceneObject>,
    pub containers: Vec<Container>,
    pub embodiment: Embodiment,
    pub anchor: Pose2,
    /// Offset of the held object in the gripper frame.
    pub hold_offset: Option<[f64; 2]>,
    /// Reachable gripper extent `[width, height]`; positions are clamped to it.
    pub workspace: [f64; 2],
}

/// Absolute gripper target for one control step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Command {
    pub pose: Pose2,
    pub width: f64,
}

impl SceneState {
    /// Sample an initial scene. Draws from `rng` do not depend on `embodiment`.
    pub fn sample(cfg: &SimConfig, embodiment: Embodiment, rng: &mut impl Rng) -> Result<Self> {
        let (w, h) = (cfg.world_width_m, cfg.world_height_m);
        let n = cfg.n_containers as usize;
        let target = rng.random_range(0..n);
        let containers: Vec<Container> = (0..n)
            .map(|k| {
                let x = w * (k as f64 + 1.0) / (n as f64 + 1.0) + rng.random_range(-0.01..0.01);
                let y = 0.82 * h + rng.random_range(-0.01..0.01);
                Container {
                    pose: Pose2::new(x, y, 0.0),
                    radius: CONTAINER_RADIUS_M,
                    is_target: k == target,
                    filled: cfg.task_id == Task::SlotInsert && k != target,
                }
            })
            .collect();
        let ox = rng.random_range(0.38 * w..0.62 * w);
        let oy = rng.random_range(0.24 * h..0.34 * h);
        let obj_theta = rng.random_range(-0.5..0.5);
        let theta0: f64 = rng.random_range(-0.3..0.3);
        let u = rng.random_range(-0.03..0.03);
        let v = rng.random_range(0.05..0.08);
        let heading = Pose2::new(0.0, 0.0, theta0);
        let off = heading.transform_point([u, v]);
        let gripper = Pose2::new(ox - off[0], oy - off[1], theta0);

        let shape = match cfg.task_id {
            Task::CupPlace => Shape::Disk {
                radius: OBJECT_SIZE_M / 2.0,
            },
            Task::SlotInsert => Shape::Rect {
                half_w: OBJECT_SIZE_M / 2.0,
                half_h: OBJECT_SIZE_M / 2.0,
            },
        };
        let anchor = anchor_for(embodiment, cfg, containers[target].pose.x);
        let state = SceneState {
            task: cfg.task_id,
            gripper,
            gripper_width: cfg.w_max_m,
            w_max: cfg.w_max_m,
            objects: vec![SceneObject {
                id: 0,
                shape,
                pose: Pose2::new(ox, oy, obj_theta),
                color: PALETTE.object,
                held: false,
            }],
            containers,
            embodiment,
            anchor,
            hold_offset: None,
            workspace: [w, h],
        };
        state.check_placement(cfg)?;
        Ok(state)
    }

    fn check_placement(&self, cfg: &SimConfig) -> Result<()> {
        let (w, h) = (cfg.world_width_m, cfg.world_height_m);
        let half_diag = cfg.ego_crop_m * std::f64::consts::FRAC_1_SQRT_2;
        let ring = render::RING_OUTER_M;
        for c in &self.containers {
            let p = [c.pose.x, c.pose.y];
            if p[0] - ring < 0.0 || p[0] + ring > w || p[1] - ring < 0.0 || p[1] + ring > h {
                return Err(Error::PlacementInfeasible(format!(
                    "container at ({:.3}, {:.3}) leaves the {w}x{h} world",
                    p[0], p[1]
                )));
            }
        }
        let t = self.target();
        let d = (t.pose.x - self.gripper.x).hypot(t.pose.y - self.gripper.y);
        if d <= half_diag + ring {
            return Err(Error::PlacementInfeasible(format!(
                "target container within {d:.3} m of the gripper is visible in the initial ego crop"
            )));
        }
        Ok(())
    }

    pub fn target(&self) -> &Container {
        self.containers
            .iter()
            .find(|c| c.is_target)
            .expect("scene has a target container")
    }

    pub fn task_object(&self) -> &SceneObject {
        &self.objects[0]
    }

    pub fn held(&self) -> bool {
        self.objects.iter().any(|o| o.held)
    }

    /// Where the human or robot hand grips the device.
    pub fn hand_point(&self) -> [f64; 2] {
        self.gripper.transform_point([0.0, -HAND_OFFSET_M])
    }

    /// Three-segment articulated arm from the anchor to the hand.
    pub fn arm_joints(&self) -> [[f64; 2]; 4] {
        let a = [self.anchor.x, self.anchor.y];
        let p = self.hand_point();
        let d = [p[0] - a[0], p[1] - a[1]];
        let len = d[0].hypot(d[1]).max(1e-9);
        let n = [-d[1] / len, d[0] / len];
        let bend = match self.embodiment {
            Embodiment::Robot => -0.15,
            _ => 0.12,
        };
        let j1 = [
            a[0] + d[0] / 3.0 + n[0] * bend * len,
            a[1] + d[1] / 3.0 + n[1] * bend * len,
        ];
        let j2 = [
            a[0] + 2.0 * d[0] / 3.0 + n[0] * 0.5 * bend * len,
            a[1] + 2.0 * d[1] / 3.0 + n[1] * 0.5 * bend * len,
        ];
        [a, j1, j2, p]
    }

    /// Advance one control step toward `cmd`, enforcing rate limits,
    /// grasping and release.
    pub fn apply(&mut self, cmd: Command) {
        let prev_width = self.gripper_width;
        let dx = cmd.pose.x - self.gripper.x;
        let dy = cmd.pose.y - self.gripper.y;
        let dist = dx.hypot(dy);
        let scale = if dist > MAX_STEP_M {
            MAX_STEP_M / dist
        } else {
            1.0
        };
        let dtheta = crate::types::normalize_angle(cmd.pose.theta - self.gripper.theta)
            .clamp(-MAX_STEP_RAD, MAX_STEP_RAD);
        self.gripper = Pose2::new(
            (self.gripper.x + dx * scale).clamp(0.0, self.workspace[0]),
            (self.gripper.y + dy * scale).clamp(0.0, self.workspace[1]),
            self.gripper.theta + dtheta,
        );

        let target_w = cmd.width.clamp(0.0, self.w_max);
        let mut width =
            prev_width + (target_w - prev_width).clamp(-MAX_WIDTH_STEP_M, MAX_WIDTH_STEP_M);
        if self.held() {
            width = width.max(OBJECT_SIZE_M);
        }
        self.gripper_width = width;

        if let Some(off) = self.hold_offset {
            let g = self.gripper;
            let obj = &mut self.objects[0];
            let p = g.transform_point(off);
            obj.pose = Pose2::new(p[0], p[1], obj.pose.theta + dtheta);
        }

        if !self.held() && width <= OBJECT_SIZE_M + GRASP_MARGIN_M {
            let local = self
                .gripper
                .inverse_transform_point([self.objects[0].pose.x, self.objects[0].pose.y]);
            if local[0].abs() <= prev_width / 2.0 && local[1].abs() <= GRASP_TOLERANCE_M {
                // The closing jaws center the object between them.
                let off = [0.0, local[1]];
                let p = self.gripper.transform_point(off);
                let obj = &mut self.objects[0];
                obj.held = true;
                obj.pose = Pose2::new(p[0], p[1], obj.pose.theta);
                self.hold_offset = Some(off);
                self.gripper_width = OBJECT_SIZE_M;
            }
        } else if self.held() && width > OBJECT_SIZE_M + RELEASE_MARGIN_M {
            self.objects[0].held = false;
            self.hold_offset = None;
        }
    }

    /// Apply a relative action: `label.pose` is the next gripper pose in the
    /// current gripper frame.
    pub fn apply_relative(&mut self, label: &ActionLabel) {
        let pose = self.gripper.compose(&label.pose);
        self.apply(Command {
            pose,
            width: label.gripper_width,
        });
    }

    /// Same scene with a different (or no) embodiment drawn.
    pub fn with_embodiment(&self, embodiment: Embodiment, cfg: &SimConfig) -> SceneState {
        let mut s = self.clone();
        s.embodiment = embodiment;
        s.anchor = anchor_for(embodiment, cfg, self.target().pose.x);
        s
    }
}

/// Where the embodiment's base sits on the world edge. The human operator
/// stands facing the target container; the robot is bolted to the front-left corner.
fn anchor_for(embodiment: Embodiment, cfg: &SimConfig, target_x: f64) -> Pose2 {
    match embodiment {
        Embodiment::Robot => Pose2::new(0.02 * cfg.world_width_m, 0.0, std::f64::consts::FRAC_PI_2),
        _ => Pose2::new(target_x, 0.0, std::f64::consts::FRAC_PI_2),
    }
}

/// True iff the task object rests inside the target container with the
/// gripper open.
pub fn success(state: &SceneState) -> bool {
    let obj = state.task_object();
    if obj.held || state.gripper_width <= OBJECT_SIZE_M + RELEASE_MARGIN_M {
        return false;
    }
    let t = state.target();
    (obj.pose.x - t.pose.x).hypot(obj.pose.y - t.pose.y) <= t.radius
}

/// Roll the scripted expert from `initial` until success. Returns every
/// visited state, the last one successful.
pub fn expert_rollout(initial: &SceneState) -> Result<Vec<SceneState>> {
    let mut states = vec![initial.clone()];
    let mut s = initial.clone();
    while !success(&s) {
        if states.len() > MAX_EPISODE_STEPS {
            return Err(Error::InvalidConfig(
                "expert failed to finish within the step limit".into(),
            ));
        }
        s.apply(expert_command(&s));
        states.push(s.clone());
    }
    Ok(states)
}

/// Expert rollout with operator tremor: while the waypoint is more than two
/// steps away, each step's motion is perturbed by isotropic Gaussian noise
/// of std `noise_m`, then rate-limited as usual. The final approach is
/// noise-free so grasps and releases land exactly. With zero noise this is
/// `expert_rollout`.
pub fn demo_rollout(
    initial: &SceneState,
    noise_m: f64,
    rng: &mut impl Rng,
) -> Result<Vec<SceneState>> {
    if noise_m == 0.0 {
        return expert_rollout(initial);
    }
    let normal = Normal::new(0.0, noise_m).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut states = vec![initial.clone()];
    let mut s = initial.clone();
    while !success(&s) {
        if states.len() > MAX_EPISODE_STEPS {
            return Err(Error::InvalidConfig(
                "expert failed to finish within the step limit".into(),
            ));
        }
        let mut cmd = expert_command(&s);
        if expert::waypoint_distance(&s) > 2.0 * MAX_STEP_M {
            cmd.pose.x += normal.sample(rng);
            cmd.pose.y += normal.sample(rng);
        }
        s.apply(cmd);
        states.push(s.clone());
    }
    Ok(states)
}

/// Independent RNG stream for one concern of one session.
pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_SCENES: u64 = 1;
const STREAM_JITTER_EGO: u64 = 2;
const STREAM_JITTER_THIRD: u64 = 3;
const STREAM_POSE_NOISE: u64 = 4;
const STREAM_OPERATOR: u64 = 5;

/// Events logged by the simulator for oracle checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimEvents {
    pub session_start_ns: u64,
    pub marker_frame_index: usize,
    pub episode_lengths: Vec<usize>,
}

/// Output of `simulate_session`, still in memory.
pub struct SimulatedSession {
    pub session: Session,
    pub masks: Vec<(u64, Mask)>,
    pub commands: Vec<PoseRow>,
    pub events: SimEvents,
    pub prompts: PromptSet,
    pub episode_states: Vec<Vec<SceneState>>,
}

/// Which scene a third-person frame at a given time shows.
enum Phase<'a> {
    Episode(&'a SceneState),
    Transition {
        from: &'a SceneState,
        to: &'a SceneState,
        alpha: f64,
    },
}

pub fn simulate_session(
    cfg: &SimConfig,
    embodiment: Embodiment,
    n_episodes: usize,
) -> Result<SimulatedSession> {
    cfg.validate()?;
    if n_episodes == 0 {
        return Err(Error::InvalidConfig("n_episodes must be at least 1".into()));
    }
    let manifest = cfg.manifest(embodiment);
    let mut scene_rng = stream_rng(cfg.seed, STREAM_SCENES);
    let mut operator_rng = stream_rng(cfg.seed, STREAM_OPERATOR);
    let mut episodes_states = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let init = SceneState::sample(cfg, embodiment, &mut scene_rng)?;
        episodes_states.push(demo_rollout(
            &init,
            cfg.operator_noise_m,
            &mut operator_rng,
        )?);
    }

    // Nominal timeline in nanoseconds (f64 until jitter is applied).
    let ego_dt = 1e9 / cfg.fps_ego;
    let third_dt = 1e9 / cfg.fps_third;
    let gap = cfg.episode_gap_s * 1e9;
    let n_pre = (cfg.preroll_frames + cfg.marker_frames) as usize;
    let mut ego_nominal: Vec<f64> = (0..n_pre).map(|k| k as f64 * ego_dt).collect();
    let mut starts = Vec::with_capacity(n_episodes);
    let mut cursor = (n_pre as f64 - 1.0) * ego_dt + ego_dt + gap;
    for states in &episodes_states {
        starts.push(cursor);
        for k in 0..states.len() {
            ego_nominal.push(cursor + k as f64 * ego_dt);
        }
        cursor += (states.len() as f64 - 1.0) * ego_dt + ego_dt + gap;
    }
    let end = *ego_nominal.last().expect("non-empty") + ego_dt;
    let n_third = (end / third_dt).floor() as usize + 1;
    let third_nominal: Vec<f64> = (0..n_third).map(|j| j as f64 * third_dt).collect();

    let slower = interval_ns(cfg.fps_ego).max(interval_ns(cfg.fps_third));
    let clamp = jitter_clamp_ns(slower) as f64;
    let ego_ts = jitter(
        &ego_nominal,
        cfg.jitter_std_ns,
        clamp,
        cfg.seed,
        STREAM_JITTER_EGO,
    );
    let third_ts = jitter(
        &third_nominal,
        cfg.jitter_std_ns,
        clamp,
        cfg.seed,
        STREAM_JITTER_THIRD,
    );

    // Ego stream, pose log, commanded log.
    let mut ego = Vec::with_capacity(ego_ts.len());
    let mut commands = Vec::with_capacity(ego_ts.len());
    let first_state = &episodes_states[0][0];
    let marker = render_start_marker(cfg.ego_px, cfg.ego_px);
    for (k, &t) in ego_ts.iter().take(n_pre).enumerate() {
        let frame = if k < cfg.preroll_frames as usize {
            render(first_state, Camera::Ego, cfg).0
        } else {
            marker.clone()
        };
        ego.push(frame.with_timestamp(t));
        commands.push(pose_row(t, first_state));
    }
    let mut idx = n_pre;
    let mut spans = Vec::with_capacity(n_episodes);
    for (e, states) in episodes_states.iter().enumerate() {
        let first_t = ego_ts[idx];
        for s in states {
            let t = ego_ts[idx];
            ego.push(render(s, Camera::Ego, cfg).0.with_timestamp(t));
            commands.push(pose_row(t, s));
            idx += 1;
        }
        spans.push(EpisodeSpan {
            episode_id: format!("ep{e:03}"),
            start_ns: first_t,
            end_ns: ego_ts[idx - 1],
        });
    }

    let mut noise_rng = stream_rng(cfg.seed, STREAM_POSE_NOISE);
    let nxy = Normal::new(0.0, cfg.pose_noise_xy_m).expect("finite std");
    let nth = Normal::new(0.0, cfg.pose_noise_theta_rad).expect("finite std");
    let poses = commands
        .iter()
        .map(|c| PoseRow {
            t_ns: c.t_ns,
            pose: Pose2::new(
                c.pose.x + nxy.sample(&mut noise_rng),
                c.pose.y + nxy.sample(&mut noise_rng),
                c.pose.theta + nth.sample(&mut noise_rng),
            ),
            gripper_width: c.gripper_width,
        })
        .collect();

    // Continuous third-person stream.
    let mut third = Vec::with_capacity(third_ts.len());
    let mut masks = Vec::with_capacity(third_ts.len());
    for &t in &third_ts {
        let (frame, mask) = match phase_at(t as f64, &starts, &episodes_states, ego_dt) {
            Phase::Episode(s) => render(s, Camera::Third, cfg),
            Phase::Transition { from, to, alpha } => {
                render(&transition_state(from, to, alpha), Camera::Third, cfg)
            }
        };
        third.push(frame.with_timestamp(t));
        masks.push((t, mask));
    }

    let background = render::render_background(cfg);
    let prompts = default_prompts(
        cfg,
        &episodes_states[0][0],
        &third,
        &masks,
        spans[0].start_ns,
    );

    let events = SimEvents {
        session_start_ns: ego_ts[cfg.preroll_frames as usize],
        marker_frame_index: cfg.preroll_frames as usize,
        episode_lengths: episodes_states.iter().map(Vec::len).collect(),
    };
    Ok(SimulatedSession {
        session: Session {
            manifest,
            ego,
            third,
            background,
            poses,
            episodes: spans,
        },
        masks,
        commands,
        events,
        prompts,
        episode_states: episodes_states,
    })
}

/// Simulate and write a session directory.
pub fn generate_session(
    cfg: &SimConfig,
    embodiment: Embodiment,
    n_episodes: usize,
    dir: &Path,
) -> Result<SimEvents> {
    let sim = simulate_session(cfg, embodiment, n_episodes)?;
    session::write_session(dir, &sim.session)?;
    session::write_masks(&dir.join(MASKS_DIR), &sim.masks)?;
    write_commands(&dir.join(COMMANDS_FILE), &sim.commands)?;
    session::write_json(&dir.join(EVENTS_FILE), &sim.events)?;
    session::write_json(&dir.join(PROMPTS_FILE), &sim.prompts)?;
    Ok(sim.events)
}

pub fn write_commands(path: &Path, rows: &[PoseRow]) -> Result<()> {
    session::write_poses(path, rows)
}

pub fn read_commands(path: &Path) -> Result<Vec<PoseRow>> {
    session::read_poses(path)
}

pub fn read_events(dir: &Path) -> Result<SimEvents> {
    let path = dir.join(EVENTS_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed("sim events", e))
}

fn pose_row(t_ns: u64, s: &SceneState) -> PoseRow {
    PoseRow {
        t_ns,
        pose: s.gripper,
        gripper_width: s.gripper_width,
    }
}

/// Gaussian jitter clamped to ±`clamp`, which is below half an interval,
/// so timestamps stay strictly increasing.
fn jitter(nominal: &[f64], std: f64, clamp: f64, seed: u64, stream: u64) -> Vec<u64> {
    let mut rng = stream_rng(seed, stream);
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut out: Vec<u64> = Vec::with_capacity(nominal.len());
    for &t in nominal {
        let j = normal.sample(&mut rng).clamp(-clamp, clamp);
        let mut v = (t + j).round().max(0.0) as u64;
        if let Some(&prev) = out.last() {
            v = v.max(prev + 1);
        }
        out.push(v);
    }
    out
}

fn phase_at<'a>(t: f64, starts: &[f64], episodes: &'a [Vec<SceneState>], ego_dt: f64) -> Phase<'a> {
    if t < starts[0] {
        // Before the first episode the operator holds the initial pose.
        return Phase::Episode(&episodes[0][0]);
    }
    for (e, (&start, states)) in starts.iter().zip(episodes).enumerate() {
        let end = start + states.len() as f64 * ego_dt;
        if t < start {
            let prev = &episodes[e - 1];
            let prev_end = starts[e - 1] + prev.len() as f64 * ego_dt;
            let alpha = ((t - prev_end) / (start - prev_end)).clamp(0.0, 1.0);
            return Phase::Transition {
                from: prev.last().expect("non-empty"),
                to: &states[0],
                alpha,
            };
        }
        if t < end {
            let k = ((t - start) / ego_dt).floor() as usize;
            return Phase::Episode(&states[k.min(states.len() - 1)]);
        }
    }
    let last = episodes.last().expect("non-empty");
    Phase::Episode(last.last().expect("non-empty"))
}

/// Between episodes the scene is already reset and the operator walks and
/// moves the device from the previous final pose to the next initial pose.
fn transition_state(from: &SceneState, to: &SceneState, alpha: f64) -> SceneState {
    let mut s = to.clone();
    let dth = crate::types::normalize_angle(to.gripper.theta - from.gripper.theta);
    s.gripper = Pose2::new(
        from.gripper.x + alpha * (to.gripper.x - from.gripper.x),
        from.gripper.y + alpha * (to.gripper.y - from.gripper.y),
        from.gripper.theta + alpha * dth,
    );
    s.gripper_width = to.w_max;
    s.anchor = Pose2::new(
        from.anchor.x + alpha * (to.anchor.x - from.anchor.x),
        from.anchor.y + alpha * (to.anchor.y - from.anchor.y),
        to.anchor.theta,
    );
    s
}

/// Operator prompts for the first frame of the first episode: points on
/// the embodiment (positive) and on the gripper (negative).
fn default_prompts(
    cfg: &SimConfig,
    state: &SceneState,
    third: &[Frame],
    masks: &[(u64, Mask)],
    episode_start_ns: u64,
) -> PromptSet {
    let idx = crate::sync::nearest_index(
        &third.iter().map(|f| f.timestamp_ns).collect::<Vec<_>>(),
        episode_start_ns,
    );
    let mask = &masks[idx].1;
    let cam = Camera::Third;
    let joints = state.arm_joints();
    let mut positive = Vec::new();
    for seg in joints.windows(2) {
        let mid = [(seg[0][0] + seg[1][0]) / 2.0, (seg[0][1] + seg[1][1]) / 2.0];
        let (u, v) = cam.world_to_pixel_clamped(mid, state, cfg);
        let p = nearest_true(mask, u, v).unwrap_or((u, v));
        if !positive.contains(&p) {
            positive.push(p);
        }
    }
    let g = cam.world_to_pixel_clamped([state.gripper.x, state.gripper.y], state, cfg);
    PromptSet {
        positive_points: positive,
        negative_points: vec![g],
        source_frame_ts: third[idx].timestamp_ns,
    }
}

fn nearest_true(mask: &Mask, u: u32, v: u32) -> Option<(u32, u32)> {
    let mut best: Option<((u32, u32), u64)> = None;
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            if mask.get(x, y) {
                let d = (x as i64 - u as i64).pow(2) as u64 + (y as i64 - v as i64).pow(2) as u64;
                if best.is_none_or(|(_, bd)| d < bd) {
                    best = Some(((x, y), d));
                }
            }
        }
    }
    best.map(|(p, _)| p)
}

/// Background reference: the static scene with nothing dynamic in it.
pub fn background_frame(cfg: &SimConfig) -> Frame {
    render::render_background(cfg)
}

pub fn third_role(embodiment: Embodiment) -> ViewRole {
    embodiment.third_role()
}

#[cfg(test)]
mod tests;
