//! Closed-loop evaluation on the robot embodiment, the five-arm ablation,
//! the multi-view versus ego-only comparison and gradient saliency.

pub mod ablate;
pub mod report;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inpaint::inpaint_frame;
use crate::policy::{downsample, PolicyParams, GRID, VIEW_DIM};
use crate::segment::{BgSubParams, PromptSet, SegmenterKind, SegmenterState};
use crate::sim::{
    self, expert_rollout, expert_step, render, success, Camera, SceneState, SimConfig, MAX_STEP_M,
    MAX_STEP_RAD,
};
use crate::types::{ActionLabel, Embodiment, Frame, Mask, Pose2};

/// How the deployed third view is processed before it reaches the policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeployMode {
    Inpaint,
    Raw,
    MaskNoFill,
}

impl std::str::FromStr for DeployMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inpaint" => Ok(DeployMode::Inpaint),
            "raw" => Ok(DeployMode::Raw),
            "mask-no-fill" => Ok(DeployMode::MaskNoFill),
            _ => Err(Error::malformed("deploy mode", s)),
        }
    }
}

/// Anything that maps observations to the next relative action.
pub trait Controller {
    fn act(&mut self, ego: &Frame, third: &Frame, state: &SceneState) -> ActionLabel;
}

impl Controller for PolicyParams {
    fn act(&mut self, ego: &Frame, third: &Frame, _state: &SceneState) -> ActionLabel {
        self.infer(ego, third)[0]
    }
}

/// Scripted expert reading the true state; ignores the images.
pub struct ExpertController;

impl Controller for ExpertController {
    fn act(&mut self, _ego: &Frame, _third: &Frame, state: &SceneState) -> ActionLabel {
        expert_step(state)
    }
}

/// Uniformly random actions within the per-step limits.
pub struct RandomController {
    pub rng: ChaCha8Rng,
    pub w_max: f64,
}

impl Controller for RandomController {
    fn act(&mut self, _ego: &Frame, _third: &Frame, _state: &SceneState) -> ActionLabel {
        ActionLabel {
            pose: Pose2::new(
                self.rng.random_range(-MAX_STEP_M..MAX_STEP_M),
                self.rng.random_range(-MAX_STEP_M..MAX_STEP_M),
                self.rng.random_range(-MAX_STEP_RAD..MAX_STEP_RAD),
            ),
            gripper_width: self.rng.random_range(0.0..self.w_max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub episode: usize,
    pub success: bool,
    /// The object was grasped at some point.
    pub picked: bool,
    pub steps: usize,
    pub budget: usize,
    pub fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub success_rate: f64,
    pub pick_rate: f64,
    pub fallbacks: usize,
    pub episodes: Vec<EpisodeTrace>,
}

/// Operator prompts for a robot scene, taken from ground truth.
pub fn scene_prompts(state: &SceneState, cfg: &SimConfig) -> PromptSet {
    let (_, mask) = render(state, Camera::Third, cfg);
    let cam = Camera::Third;
    let joints = state.arm_joints();
    let mut positive = Vec::new();
    for seg in joints.windows(2) {
        let mid = [(seg[0][0] + seg[1][0]) / 2.0, (seg[0][1] + seg[1][1]) / 2.0];
        let (u, v) = cam.world_to_pixel_clamped(mid, state, cfg);
        if mask.get(u, v) && !positive.contains(&(u, v)) {
            positive.push((u, v));
        }
    }
    if positive.is_empty() {
        if let Some(i) = mask.bits().iter().position(|&b| b) {
            positive.push((i as u32 % mask.width(), i as u32 / mask.width()));
        }
    }
    let g = cam.world_to_pixel_clamped([state.gripper.x, state.gripper.y], state, cfg);
    PromptSet {
        positive_points: positive,
        negative_points: vec![g],
        source_frame_ts: 0,
    }
}

/// Per-episode third-view processor for deployment.
struct ThirdProcessor {
    mode: DeployMode,
    kind: SegmenterKind,
    background: Frame,
    segmenter: Option<SegmenterState>,
    fallbacks: usize,
}

impl ThirdProcessor {
    fn new(mode: DeployMode, kind: SegmenterKind, cfg: &SimConfig) -> Self {
        ThirdProcessor {
            mode,
            kind,
            background: sim::background_frame(cfg),
            segmenter: None,
            fallbacks: 0,
        }
    }

    fn process(
        &mut self,
        frame: Frame,
        gt: &Mask,
        state: &SceneState,
        cfg: &SimConfig,
    ) -> Result<Frame> {
        if self.mode == DeployMode::Raw {
            return Ok(frame);
        }
        let mask = match self.kind {
            SegmenterKind::Oracle => gt.clone(),
            SegmenterKind::Bgsub => match &mut self.segmenter {
                None => {
                    let mut s =
                        SegmenterState::bgsub(self.background.clone(), BgSubParams::default())?;
                    let prompts = scene_prompts(state, cfg);
                    let m = if prompts.positive_points.is_empty() {
                        Mask::empty(frame.width(), frame.height())
                    } else {
                        s.segment_frame(&frame, Some(&prompts))?
                    };
                    self.segmenter = Some(s);
                    m
                }
                Some(s) => s.segment_frame(&frame, None)?,
            },
        };
        if mask.is_empty() {
            self.fallbacks += 1;
            return Ok(frame);
        }
        match self.mode {
            DeployMode::Inpaint => inpaint_frame(&frame, &mask, &self.background, 0),
            DeployMode::MaskNoFill => {
                let mut out = frame.with_role(crate::types::ViewRole::ThirdMasked);
                for (i, &m) in mask.bits().iter().enumerate() {
                    if m {
                        out.pixels_mut()[3 * i..3 * i + 3].fill(0);
                    }
                }
                Ok(out)
            }
            DeployMode::Raw => unreachable!("handled above"),
        }
    }
}

/// Stream seed for evaluation scenes, distinct from training sessions.
const EVAL_STREAM: u64 = 101;

/// Closed-loop rollouts on the robot embodiment. Only the first action of
/// each chunk is executed; each episode gets three times the expert's
/// step count.
pub fn rollout(
    controller: &mut dyn Controller,
    cfg: &SimConfig,
    mode: DeployMode,
    kind: SegmenterKind,
    n_episodes: usize,
    seed: u64,
) -> Result<RolloutResult> {
    rollout_with(
        controller,
        cfg,
        Embodiment::Robot,
        mode,
        kind,
        n_episodes,
        seed,
    )
}

/// `rollout` with an explicit deployment embodiment, for in-distribution checks.
pub fn rollout_with(
    controller: &mut dyn Controller,
    cfg: &SimConfig,
    embodiment: Embodiment,
    mode: DeployMode,
    kind: SegmenterKind,
    n_episodes: usize,
    seed: u64,
) -> Result<RolloutResult> {
    cfg.validate()?;
    let mut rng = sim::stream_rng(seed, EVAL_STREAM);
    let mut episodes = Vec::with_capacity(n_episodes);
    for e in 0..n_episodes {
        let init = SceneState::sample(cfg, embodiment, &mut rng)?;
        let budget = 3 * (expert_rollout(&init)?.len() - 1);
        let mut state = init;
        let mut proc = ThirdProcessor::new(mode, kind, cfg);
        let mut picked = false;
        let mut steps = 0;
        while !success(&state) && steps < budget {
            let (ego, _) = render(&state, Camera::Ego, cfg);
            let (third, gt) = render(&state, Camera::Third, cfg);
            let third = proc.process(third, &gt, &state, cfg)?;
            let action = controller.act(&ego, &third, &state);
            state.apply_relative(&action);
            picked |= state.held();
            steps += 1;
        }
        episodes.push(EpisodeTrace {
            episode: e,
            success: success(&state),
            picked,
            steps,
            budget,
            fallbacks: proc.fallbacks,
        });
    }
    let n = n_episodes.max(1) as f64;
    Ok(RolloutResult {
        success_rate: episodes.iter().filter(|t| t.success).count() as f64 / n,
        pick_rate: episodes.iter().filter(|t| t.picked).count() as f64 / n,
        fallbacks: episodes.iter().map(|t| t.fallbacks).sum(),
        episodes,
    })
}

/// Share of third-view input saliency inside the mask, averaged over
/// frames. Saliency is `|∂‖chunk‖² / ∂pixel|` through the analytic
/// backward pass, spread evenly over each downsampling cell.
pub fn saliency_fraction(params: &PolicyParams, frames: &[(Frame, Frame, Mask)]) -> Result<f64> {
    if frames.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    for (ego, third, mask) in frames {
        let x = params.features(&downsample(ego), &downsample(third));
        let act = params.forward(&x);
        let g_out: Vec<f64> = act.out.iter().map(|o| 2.0 * o).collect();
        let (_, g_x) = params.backward(&x, &act, &g_out);
        let g_third = &g_x[VIEW_DIM..];
        let (w, h) = mask.dims();
        let (mut inside, mut all) = (0.0, 0.0);
        for gy in 0..GRID {
            let (y0, y1) = (
                gy * h / GRID,
                ((gy + 1) * h / GRID).max(gy * h / GRID + 1).min(h),
            );
            for gx in 0..GRID {
                let (x0, x1) = (
                    gx * w / GRID,
                    ((gx + 1) * w / GRID).max(gx * w / GRID + 1).min(w),
                );
                let i = 3 * (gy * GRID + gx) as usize;
                let cell: f64 = g_third[i..i + 3].iter().map(|g| g.abs()).sum();
                let n = ((y1 - y0) * (x1 - x0)) as f64;
                let per_px = cell / n;
                for y in y0..y1 {
                    for x in x0..x1 {
                        all += per_px;
                        if mask.get(x, y) {
                            inside += per_px;
                        }
                    }
                }
            }
        }
        if all == 0.0 {
            return Err(Error::ZeroSaliency);
        }
        total += inside / all;
    }
    Ok(total / frames.len() as f64)
}

/// Seeded random controller for chance-level checks.
pub fn random_controller(seed: u64, w_max: f64) -> RandomController {
    RandomController {
        rng: ChaCha8Rng::seed_from_u64(seed),
        w_max,
    }
}
