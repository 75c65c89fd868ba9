//! Five-arm ablation, multi-view versus ego-only comparison, saliency study
//! and throughput measurement, all run in memory.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{random_controller, rollout, saliency_fraction, DeployMode, RolloutResult};
use crate::error::{Error, Result};
use crate::inpaint::inpaint_frame;
use crate::policy::{
    samples_from, train, PolicyParams, Sample, TrainConfig, DEFAULT_HIDDEN, DEFAULT_HORIZON,
};
use crate::segment::{segment_stream, BgSubParams, SegmenterKind, SegmenterState};
use crate::sim::{simulate_session, SimConfig};
use crate::sync::assemble_episodes;
use crate::types::{Embodiment, EpisodeRecord, Frame, Mask};

/// Episodes used for the chance-level reference.
pub const RANDOM_EPISODES: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Scene settings of the context task; `seed` is replaced per run.
    pub sim: SimConfig,
    pub train_episodes: usize,
    /// Longest simulated session; training data is split into several.
    pub session_episodes: usize,
    pub eval_episodes: usize,
    pub segmenter: SegmenterKind,
    pub iters: usize,
    pub lr: f64,
    pub p0: f64,
    /// Dropout decay rate; `None` means `5 / iters`.
    pub lambda: Option<f64>,
    pub hidden: usize,
    pub horizon: usize,
    /// Container count of the negative-control task, if run.
    pub control_n_containers: Option<u32>,
    /// Upper bound on third frames fed to the saliency measurement.
    pub saliency_frames: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            sim: SimConfig::default(),
            train_episodes: 200,
            session_episodes: 50,
            eval_episodes: 50,
            segmenter: SegmenterKind::Bgsub,
            iters: 20_000,
            lr: 3e-4,
            p0: 0.5,
            lambda: None,
            hidden: DEFAULT_HIDDEN,
            horizon: DEFAULT_HORIZON,
            control_n_containers: Some(1),
            saliency_frames: 200,
        }
    }
}

impl AblationConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: AblationConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        if self.train_episodes == 0
            || self.session_episodes == 0
            || self.eval_episodes == 0
            || self.iters == 0
        {
            return Err(Error::InvalidConfig(
                "episode and iteration counts must be positive".into(),
            ));
        }
        if self.hidden == 0 || self.horizon == 0 || self.saliency_frames == 0 {
            return Err(Error::InvalidConfig(
                "hidden, horizon and saliency_frames must be positive".into(),
            ));
        }
        if self.train_episodes.div_ceil(self.session_episodes) as u64 > SESSION_STRIDE {
            return Err(Error::InvalidConfig(format!(
                "at most {SESSION_STRIDE} training sessions per seed"
            )));
        }
        if self.control_n_containers == Some(0) {
            return Err(Error::InvalidConfig(
                "control_n_containers must be at least 1".into(),
            ));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64, ego_only: bool) -> TrainConfig {
        TrainConfig {
            p0: self.p0,
            lambda: self.lambda.unwrap_or(5.0 / self.iters as f64),
            iters: self.iters,
            lr: self.lr,
            seed,
            hidden: self.hidden,
            horizon: self.horizon,
            ego_only,
            w_max: self.sim.w_max_m,
        }
    }

    fn sim_for(&self, seed: u64, n_containers: Option<u32>) -> SimConfig {
        let mut sim = self.sim.clone();
        sim.seed = seed;
        if let Some(n) = n_containers {
            sim.n_containers = n;
        }
        sim
    }
}

/// The five ablation arms, in table order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Full,
    NoHumanSeg,
    NoThirdPerson,
    NoRobotInpaint,
    NoRobotSeg,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::Full,
        Arm::NoHumanSeg,
        Arm::NoThirdPerson,
        Arm::NoRobotInpaint,
        Arm::NoRobotSeg,
    ];

    pub fn letter(self) -> char {
        match self {
            Arm::Full => 'a',
            Arm::NoHumanSeg => 'b',
            Arm::NoThirdPerson => 'c',
            Arm::NoRobotInpaint => 'd',
            Arm::NoRobotSeg => 'e',
        }
    }

    pub fn deploy_mode(self) -> DeployMode {
        match self {
            Arm::Full => DeployMode::Inpaint,
            Arm::NoRobotInpaint => DeployMode::MaskNoFill,
            Arm::NoHumanSeg | Arm::NoThirdPerson | Arm::NoRobotSeg => DeployMode::Raw,
        }
    }
}

/// Sessions a seed's training data is split into are seeded
/// `seed * SESSION_STRIDE + k`.
pub const SESSION_STRIDE: u64 = 1000;

/// Training samples of one seed, with and without embodiment removal, plus
/// raw third frames and ground-truth embodiment masks for saliency.
pub struct PreparedData {
    pub inpainted: Vec<Sample>,
    pub raw: Vec<Sample>,
    pub saliency_frames: Vec<(Frame, Frame, Mask)>,
    pub episodes: usize,
    pub mean_iou: f64,
    /// Third frames pushed through segment + inpaint, and the wall time it took.
    pub processed_frames: usize,
    pub process_seconds: f64,
}

/// Episodes of one simulated HUMAN session after embodiment removal.
pub struct SessionData {
    pub records: Vec<EpisodeRecord>,
    pub third_raw: Vec<Vec<Frame>>,
    pub gt_masks: HashMap<u64, Mask>,
    pub mean_iou: f64,
    pub processed_frames: usize,
    pub process_seconds: f64,
}

/// Simulate a HUMAN session, remove the embodiment and assemble episodes.
pub fn process_session(
    sim: &SimConfig,
    n_episodes: usize,
    kind: SegmenterKind,
) -> Result<SessionData> {
    let simulated = simulate_session(sim, Embodiment::Human, n_episodes)?;
    let session = &simulated.session;
    let start = Instant::now();
    let state = match kind {
        SegmenterKind::Oracle => SegmenterState::oracle(simulated.masks.iter().cloned()),
        SegmenterKind::Bgsub => {
            SegmenterState::bgsub(session.background.clone(), BgSubParams::default())?
        }
    };
    let (masks, _) = segment_stream(&session.third, state, Some(&simulated.prompts))?;
    let mut inpainted = HashMap::with_capacity(masks.len());
    for (f, m) in session.third.iter().zip(&masks) {
        inpainted.insert(f.timestamp_ns, inpaint_frame(f, m, &session.background, 0)?);
    }
    let process_seconds = start.elapsed().as_secs_f64();
    let mean_iou = simulated
        .masks
        .iter()
        .zip(&masks)
        .map(|((_, gt), m)| gt.iou(m))
        .sum::<f64>()
        / masks.len() as f64;
    let built = assemble_episodes(session, |f| {
        inpainted
            .get(&f.timestamp_ns)
            .cloned()
            .ok_or(Error::MissingProcessedFrame(f.timestamp_ns))
    })?;
    Ok(SessionData {
        records: built.records,
        third_raw: built.third_raw,
        gt_masks: simulated.masks.into_iter().collect(),
        mean_iou,
        processed_frames: masks.len(),
        process_seconds,
    })
}

impl SessionData {
    /// Evenly spaced (ego, raw third, embodiment mask) triples with a
    /// non-empty mask, at most `limit` of them.
    pub fn saliency_frames(&self, limit: usize) -> Vec<(Frame, Frame, Mask)> {
        let all: Vec<(&Frame, &Frame, &Mask)> = self
            .records
            .iter()
            .zip(&self.third_raw)
            .flat_map(|(rec, raws)| rec.steps.iter().zip(raws))
            .filter_map(|(step, raw)| {
                let m = self.gt_masks.get(&raw.timestamp_ns)?;
                (!m.is_empty()).then_some((&step.ego, raw, m))
            })
            .collect();
        let stride = all.len().div_ceil(limit.max(1)).max(1);
        all.iter()
            .step_by(stride)
            .map(|(e, t, m)| ((*e).clone(), (*t).clone(), (*m).clone()))
            .collect()
    }
}

/// All training data of one seed, simulated as sessions of at most
/// `cfg.session_episodes` episodes so full-resolution frames never pile up.
pub fn prepare_data(
    cfg: &AblationConfig,
    seed: u64,
    n_containers: Option<u32>,
) -> Result<PreparedData> {
    let n_sessions = cfg.train_episodes.div_ceil(cfg.session_episodes);
    let mut out = PreparedData {
        inpainted: Vec::new(),
        raw: Vec::new(),
        saliency_frames: Vec::new(),
        episodes: 0,
        mean_iou: 0.0,
        processed_frames: 0,
        process_seconds: 0.0,
    };
    let mut iou_sum = 0.0;
    for k in 0..n_sessions {
        let n = cfg.session_episodes.min(cfg.train_episodes - out.episodes);
        let sim = cfg.sim_for(seed * SESSION_STRIDE + k as u64, n_containers);
        let data = process_session(&sim, n, cfg.segmenter)?;
        out.inpainted
            .extend(samples_from(&data.records, None, cfg.horizon));
        out.raw.extend(samples_from(
            &data.records,
            Some(&data.third_raw),
            cfg.horizon,
        ));
        out.saliency_frames
            .extend(data.saliency_frames(cfg.saliency_frames.div_ceil(n_sessions)));
        out.episodes += data.records.len();
        iou_sum += data.mean_iou * data.processed_frames as f64;
        out.processed_frames += data.processed_frames;
        out.process_seconds += data.process_seconds;
    }
    out.saliency_frames.truncate(cfg.saliency_frames);
    out.mean_iou = iou_sum / out.processed_frames.max(1) as f64;
    Ok(out)
}

/// Success and pick rates of one arm under one training seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub result: RolloutResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRun {
    pub seed: u64,
    pub n_containers: u32,
    pub mv: RolloutResult,
    pub ego_only: RolloutResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRun {
    pub seed: u64,
    pub raw_trained: f64,
    pub inpaint_trained: f64,
}

/// Everything `ablate` measured, before aggregation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRuns {
    pub task_id: String,
    pub n_containers: u32,
    pub seeds: Vec<u64>,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub arms: Vec<ArmRun>,
    pub controls: Vec<ControlRun>,
    pub saliency: Vec<SaliencyRun>,
    pub segmenter_iou: Vec<f64>,
    pub random_success_rate: f64,
    pub processed_frames: usize,
    /// Wall-clock measurement; the only field that is not a function of the seeds.
    pub process_seconds: f64,
}

/// The three policies every ablation seed trains.
pub struct SeedPolicies {
    pub inpainted: PolicyParams,
    pub raw: PolicyParams,
    pub ego_only: PolicyParams,
}

pub fn train_seed_policies(
    cfg: &AblationConfig,
    data: &PreparedData,
    seed: u64,
) -> Result<SeedPolicies> {
    Ok(SeedPolicies {
        inpainted: train(&data.inpainted, &cfg.train_config(seed, false))?.params,
        raw: train(&data.raw, &cfg.train_config(seed, false))?.params,
        ego_only: train(&data.inpainted, &cfg.train_config(seed, true))?.params,
    })
}

/// Saliency fractions of the raw-trained and inpaint-trained policies on the
/// same raw HUMAN frames.
pub fn saliency_pair(
    policies: &SeedPolicies,
    data: &PreparedData,
    seed: u64,
) -> Result<SaliencyRun> {
    Ok(SaliencyRun {
        seed,
        raw_trained: saliency_fraction(&policies.raw, &data.saliency_frames)?,
        inpaint_trained: saliency_fraction(&policies.inpainted, &data.saliency_frames)?,
    })
}

/// Train and evaluate every arm for every seed. `progress` receives one
/// line per finished stage.
pub fn ablate(
    cfg: &AblationConfig,
    seeds: &[u64],
    mut progress: impl FnMut(&str),
) -> Result<AblationRuns> {
    cfg.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("at least one seed is required".into()));
    }
    let mut arms = Vec::new();
    let mut controls = Vec::new();
    let mut saliency = Vec::new();
    let mut ious = Vec::new();
    let (mut frames, mut seconds) = (0, 0.0);
    for &seed in seeds {
        let data = prepare_data(cfg, seed, None)?;
        frames += data.processed_frames;
        seconds += data.process_seconds;
        ious.push(data.mean_iou);
        progress(&format!(
            "seed {seed}: {} episodes, segmenter IoU {:.4}",
            data.episodes, data.mean_iou
        ));
        let mut policies = train_seed_policies(cfg, &data, seed)?;
        progress(&format!("seed {seed}: trained"));
        saliency.push(saliency_pair(&policies, &data, seed)?);
        drop(data);
        let eval_sim = cfg.sim_for(seed, None);
        for arm in Arm::ALL {
            let params = match arm {
                Arm::NoHumanSeg => &mut policies.raw,
                Arm::NoThirdPerson => &mut policies.ego_only,
                _ => &mut policies.inpainted,
            };
            let result = rollout(
                params,
                &eval_sim,
                arm.deploy_mode(),
                cfg.segmenter,
                cfg.eval_episodes,
                seed,
            )?;
            progress(&format!(
                "seed {seed}: arm {} success {:.3}",
                arm.letter(),
                result.success_rate
            ));
            arms.push(ArmRun { arm, seed, result });
        }
        if let Some(n) = cfg.control_n_containers {
            let sim = cfg.sim_for(seed, Some(n));
            let samples = prepare_data(cfg, seed, Some(n))?.inpainted;
            let mut mv = train(&samples, &cfg.train_config(seed, false))?.params;
            let mut ego = train(&samples, &cfg.train_config(seed, true))?.params;
            let mv = rollout(
                &mut mv,
                &sim,
                DeployMode::Inpaint,
                cfg.segmenter,
                cfg.eval_episodes,
                seed,
            )?;
            let ego_only = rollout(
                &mut ego,
                &sim,
                DeployMode::Raw,
                cfg.segmenter,
                cfg.eval_episodes,
                seed,
            )?;
            progress(&format!(
                "seed {seed}: control mv {:.3} ego {:.3}",
                mv.success_rate, ego_only.success_rate
            ));
            controls.push(ControlRun {
                seed,
                n_containers: n,
                mv,
                ego_only,
            });
        }
    }
    let mut random = random_controller(seeds[0], cfg.sim.w_max_m);
    let random_success_rate = rollout(
        &mut random,
        &cfg.sim,
        DeployMode::Raw,
        cfg.segmenter,
        RANDOM_EPISODES,
        seeds[0],
    )?
    .success_rate;
    Ok(AblationRuns {
        task_id: cfg.sim.task_id.id().to_string(),
        n_containers: cfg.sim.n_containers,
        seeds: seeds.to_vec(),
        train_episodes: cfg.train_episodes,
        eval_episodes: cfg.eval_episodes,
        arms,
        controls,
        saliency,
        segmenter_iou: ious,
        random_success_rate,
        processed_frames: frames,
        process_seconds: seconds,
    })
}
