//! Two-layer MLP behavioral-cloning policy over downsampled ego and third
//! views, trained by per-sample gradient descent with decayed viewpoint
//! dropout.
//!
//! Outputs are standardized per dimension; `out_mean`/`out_std` map them
//! back to an action chunk of `horizon` steps of `(dx, dy, dtheta, width)`,
//! each pose relative to the current gripper pose.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ActionLabel, EpisodeRecord, Frame, Pose2, ViewRole};

/// Side length of each downsampled view.
pub const GRID: u32 = 32;
pub const VIEW_DIM: usize = (GRID * GRID * 3) as usize;
pub const INPUT_DIM: usize = 2 * VIEW_DIM;
pub const DEFAULT_HIDDEN: usize = 128;
pub const DEFAULT_HORIZON: usize = 8;
/// Floors on the per-dimension target std, by channel `(dx, dy, dtheta,
/// width)`, on the scale of the per-step limits. A channel that only
/// carries pose-log noise is not blown up to unit variance.
const OUT_STD_FLOOR: [f64; 4] = [0.005, 0.005, 0.05, 0.005];
/// Floor on the per-input std used to whiten inputs during training.
const INPUT_STD_FLOOR: f64 = 0.2;
const BLOB_MAGIC: &[u8; 4] = b"MVPL";
pub const BLOB_VERSION: u32 = 1;
pub const LOSS_TRACE_HEADER: [&str; 4] = ["iter", "loss", "p", "patched_view"];

/// `p0 · e^(−λt)`.
pub fn schedule_p(p0: f64, lambda: f64, t: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p0) {
        return Err(Error::Domain(format!("p0 = {p0}")));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Domain(format!("lambda = {lambda}")));
    }
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("t = {t}")));
    }
    Ok(p0 * (-lambda * t).exp())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutSchedule {
    pub p0: f64,
    pub lambda: f64,
    pub t: usize,
    pub p: f64,
}

impl DropoutSchedule {
    pub fn new(p0: f64, lambda: f64) -> Result<Self> {
        let p = schedule_p(p0, lambda, 0.0)?;
        Ok(DropoutSchedule {
            p0,
            lambda,
            t: 0,
            p,
        })
    }

    pub fn advance(&mut self) {
        self.t += 1;
        self.p = self.p0 * (-self.lambda * self.t as f64).exp();
    }
}

/// Box-average a frame down to `GRID × GRID`.
pub fn downsample(frame: &Frame) -> Frame {
    let (w, h) = frame.dims();
    let g = GRID;
    let mut out = Frame::filled(frame.timestamp_ns, g, g, [0; 3], frame.role);
    for gy in 0..g {
        let (y0, y1) = (gy * h / g, ((gy + 1) * h / g).max(gy * h / g + 1));
        for gx in 0..g {
            let (x0, x1) = (gx * w / g, ((gx + 1) * w / g).max(gx * w / g + 1));
            let mut acc = [0u32; 3];
            for y in y0..y1.min(h) {
                for x in x0..x1.min(w) {
                    let p = frame.get(x, y);
                    for c in 0..3 {
                        acc[c] += u32::from(p[c]);
                    }
                }
            }
            let n = (y1.min(h) - y0) * (x1.min(w) - x0);
            out.set(gx, gy, acc.map(|a| ((a + n / 2) / n) as u8));
        }
    }
    out
}

/// Overlay 1 to 3 rectangles, each covering 10–60% of the frame, filled
/// with per-pixel uniform RGB noise.
pub fn apply_noise_patch(frame: &Frame, rng: &mut impl Rng) -> Frame {
    let mut out = frame.clone();
    let (w, h) = frame.dims();
    let area = w as u64 * h as u64;
    let k = rng.random_range(1..=3);
    for _ in 0..k {
        let (mut pw, mut ph);
        let mut tries = 0;
        loop {
            pw = rng.random_range(1..=w);
            ph = rng.random_range(1..=h);
            let a = pw as u64 * ph as u64;
            tries += 1;
            if (a * 10 >= area && a * 10 <= area * 6) || tries > 10_000 {
                break;
            }
        }
        let x0 = rng.random_range(0..=w - pw);
        let y0 = rng.random_range(0..=h - ph);
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                out.set(x, y, [rng.random(), rng.random(), rng.random()]);
            }
        }
    }
    out
}

/// Which view receives noise patches in an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PatchedView {
    None,
    Ego,
    Third,
}

impl PatchedView {
    pub fn as_str(self) -> &'static str {
        match self {
            PatchedView::None => "none",
            PatchedView::Ego => "ego",
            PatchedView::Third => "third",
        }
    }
}

/// One training example: downsampled views and a raw action-chunk target.
#[derive(Debug, Clone)]
pub struct Sample {
    pub ego: Frame,
    pub third: Frame,
    pub target: Vec<f64>,
}

/// Chunk targets for every step of an episode: for `k = 1..=horizon`, the
/// pose at `t + k` relative to the pose at `t` and the width at `t + k`,
/// holding the last step past the end.
pub fn chunk_targets(record: &EpisodeRecord, horizon: usize) -> Vec<Vec<f64>> {
    let n = record.steps.len();
    (0..n)
        .map(|t| {
            let cur = record.steps[t].action.pose;
            let mut v = Vec::with_capacity(4 * horizon);
            for k in 1..=horizon {
                let a = record.steps[(t + k).min(n - 1)].action;
                let rel = cur.between(&a.pose);
                v.extend_from_slice(&[rel.x, rel.y, rel.theta, a.gripper_width]);
            }
            v
        })
        .collect()
}

/// Training samples from episodes; `third_override` replaces the third
/// stream (e.g. with raw frames) step by step.
pub fn samples_from(
    records: &[EpisodeRecord],
    third_override: Option<&[Vec<Frame>]>,
    horizon: usize,
) -> Vec<Sample> {
    let mut out = Vec::new();
    for (e, rec) in records.iter().enumerate() {
        let targets = chunk_targets(rec, horizon);
        for (t, (step, target)) in rec.steps.iter().zip(targets).enumerate() {
            let third = match third_override {
                Some(o) => &o[e][t],
                None => &step.third,
            };
            out.push(Sample {
                ego: downsample(&step.ego),
                third: downsample(third),
                target,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub p0: f64,
    pub lambda: f64,
    pub iters: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub horizon: usize,
    /// Zero the third view at train and deploy time.
    pub ego_only: bool,
    pub w_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let iters = 20_000;
        TrainConfig {
            p0: 0.5,
            lambda: 5.0 / iters as f64,
            iters,
            lr: 3e-4,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
            horizon: DEFAULT_HORIZON,
            ego_only: false,
            w_max: crate::types::DEFAULT_W_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub hidden: usize,
    pub horizon: usize,
    pub ego_only: bool,
    pub w_max: f64,
    pub input_mean: Vec<f64>,
    pub out_mean: Vec<f64>,
    pub out_std: Vec<f64>,
    /// `hidden × INPUT_DIM`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `out_dim × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Forward-pass intermediates needed by the backward pass.
pub struct Activations {
    pub hidden: Vec<f64>,
    pub out: Vec<f64>,
}

/// Parameter gradients, laid out like `PolicyParams`.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl PolicyParams {
    pub fn out_dim(&self) -> usize {
        4 * self.horizon
    }

    /// Random initialization with identity normalization.
    pub fn init(hidden: usize, horizon: usize, rng: &mut impl Rng) -> Self {
        let out_dim = 4 * horizon;
        let n1 = Normal::new(0.0, 0.1 / (INPUT_DIM as f64).sqrt()).expect("finite");
        let n2 = Normal::new(0.0, 1.0 / (hidden as f64).sqrt()).expect("finite");
        PolicyParams {
            hidden,
            horizon,
            ego_only: false,
            w_max: crate::types::DEFAULT_W_MAX,
            input_mean: vec![0.0; INPUT_DIM],
            out_mean: vec![0.0; out_dim],
            out_std: vec![1.0; out_dim],
            w1: (0..hidden * INPUT_DIM).map(|_| n1.sample(rng)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..out_dim * hidden).map(|_| n2.sample(rng)).collect(),
            b2: vec![0.0; out_dim],
        }
    }

    pub fn zeros(hidden: usize, horizon: usize) -> Self {
        let out_dim = 4 * horizon;
        PolicyParams {
            hidden,
            horizon,
            ego_only: false,
            w_max: crate::types::DEFAULT_W_MAX,
            input_mean: vec![0.0; INPUT_DIM],
            out_mean: vec![0.0; out_dim],
            out_std: vec![1.0; out_dim],
            w1: vec![0.0; hidden * INPUT_DIM],
            b1: vec![0.0; hidden],
            w2: vec![0.0; out_dim * hidden],
            b2: vec![0.0; out_dim],
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            &self.input_mean,
            &self.out_mean,
            &self.out_std,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
        .iter()
        .all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Centered input vector from two downsampled views.
    pub fn features(&self, ego: &Frame, third: &Frame) -> Vec<f64> {
        let mut x = Vec::with_capacity(INPUT_DIM);
        x.extend(ego.pixels().iter().map(|&p| p as f64 / 255.0));
        if self.ego_only {
            x.extend(std::iter::repeat_n(0.0, VIEW_DIM));
        } else {
            x.extend(third.pixels().iter().map(|&p| p as f64 / 255.0));
        }
        for (xi, m) in x.iter_mut().zip(&self.input_mean) {
            *xi -= m;
        }
        x
    }

    /// Standardized output for a centered input.
    pub fn forward(&self, x: &[f64]) -> Activations {
        let hidden: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * INPUT_DIM..(j + 1) * INPUT_DIM];
                (dot(row, x) + self.b1[j]).tanh()
            })
            .collect();
        let out = (0..self.out_dim())
            .map(|k| dot(&self.w2[k * self.hidden..(k + 1) * self.hidden], &hidden) + self.b2[k])
            .collect();
        Activations { hidden, out }
    }

    pub fn standardize(&self, target: &[f64]) -> Vec<f64> {
        target
            .iter()
            .zip(self.out_mean.iter().zip(&self.out_std))
            .map(|(y, (m, s))| (y - m) / s)
            .collect()
    }

    /// Gradient of `Σ_k g_out[k] · out[k]` with respect to the parameters.
    /// Also returns the gradient with respect to the input.
    pub fn backward(&self, x: &[f64], act: &Activations, g_out: &[f64]) -> (Gradients, Vec<f64>) {
        let out_dim = self.out_dim();
        let mut g = Gradients {
            w1: vec![0.0; self.w1.len()],
            b1: vec![0.0; self.hidden],
            w2: vec![0.0; self.w2.len()],
            b2: g_out.to_vec(),
        };
        let mut g_h = vec![0.0; self.hidden];
        for k in 0..out_dim {
            for j in 0..self.hidden {
                g.w2[k * self.hidden + j] = g_out[k] * act.hidden[j];
                g_h[j] += g_out[k] * self.w2[k * self.hidden + j];
            }
        }
        let mut g_x = vec![0.0; INPUT_DIM];
        for j in 0..self.hidden {
            let g_pre = g_h[j] * (1.0 - act.hidden[j] * act.hidden[j]);
            g.b1[j] = g_pre;
            let row = &mut g.w1[j * INPUT_DIM..(j + 1) * INPUT_DIM];
            for (gw, xi) in row.iter_mut().zip(x) {
                *gw = g_pre * xi;
            }
            for (gx, w) in g_x
                .iter_mut()
                .zip(&self.w1[j * INPUT_DIM..(j + 1) * INPUT_DIM])
            {
                *gx += g_pre * w;
            }
        }
        (g, g_x)
    }

    /// Action chunk for raw frames; widths clamped to `[0, w_max]`.
    pub fn infer(&self, ego: &Frame, third: &Frame) -> Vec<ActionLabel> {
        let x = self.features(&downsample(ego), &downsample(third));
        self.chunk_from_output(&self.forward(&x).out)
    }

    pub fn chunk_from_output(&self, out: &[f64]) -> Vec<ActionLabel> {
        let y: Vec<f64> = out
            .iter()
            .zip(self.out_mean.iter().zip(&self.out_std))
            .map(|(o, (m, s))| o * s + m)
            .collect();
        y.chunks_exact(4)
            .map(|c| ActionLabel {
                pose: Pose2::new(c[0], c[1], c[2]),
                gripper_width: c[3].clamp(0.0, self.w_max),
            })
            .collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators keep the sum order fixed and let the compiler vectorize.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// Squared error of the whole chunk, averaged over the `n` samples of a
/// batch of (centered input, standardized target) pairs.
pub fn batch_loss(params: &PolicyParams, batch: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let n = batch.len() as f64;
    batch
        .iter()
        .map(|(x, y)| {
            let out = params.forward(x).out;
            out.iter().zip(y).map(|(o, t)| (o - t).powi(2)).sum::<f64>()
        })
        .sum::<f64>()
        / n
}

/// Analytic gradient of `batch_loss`.
pub fn batch_gradient(params: &PolicyParams, batch: &[(Vec<f64>, Vec<f64>)]) -> Gradients {
    let n = batch.len() as f64;
    let mut total: Option<Gradients> = None;
    for (x, y) in batch {
        let act = params.forward(x);
        let g_out: Vec<f64> = act
            .out
            .iter()
            .zip(y)
            .map(|(o, t)| 2.0 * (o - t) / n)
            .collect();
        let (g, _) = params.backward(x, &act, &g_out);
        total = Some(match total {
            None => g,
            Some(mut acc) => {
                for (a, b) in [
                    (&mut acc.w1, &g.w1),
                    (&mut acc.b1, &g.b1),
                    (&mut acc.w2, &g.w2),
                    (&mut acc.b2, &g.b2),
                ] {
                    for (ai, bi) in a.iter_mut().zip(b) {
                        *ai += bi;
                    }
                }
                acc
            }
        });
    }
    total.expect("non-empty batch")
}

/// Parameter slot addressed by the gradient check.
#[derive(Debug, Clone, Copy)]
enum Slot {
    W1(usize),
    B1(usize),
    W2(usize),
    B2(usize),
}

fn slot_mut(p: &mut PolicyParams, s: Slot) -> &mut f64 {
    match s {
        Slot::W1(i) => &mut p.w1[i],
        Slot::B1(i) => &mut p.b1[i],
        Slot::W2(i) => &mut p.w2[i],
        Slot::B2(i) => &mut p.b2[i],
    }
}

fn slot_grad(g: &Gradients, s: Slot) -> f64 {
    match s {
        Slot::W1(i) => g.w1[i],
        Slot::B1(i) => g.b1[i],
        Slot::W2(i) => g.w2[i],
        Slot::B2(i) => g.b2[i],
    }
}

/// Max relative error between analytic and central-difference gradients
/// (step 1e-5) over `n_params` parameters drawn across all four tensors.
pub fn grad_check(
    params: &PolicyParams,
    batch: &[(Vec<f64>, Vec<f64>)],
    n_params: usize,
    seed: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let h = 1e-5;
    let analytic = batch_gradient(params, batch);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = params.clone();
    let mut worst: f64 = 0.0;
    for i in 0..n_params {
        let slot = match i % 4 {
            0 => Slot::W1(rng.random_range(0..p.w1.len())),
            1 => Slot::B1(rng.random_range(0..p.b1.len())),
            2 => Slot::W2(rng.random_range(0..p.w2.len())),
            _ => Slot::B2(rng.random_range(0..p.b2.len())),
        };
        let orig = *slot_mut(&mut p, slot);
        *slot_mut(&mut p, slot) = orig + h;
        let lp = batch_loss(&p, batch);
        *slot_mut(&mut p, slot) = orig - h;
        let lm = batch_loss(&p, batch);
        *slot_mut(&mut p, slot) = orig;
        let numeric = (lp - lm) / (2.0 * h);
        let a = slot_grad(&analytic, slot);
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub loss: f64,
    pub p: f64,
    pub patched_view: PatchedView,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub trace: Vec<TraceRow>,
}

impl TrainOutput {
    pub fn patched_iterations(&self) -> usize {
        self.trace
            .iter()
            .filter(|r| r.patched_view != PatchedView::None)
            .count()
    }
}

/// Per-sample gradient descent with scheduled viewpoint dropout.
pub fn train(samples: &[Sample], cfg: &TrainConfig) -> Result<TrainOutput> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut schedule = DropoutSchedule::new(cfg.p0, cfg.lambda)?;
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Domain(format!("lr = {}", cfg.lr)));
    }
    let out_dim = 4 * cfg.horizon;
    if samples.iter().any(|s| s.target.len() != out_dim) {
        return Err(Error::DimensionMismatch(
            "target length differs from 4 * horizon".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = PolicyParams::init(cfg.hidden, cfg.horizon, &mut rng);
    params.ego_only = cfg.ego_only;
    params.w_max = cfg.w_max;

    let n = samples.len() as f64;
    let mut mean = vec![0.0; INPUT_DIM];
    for s in samples {
        let x = params.features(&s.ego, &s.third);
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut scale = vec![0.0; INPUT_DIM];
    for s in samples {
        let x = params.features(&s.ego, &s.third);
        for ((v, xi), m) in scale.iter_mut().zip(x).zip(&mean) {
            *v += (xi - m).powi(2);
        }
    }
    // Inputs are trained at unit variance; `1 / std` is folded into `w1` at the end.
    scale
        .iter_mut()
        .for_each(|v| *v = 1.0 / (*v / n).sqrt().max(INPUT_STD_FLOOR));
    params.input_mean = mean;
    for k in 0..out_dim {
        let m = samples.iter().map(|s| s.target[k]).sum::<f64>() / n;
        let var = samples
            .iter()
            .map(|s| (s.target[k] - m).powi(2))
            .sum::<f64>()
            / n;
        params.out_mean[k] = m;
        params.out_std[k] = var.sqrt().max(OUT_STD_FLOOR[k % 4]);
    }

    let mut trace = Vec::with_capacity(cfg.iters);
    let mut g_h = vec![0.0; cfg.hidden];
    for it in 0..cfg.iters {
        let p = schedule.p;
        let s = &samples[rng.random_range(0..samples.len())];
        let patched = if rng.random::<f64>() < p {
            if rng.random::<bool>() {
                PatchedView::Ego
            } else {
                PatchedView::Third
            }
        } else {
            PatchedView::None
        };
        let x = match patched {
            PatchedView::None => params.features(&s.ego, &s.third),
            PatchedView::Ego => params.features(&apply_noise_patch(&s.ego, &mut rng), &s.third),
            PatchedView::Third => params.features(&s.ego, &apply_noise_patch(&s.third, &mut rng)),
        };
        let x: Vec<f64> = x.iter().zip(&scale).map(|(xi, k)| xi * k).collect();
        let y = params.standardize(&s.target);
        let act = params.forward(&x);
        let loss = act
            .out
            .iter()
            .zip(&y)
            .map(|(o, t)| (o - t).powi(2))
            .sum::<f64>();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss(it));
        }
        trace.push(TraceRow {
            iter: it,
            loss,
            p,
            patched_view: patched,
        });
        // Fused backward pass and update.
        let lr = cfg.lr;
        let g_out: Vec<f64> = act.out.iter().zip(&y).map(|(o, t)| 2.0 * (o - t)).collect();
        g_h.iter_mut().for_each(|v| *v = 0.0);
        for (k, &go) in g_out.iter().enumerate() {
            let row = &mut params.w2[k * cfg.hidden..(k + 1) * cfg.hidden];
            for j in 0..cfg.hidden {
                g_h[j] += go * row[j];
                row[j] -= lr * go * act.hidden[j];
            }
            params.b2[k] -= lr * go;
        }
        for j in 0..cfg.hidden {
            let g_pre = g_h[j] * (1.0 - act.hidden[j] * act.hidden[j]);
            if g_pre == 0.0 {
                continue;
            }
            params.b1[j] -= lr * g_pre;
            let step = lr * g_pre;
            for (w, xi) in params.w1[j * INPUT_DIM..(j + 1) * INPUT_DIM]
                .iter_mut()
                .zip(&x)
            {
                *w -= step * xi;
            }
        }
        schedule.advance();
    }
    for j in 0..cfg.hidden {
        for (w, k) in params.w1[j * INPUT_DIM..(j + 1) * INPUT_DIM]
            .iter_mut()
            .zip(&scale)
        {
            *w *= k;
        }
    }
    Ok(TrainOutput { params, trace })
}

pub fn write_loss_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::malformed("loss trace", e);
    w.write_record(LOSS_TRACE_HEADER).map_err(err)?;
    for r in trace {
        w.write_record([
            r.iter.to_string(),
            r.loss.to_string(),
            r.p.to_string(),
            r.patched_view.as_str().to_string(),
        ])
        .map_err(err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::malformed("loss trace", e.into_error()))?;
    crate::session::write_bytes(path, &bytes)
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_loss_trace(&data)
}

pub fn parse_loss_trace(data: &[u8]) -> Result<Vec<TraceRow>> {
    let rows = crate::session::parse_csv_table(data, &LOSS_TRACE_HEADER, "loss trace")?;
    rows.iter()
        .map(|r| {
            Ok(TraceRow {
                iter: crate::session::parse_u64(&r[0], "iter")? as usize,
                loss: crate::session::parse_f64(&r[1], "loss")?,
                p: crate::session::parse_f64(&r[2], "p")?,
                patched_view: match r[3].as_str() {
                    "none" => PatchedView::None,
                    "ego" => PatchedView::Ego,
                    "third" => PatchedView::Third,
                    other => {
                        return Err(Error::malformed(
                            "loss trace",
                            format!("patched_view {other}"),
                        ))
                    }
                },
            })
        })
        .collect()
}

/// Human-readable description written next to the parameter blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySidecar {
    pub format_version: u32,
    pub input_layout: String,
    pub input_dim: usize,
    pub hidden: usize,
    pub activation: String,
    pub horizon: usize,
    pub output_layout: String,
    pub ego_only: bool,
    pub w_max: f64,
    pub train: Option<TrainConfig>,
}

impl PolicyParams {
    pub fn sidecar(&self, train: Option<&TrainConfig>) -> PolicySidecar {
        PolicySidecar {
            format_version: BLOB_VERSION,
            input_layout: format!("ego {GRID}x{GRID}x3 | third {GRID}x{GRID}x3, row-major RGB in [0,1], minus input_mean"),
            input_dim: INPUT_DIM,
            hidden: self.hidden,
            activation: "tanh".into(),
            horizon: self.horizon,
            output_layout: "horizon x (dx, dy, dtheta, width), standardized by out_mean/out_std".into(),
            ego_only: self.ego_only,
            w_max: self.w_max,
            train: train.cloned(),
        }
    }

    /// Little-endian blob: magic, version, header fields, then f64 arrays.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BLOB_MAGIC);
        for v in [
            BLOB_VERSION,
            INPUT_DIM as u32,
            self.hidden as u32,
            self.horizon as u32,
            u32::from(self.ego_only),
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.w_max.to_le_bytes());
        for arr in [
            &self.input_mean,
            &self.out_mean,
            &self.out_std,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ] {
            for v in arr.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let bad = |r: &str| Error::malformed("policy blob", r);
        if data.len() < 4 + 5 * 4 + 8 || &data[..4] != BLOB_MAGIC {
            return Err(bad("bad magic or truncated header"));
        }
        let u =
            |i: usize| u32::from_le_bytes(data[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
        if u(0) != BLOB_VERSION {
            return Err(Error::UnsupportedSchema(u(0)));
        }
        if u(1) as usize != INPUT_DIM {
            return Err(bad("input dimension mismatch"));
        }
        let hidden = u(2) as usize;
        let horizon = u(3) as usize;
        let ego_only = match u(4) {
            0 => false,
            1 => true,
            _ => return Err(bad("bad flag")),
        };
        if hidden == 0 || horizon == 0 || hidden > 1 << 16 || horizon > 1 << 12 {
            return Err(bad("implausible dimensions"));
        }
        let mut pos = 24;
        let w_max = f64::from_le_bytes(data[pos..pos + 8].try_into().expect("8 bytes"));
        pos += 8;
        let out_dim = 4 * horizon;
        let sizes = [
            INPUT_DIM,
            out_dim,
            out_dim,
            hidden * INPUT_DIM,
            hidden,
            out_dim * hidden,
            out_dim,
        ];
        let total: usize = sizes.iter().sum();
        if data.len() != pos + 8 * total {
            return Err(bad("payload length mismatch"));
        }
        let mut arrays = sizes.iter().map(|&n| {
            let v: Vec<f64> = data[pos..pos + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            pos += 8 * n;
            v
        });
        let mut next = || arrays.next().expect("seven arrays");
        let params = PolicyParams {
            hidden,
            horizon,
            ego_only,
            w_max,
            input_mean: next(),
            out_mean: next(),
            out_std: next(),
            w1: next(),
            b1: next(),
            w2: next(),
            b2: next(),
        };
        if !params.all_finite() || !(w_max > 0.0) {
            return Err(bad("non-finite parameters"));
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path, train: Option<&TrainConfig>) -> Result<()> {
        crate::session::write_bytes(path, &self.to_bytes())?;
        crate::session::write_json(&sidecar_path(path), &self.sidecar(train))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&data)
    }
}

pub fn sidecar_path(blob: &Path) -> std::path::PathBuf {
    let mut name = blob
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_default();
    name.push(".json");
    blob.with_file_name(name)
}

/// A downsampled blank frame, handy for zeroed views.
pub fn blank_view(role: ViewRole) -> Frame {
    Frame::filled(0, GRID, GRID, [0; 3], role)
}
