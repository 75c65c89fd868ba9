//! Aggregated ablation table, pass/fail checks and their text rendering.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ablate::{AblationRuns, Arm};
use super::RolloutResult;
use crate::error::{Error, Result};
use crate::session;

pub const RUNS_FILE: &str = "ablation_runs.json";
pub const REPORT_JSON: &str = "ablation_report.json";
pub const REPORT_TXT: &str = "ablation_report.txt";
pub const TRACES_DIR: &str = "traces";

pub const MIN_MV_GAP: f64 = 0.2;
pub const MAX_PICK_GAP: f64 = 0.1;
pub const MAX_CONTROL_GAP: f64 = 0.1;
pub const MAX_HUMAN_SEG_RATIO: f64 = 0.3;
pub const MIN_CHANCE_FACTOR: f64 = 10.0;
pub const MIN_SALIENCY_WINS: f64 = 0.8;
pub const TARGET_FPS: f64 = 200.0;
pub const FLOOR_FPS: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: Arm,
    pub letter: char,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub pick_mean: f64,
    /// `mean / mean(full)`; zero when the full arm never succeeds.
    pub relative: f64,
    pub fallbacks: usize,
}

/// Pick rate, and success among episodes that picked.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseRates {
    pub success: f64,
    pub pick: f64,
    pub place_given_pick: f64,
}

impl PhaseRates {
    fn from_runs<'a>(runs: impl Iterator<Item = &'a RolloutResult>) -> PhaseRates {
        let (mut n, mut picked, mut placed) = (0usize, 0usize, 0usize);
        for r in runs {
            for t in &r.episodes {
                n += 1;
                picked += t.picked as usize;
                placed += (t.picked && t.success) as usize;
            }
        }
        let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        PhaseRates {
            success: frac(placed, n),
            pick: frac(picked, n),
            place_given_pick: frac(placed, picked),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewComparison {
    pub mv: PhaseRates,
    pub ego_only: PhaseRates,
    pub gap: f64,
    /// `gap / ego_only.success`; zero when ego-only never succeeds.
    pub relative_gain: f64,
}

impl ViewComparison {
    fn new(mv: PhaseRates, ego_only: PhaseRates) -> Self {
        let gap = mv.success - ego_only.success;
        ViewComparison {
            mv,
            ego_only,
            gap,
            relative_gain: if ego_only.success > 0.0 {
                gap / ego_only.success
            } else {
                0.0
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRow {
    pub n_containers: u32,
    pub views: ViewComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyRow {
    pub seed: u64,
    pub raw_trained: f64,
    pub inpaint_trained: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub frames: usize,
    pub ms_per_frame: f64,
    pub fps: f64,
}

/// The machine table: every number the checks are computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub task_id: String,
    pub n_containers: u32,
    pub seeds: Vec<u64>,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    pub arms: Vec<ArmRow>,
    pub views: ViewComparison,
    pub control: Option<ControlRow>,
    pub saliency: Vec<SaliencyRow>,
    pub segmenter_iou: f64,
    pub random_success_rate: f64,
    pub throughput: ThroughputRow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checks {
    /// full >= no-robot-seg > no-3rd-person > no-human-seg, no-robot-inpaint lowest or tied.
    pub ordering: bool,
    pub human_seg_ratio: bool,
    pub mv_gap: bool,
    pub pick_phase: bool,
    /// `None` when no control task was run.
    pub control_gap: Option<bool>,
    pub above_chance: bool,
    pub saliency: bool,
    pub throughput_target: bool,
    pub throughput_floor: bool,
}

impl Checks {
    /// Every hard check; the throughput target is advisory above the floor.
    pub fn all_pass(&self) -> bool {
        self.ordering
            && self.human_seg_ratio
            && self.mv_gap
            && self.pick_phase
            && self.control_gap.unwrap_or(true)
            && self.above_chance
            && self.saliency
            && self.throughput_floor
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub table: AblationTable,
    pub checks: Checks,
    pub pass: bool,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn aggregate(runs: &AblationRuns) -> AblationTable {
    let of = |arm: Arm| runs.arms.iter().filter(move |r| r.arm == arm);
    let full_mean = mean(
        &of(Arm::Full)
            .map(|r| r.result.success_rate)
            .collect::<Vec<_>>(),
    );
    let arms = Arm::ALL
        .iter()
        .map(|&arm| {
            let per_seed: Vec<f64> = of(arm).map(|r| r.result.success_rate).collect();
            let m = mean(&per_seed);
            ArmRow {
                arm,
                letter: arm.letter(),
                mean: m,
                pick_mean: mean(&of(arm).map(|r| r.result.pick_rate).collect::<Vec<_>>()),
                relative: if full_mean > 0.0 { m / full_mean } else { 0.0 },
                fallbacks: of(arm).map(|r| r.result.fallbacks).sum(),
                per_seed,
            }
        })
        .collect();
    let views = ViewComparison::new(
        PhaseRates::from_runs(of(Arm::Full).map(|r| &r.result)),
        PhaseRates::from_runs(of(Arm::NoThirdPerson).map(|r| &r.result)),
    );
    let control = runs.controls.first().map(|c| ControlRow {
        n_containers: c.n_containers,
        views: ViewComparison::new(
            PhaseRates::from_runs(runs.controls.iter().map(|c| &c.mv)),
            PhaseRates::from_runs(runs.controls.iter().map(|c| &c.ego_only)),
        ),
    });
    let ms = if runs.processed_frames == 0 {
        0.0
    } else {
        1e3 * runs.process_seconds / runs.processed_frames as f64
    };
    AblationTable {
        task_id: runs.task_id.clone(),
        n_containers: runs.n_containers,
        seeds: runs.seeds.clone(),
        train_episodes: runs.train_episodes,
        eval_episodes: runs.eval_episodes,
        arms,
        views,
        control,
        saliency: runs
            .saliency
            .iter()
            .map(|s| SaliencyRow {
                seed: s.seed,
                raw_trained: s.raw_trained,
                inpaint_trained: s.inpaint_trained,
            })
            .collect(),
        segmenter_iou: mean(&runs.segmenter_iou),
        random_success_rate: runs.random_success_rate,
        throughput: ThroughputRow {
            frames: runs.processed_frames,
            ms_per_frame: ms,
            fps: if ms > 0.0 { 1e3 / ms } else { 0.0 },
        },
    }
}

fn arm_mean(table: &AblationTable, arm: Arm) -> f64 {
    table
        .arms
        .iter()
        .find(|r| r.arm == arm)
        .map_or(0.0, |r| r.mean)
}

/// Pass/fail flags; a pure function of the table.
/// Rates are means of counts over equal episode budgets, so values closer
/// than this are the same rate up to summation order.
pub const TIE_EPS: f64 = 1e-9;

fn gt(x: f64, y: f64) -> bool {
    x > y + TIE_EPS
}

fn ge(x: f64, y: f64) -> bool {
    x >= y - TIE_EPS
}

pub fn checks(table: &AblationTable) -> Checks {
    let [a, b, c, d, e] = Arm::ALL.map(|arm| arm_mean(table, arm));
    let wins = table
        .saliency
        .iter()
        .filter(|s| s.raw_trained > s.inpaint_trained)
        .count();
    Checks {
        ordering: ge(a, e) && gt(e, c) && gt(c, b) && ge(a.min(b).min(c).min(e), d),
        human_seg_ratio: ge(MAX_HUMAN_SEG_RATIO * a, b),
        mv_gap: ge(table.views.gap, MIN_MV_GAP),
        pick_phase: ge(
            MAX_PICK_GAP,
            (table.views.mv.pick - table.views.ego_only.pick).abs(),
        ),
        control_gap: table
            .control
            .as_ref()
            .map(|c| gt(MAX_CONTROL_GAP, c.views.gap)),
        above_chance: a > 0.0 && a >= MIN_CHANCE_FACTOR * table.random_success_rate,
        saliency: !table.saliency.is_empty()
            && wins as f64 >= MIN_SALIENCY_WINS * table.saliency.len() as f64,
        throughput_target: table.throughput.fps >= TARGET_FPS,
        throughput_floor: table.throughput.fps >= FLOOR_FPS,
    }
}

pub fn build_report(table: AblationTable) -> Report {
    let checks = checks(&table);
    Report {
        pass: checks.all_pass(),
        table,
        checks,
    }
}

fn flag(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn render_text(report: &Report) -> String {
    let t = &report.table;
    let c = &report.checks;
    let mut s = String::new();
    let seeds: Vec<String> = t.seeds.iter().map(u64::to_string).collect();
    let _ = writeln!(
        s,
        "task {} (n_containers {}), seeds {}",
        t.task_id,
        t.n_containers,
        seeds.join(",")
    );
    let _ = writeln!(
        s,
        "train episodes {}, eval episodes per arm and seed {}",
        t.train_episodes, t.eval_episodes
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "arm  name               mean   rel    pick   per-seed");
    for r in &t.arms {
        let per: Vec<String> = r.per_seed.iter().map(|v| format!("{v:.3}")).collect();
        let name = serde_json::to_value(r.arm)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        let _ = writeln!(
            s,
            "{}    {:<18} {:.3}  {:.3}  {:.3}  {}",
            r.letter,
            name,
            r.mean,
            r.relative,
            r.pick_mean,
            per.join(" ")
        );
    }
    let v = &t.views;
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "views: mv {:.3} ego-only {:.3} gap {:.3} (relative {:.3})",
        v.mv.success, v.ego_only.success, v.gap, v.relative_gain
    );
    let _ = writeln!(
        s,
        "phases: pick mv {:.3} ego-only {:.3}; place given pick mv {:.3} ego-only {:.3}",
        v.mv.pick, v.ego_only.pick, v.mv.place_given_pick, v.ego_only.place_given_pick
    );
    if let Some(ctl) = &t.control {
        let _ = writeln!(
            s,
            "control n_containers {}: mv {:.3} ego-only {:.3} gap {:.3}",
            ctl.n_containers, ctl.views.mv.success, ctl.views.ego_only.success, ctl.views.gap
        );
    }
    for r in &t.saliency {
        let _ = writeln!(
            s,
            "saliency seed {}: raw-trained {:.4} inpaint-trained {:.4}",
            r.seed, r.raw_trained, r.inpaint_trained
        );
    }
    let _ = writeln!(s, "segmenter mean IoU {:.4}", t.segmenter_iou);
    let _ = writeln!(s, "random controller success {:.3}", t.random_success_rate);
    let _ = writeln!(
        s,
        "throughput segment+inpaint: {:.3} ms/frame, {:.1} frames/s over {} frames",
        t.throughput.ms_per_frame, t.throughput.fps, t.throughput.frames
    );
    let _ = writeln!(s);
    let _ = writeln!(s, "{} ordering a >= e > c > b, d lowest", flag(c.ordering));
    let _ = writeln!(
        s,
        "{} b <= {MAX_HUMAN_SEG_RATIO} * a",
        flag(c.human_seg_ratio)
    );
    let _ = writeln!(s, "{} mv - ego-only >= {MIN_MV_GAP}", flag(c.mv_gap));
    let _ = writeln!(s, "{} pick-phase gap <= {MAX_PICK_GAP}", flag(c.pick_phase));
    if let Some(ok) = c.control_gap {
        let _ = writeln!(s, "{} control gap < {MAX_CONTROL_GAP}", flag(ok));
    }
    let _ = writeln!(
        s,
        "{} a >= {MIN_CHANCE_FACTOR} x random",
        flag(c.above_chance)
    );
    let _ = writeln!(
        s,
        "{} saliency raw > inpainted in >= 80% of seeds",
        flag(c.saliency)
    );
    let _ = writeln!(
        s,
        "{} throughput >= {FLOOR_FPS} frames/s (target {TARGET_FPS}: {})",
        flag(c.throughput_floor),
        flag(c.throughput_target)
    );
    let _ = writeln!(s, "overall {}", flag(report.pass));
    s
}

/// Per-episode traces of one rollout as CSV.
pub fn traces_csv(result: &RolloutResult) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "episode",
        "success",
        "picked",
        "steps",
        "budget",
        "fallbacks",
    ])
    .map_err(|e| Error::malformed("csv", e))?;
    for t in &result.episodes {
        w.write_record([
            t.episode.to_string(),
            (t.success as u8).to_string(),
            (t.picked as u8).to_string(),
            t.steps.to_string(),
            t.budget.to_string(),
            t.fallbacks.to_string(),
        ])
        .map_err(|e| Error::malformed("csv", e))?;
    }
    w.into_inner()
        .map_err(|e| Error::malformed("csv", e.into_error()))
}

/// Write the raw runs, per-episode traces and both report files.
pub fn write_outputs(dir: &Path, runs: &AblationRuns) -> Result<Report> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    session::write_json(&dir.join(RUNS_FILE), runs)?;
    let traces = dir.join(TRACES_DIR);
    session::reset_dir(&traces)?;
    for r in &runs.arms {
        let name = format!("{}_seed{}.csv", r.arm.letter(), r.seed);
        session::write_bytes(&traces.join(name), &traces_csv(&r.result)?)?;
    }
    for c in &runs.controls {
        session::write_bytes(
            &traces.join(format!("control_mv_seed{}.csv", c.seed)),
            &traces_csv(&c.mv)?,
        )?;
        session::write_bytes(
            &traces.join(format!("control_ego_seed{}.csv", c.seed)),
            &traces_csv(&c.ego_only)?,
        )?;
    }
    write_report(dir, runs)
}

/// Recompute the table and checks from the runs and write both report files.
pub fn write_report(dir: &Path, runs: &AblationRuns) -> Result<Report> {
    let report = build_report(aggregate(runs));
    session::write_json(&dir.join(REPORT_JSON), &report)?;
    session::write_bytes(&dir.join(REPORT_TXT), render_text(&report).as_bytes())?;
    Ok(report)
}

pub fn read_runs(dir: &Path) -> Result<AblationRuns> {
    let path = dir.join(RUNS_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::malformed("ablation runs", e))
}
