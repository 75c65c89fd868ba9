//! Stream pairing, session-start detection and episode assembly.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actions::{relative_poses, width_from_markers};
use crate::error::{Error, Result};
use crate::inpaint::THIRD_MASKED_DIR;
use crate::session::{self, Session, EGO_DIR, MANIFEST_FILE, THIRD_DIR};
use crate::sim::{render_start_marker, PALETTE};
use crate::types::{ActionLabel, EpisodeRecord, Frame, SessionManifest, Step, ViewRole};

pub const DATASET_DIR: &str = "dataset";
pub const STEPS_FILE: &str = "steps.csv";
pub const ACTIONS_FILE: &str = "actions.csv";
pub const EPISODE_FILE: &str = "episode.json";
pub const THIRD_RAW_DIR: &str = "third_raw";
pub const SYNC_REPORT_FILE: &str = "sync_report.json";

fn check_sorted(ts: &[u64]) -> Result<()> {
    if ts.is_empty() {
        return Err(Error::EmptyStream);
    }
    if let Some(i) = ts.windows(2).position(|w| w[1] <= w[0]) {
        return Err(Error::UnsortedStream(i + 1));
    }
    Ok(())
}

/// Nearest third frame for every ego frame, ties to the earlier frame,
/// in one linear sweep.
pub fn pair_streams(ego_ts: &[u64], third_ts: &[u64]) -> Result<Vec<(usize, usize)>> {
    check_sorted(ego_ts)?;
    check_sorted(third_ts)?;
    let mut j = 0;
    let mut out = Vec::with_capacity(ego_ts.len());
    for (i, &t) in ego_ts.iter().enumerate() {
        while j + 1 < third_ts.len() && third_ts[j + 1].abs_diff(t) < third_ts[j].abs_diff(t) {
            j += 1;
        }
        out.push((i, j));
    }
    Ok(out)
}

/// Index of the element of sorted `ts` nearest to `t`, ties to the earlier one.
pub fn nearest_index(ts: &[u64], t: u64) -> usize {
    let i = ts.partition_point(|&x| x < t);
    if i == 0 {
        return 0;
    }
    if i == ts.len() {
        return ts.len() - 1;
    }
    if ts[i] - t < t - ts[i - 1] {
        i
    } else {
        i - 1
    }
}

/// Timestamp of the first ego frame showing the start marker.
pub fn detect_session_start(ego: &[Frame]) -> Result<u64> {
    let mut template: Option<Frame> = None;
    for f in ego {
        let t = match &template {
            Some(t) if t.dims() == f.dims() => t,
            _ => template.insert(render_start_marker(f.width(), f.height())),
        };
        if t.pixels() == f.pixels() {
            return Ok(f.timestamp_ns);
        }
    }
    Err(Error::NoStartMarker)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncReport {
    pub session_start_ns: u64,
    pub n_episodes: usize,
    pub n_steps: usize,
    pub marker_fallbacks: usize,
    pub max_offset_ns: u64,
    pub tolerance_ns: u64,
}

/// Synchronized episodes plus the unprocessed third frame of every step.
pub struct BuiltEpisodes {
    pub manifest: SessionManifest,
    pub records: Vec<EpisodeRecord>,
    pub third_raw: Vec<Vec<Frame>>,
    pub report: SyncReport,
}

pub fn build_episodes(dir: &Path) -> Result<BuiltEpisodes> {
    let session = session::read_session(dir)?;
    let masked_dir = dir.join(THIRD_MASKED_DIR);
    let masked: BTreeMap<u64, PathBuf> = if masked_dir.is_dir() {
        session::list_timestamped(&masked_dir, "ppm")?
            .into_iter()
            .collect()
    } else {
        BTreeMap::new()
    };
    assemble_episodes(&session, |third| {
        let tt = third.timestamp_ns;
        let path = masked.get(&tt).ok_or(Error::MissingProcessedFrame(tt))?;
        session::read_frame(path, tt, ViewRole::ThirdMasked)
    })
}

/// Pair, label and cut a session into episodes. `processed` maps each paired
/// raw third frame to its embodiment-free counterpart.
pub fn assemble_episodes(
    session: &Session,
    mut processed: impl FnMut(&Frame) -> Result<Frame>,
) -> Result<BuiltEpisodes> {
    let manifest = session.manifest.clone();
    let (poses, spans, ego, third) = (
        &session.poses,
        &session.episodes,
        &session.ego,
        &session.third,
    );
    let session_start_ns = detect_session_start(&ego)?;

    let ego_ts: Vec<u64> = ego.iter().map(|f| f.timestamp_ns).collect();
    let third_ts: Vec<u64> = third.iter().map(|f| f.timestamp_ns).collect();
    let pairs = pair_streams(&ego_ts, &third_ts)?;
    let tol = manifest.sync_tolerance_ns();
    let colors = [PALETTE.marker_left, PALETTE.marker_right];
    let pose_at: BTreeMap<u64, &session::PoseRow> = poses.iter().map(|r| (r.t_ns, r)).collect();

    let mut records = Vec::with_capacity(spans.len());
    let mut third_raw = Vec::with_capacity(spans.len());
    let mut fallbacks = 0;
    let mut max_offset = 0;
    let mut n_steps = 0;
    for span in spans {
        if span.start_ns < session_start_ns {
            return Err(Error::Inconsistent(format!(
                "episode {} starts before the session start marker",
                span.episode_id
            )));
        }
        let rel: BTreeMap<u64, _> = relative_poses(poses, span.start_ns, span.end_ns)?
            .into_iter()
            .collect();
        let mut steps = Vec::new();
        let mut raws = Vec::new();
        for &(i, j) in pairs.iter().filter(|(i, _)| span.contains(ego_ts[*i])) {
            let (te, tt) = (ego_ts[i], third_ts[j]);
            let offset = te.abs_diff(tt);
            if offset > tol {
                return Err(Error::SyncViolation {
                    ego_ns: te,
                    third_ns: tt,
                    tolerance_ns: tol,
                });
            }
            max_offset = max_offset.max(offset);
            let processed = processed(&third[j])?;
            let pose = *rel
                .get(&te)
                .ok_or_else(|| Error::Inconsistent(format!("no pose log row at {te}")))?;
            let width = match width_from_markers(
                &ego[i],
                colors,
                manifest.scale_m_per_px,
                manifest.w_max,
            ) {
                Ok(w) => w,
                Err(_) => {
                    fallbacks += 1;
                    pose_at[&te].gripper_width.clamp(0.0, manifest.w_max)
                }
            };
            steps.push(Step {
                ego: ego[i].clone(),
                third: processed,
                action: ActionLabel {
                    pose,
                    gripper_width: width,
                },
            });
            raws.push(third[j].clone());
        }
        n_steps += steps.len();
        records.push(EpisodeRecord {
            episode_id: span.episode_id.clone(),
            steps,
            embodiment: manifest.embodiment,
            task_id: manifest.task_id.clone(),
            seed: manifest.seed,
        });
        third_raw.push(raws);
    }
    let report = SyncReport {
        session_start_ns,
        n_episodes: records.len(),
        n_steps,
        marker_fallbacks: fallbacks,
        max_offset_ns: max_offset,
        tolerance_ns: tol,
    };
    Ok(BuiltEpisodes {
        manifest,
        records,
        third_raw,
        report,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct EpisodeMeta {
    episode_id: String,
    embodiment: crate::types::Embodiment,
    task_id: String,
    seed: u64,
}

pub fn episode_dir_name(k: usize) -> String {
    format!("episode_{k}")
}

/// Write `dataset/` under the session directory.
pub fn write_dataset(dir: &Path, built: &BuiltEpisodes) -> Result<PathBuf> {
    let root = dir.join(DATASET_DIR);
    session::reset_dir(&root)?;
    session::write_json(&root.join(MANIFEST_FILE), &built.manifest)?;
    session::write_json(&root.join(SYNC_REPORT_FILE), &built.report)?;
    for (k, (rec, raws)) in built.records.iter().zip(&built.third_raw).enumerate() {
        let ep = root.join(episode_dir_name(k));
        fs::create_dir_all(&ep).map_err(|e| Error::io(&ep, e))?;
        let ego: Vec<Frame> = rec.steps.iter().map(|s| s.ego.clone()).collect();
        let third = dedup_by_ts(rec.steps.iter().map(|s| &s.third));
        session::write_frames(&ep.join(EGO_DIR), &ego)?;
        session::write_frames(&ep.join(THIRD_DIR), &third)?;
        session::write_frames(&ep.join(THIRD_RAW_DIR), &dedup_by_ts(raws.iter()))?;
        let mut steps = csv::Writer::from_writer(Vec::new());
        let mut actions = csv::Writer::from_writer(Vec::new());
        steps.write_record(["t_ego", "t_third"]).map_err(csv_err)?;
        actions
            .write_record(["t_ns", "dx", "dy", "dtheta", "width"])
            .map_err(csv_err)?;
        for s in &rec.steps {
            steps
                .write_record([
                    s.ego.timestamp_ns.to_string(),
                    s.third.timestamp_ns.to_string(),
                ])
                .map_err(csv_err)?;
            let a = s.action;
            actions
                .write_record([
                    s.ego.timestamp_ns.to_string(),
                    a.pose.x.to_string(),
                    a.pose.y.to_string(),
                    a.pose.theta.to_string(),
                    a.gripper_width.to_string(),
                ])
                .map_err(csv_err)?;
        }
        session::write_bytes(
            &ep.join(STEPS_FILE),
            &steps.into_inner().map_err(|e| csv_err(e.into_error()))?,
        )?;
        session::write_bytes(
            &ep.join(ACTIONS_FILE),
            &actions.into_inner().map_err(|e| csv_err(e.into_error()))?,
        )?;
        session::write_json(
            &ep.join(EPISODE_FILE),
            &EpisodeMeta {
                episode_id: rec.episode_id.clone(),
                embodiment: rec.embodiment,
                task_id: rec.task_id.clone(),
                seed: rec.seed,
            },
        )?;
    }
    Ok(root)
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::malformed("csv", e)
}

fn dedup_by_ts<'a>(frames: impl Iterator<Item = &'a Frame>) -> Vec<Frame> {
    let mut out: Vec<Frame> = Vec::new();
    for f in frames {
        if out.last().is_none_or(|l| l.timestamp_ns != f.timestamp_ns) {
            out.push(f.clone());
        }
    }
    out
}

/// Build and write the dataset of one session.
pub fn sync_session(dir: &Path) -> Result<SyncReport> {
    let built = build_episodes(dir)?;
    write_dataset(dir, &built)?;
    Ok(built.report)
}

/// One dataset episode with both the processed and the raw third stream.
#[derive(Debug, Clone)]
pub struct DatasetEpisode {
    pub record: EpisodeRecord,
    pub third_raw: Vec<Frame>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: SessionManifest,
    pub episodes: Vec<DatasetEpisode>,
}

/// Resolve a session directory or a dataset directory to the dataset root.
pub fn dataset_root(path: &Path) -> PathBuf {
    let nested = path.join(DATASET_DIR);
    if nested.join(MANIFEST_FILE).is_file() {
        nested
    } else {
        path.to_path_buf()
    }
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let root = dataset_root(path);
    let manifest = session::read_manifest(&root)?;
    let mut k = 0;
    let mut episodes = Vec::new();
    loop {
        let ep = root.join(episode_dir_name(k));
        if !ep.is_dir() {
            break;
        }
        episodes.push(read_episode(&ep, &manifest)?);
        k += 1;
    }
    if episodes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(Dataset { manifest, episodes })
}

fn read_episode(ep: &Path, manifest: &SessionManifest) -> Result<DatasetEpisode> {
    let path = ep.join(EPISODE_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: EpisodeMeta =
        serde_json::from_str(&text).map_err(|e| Error::malformed("episode", e))?;
    let ego: BTreeMap<u64, Frame> = session::read_frames(&ep.join(EGO_DIR), ViewRole::Ego)?
        .into_iter()
        .map(|f| (f.timestamp_ns, f))
        .collect();
    let third: BTreeMap<u64, Frame> =
        session::read_frames(&ep.join(THIRD_DIR), ViewRole::ThirdMasked)?
            .into_iter()
            .map(|f| (f.timestamp_ns, f))
            .collect();
    let raw: BTreeMap<u64, Frame> =
        session::read_frames(&ep.join(THIRD_RAW_DIR), manifest.embodiment.third_role())?
            .into_iter()
            .map(|f| (f.timestamp_ns, f))
            .collect();
    let read = |name: &str| {
        let p = ep.join(name);
        fs::read(&p).map_err(|e| Error::io(&p, e))
    };
    let steps_rows = session::parse_csv_table(&read(STEPS_FILE)?, &["t_ego", "t_third"], "steps")?;
    let action_rows = session::parse_csv_table(
        &read(ACTIONS_FILE)?,
        &["t_ns", "dx", "dy", "dtheta", "width"],
        "actions",
    )?;
    if steps_rows.len() != action_rows.len() {
        return Err(Error::Inconsistent(
            "steps and actions differ in length".into(),
        ));
    }
    let mut steps = Vec::with_capacity(steps_rows.len());
    let mut third_raw = Vec::with_capacity(steps_rows.len());
    for (s, a) in steps_rows.iter().zip(&action_rows) {
        let te = session::parse_u64(&s[0], "t_ego")?;
        let tt = session::parse_u64(&s[1], "t_third")?;
        if session::parse_u64(&a[0], "t_ns")? != te {
            return Err(Error::Inconsistent(format!(
                "action row does not match step {te}"
            )));
        }
        let pose = crate::types::Pose2 {
            x: session::parse_f64(&a[1], "dx")?,
            y: session::parse_f64(&a[2], "dy")?,
            theta: session::parse_f64(&a[3], "dtheta")?,
        };
        let gripper_width = session::parse_f64(&a[4], "width")?;
        let missing = |t| Error::Inconsistent(format!("missing frame {t}"));
        steps.push(Step {
            ego: ego.get(&te).cloned().ok_or_else(|| missing(te))?,
            third: third
                .get(&tt)
                .cloned()
                .ok_or(Error::MissingProcessedFrame(tt))?,
            action: ActionLabel {
                pose,
                gripper_width,
            },
        });
        third_raw.push(raw.get(&tt).cloned().ok_or_else(|| missing(tt))?);
    }
    Ok(DatasetEpisode {
        record: EpisodeRecord {
            episode_id: meta.episode_id,
            steps,
            embodiment: meta.embodiment,
            task_id: meta.task_id,
            seed: meta.seed,
        },
        third_raw,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(ego: &[u64], third: &[u64]) -> Vec<(usize, usize)> {
        ego.iter()
            .enumerate()
            .map(|(i, &t)| {
                let mut best = 0;
                for (j, &u) in third.iter().enumerate() {
                    if u.abs_diff(t) < third[best].abs_diff(t) {
                        best = j;
                    }
                }
                (i, best)
            })
            .collect()
    }

    #[test]
    fn documented_pairings() {
        let ms = 1_000_000;
        let p = pair_streams(&[0, 33 * ms, 66 * ms], &[0, 40 * ms, 80 * ms]).unwrap();
        assert_eq!(p, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(pair_streams(&[50], &[0, 100]).unwrap(), vec![(0, 0)]);
        let same = [1, 5, 9];
        assert_eq!(
            pair_streams(&same, &same).unwrap(),
            vec![(0, 0), (1, 1), (2, 2)]
        );
    }

    #[test]
    fn rejects_empty_and_unsorted() {
        assert!(matches!(pair_streams(&[], &[1]), Err(Error::EmptyStream)));
        assert!(matches!(
            pair_streams(&[1, 1], &[1]),
            Err(Error::UnsortedStream(1))
        ));
        assert!(matches!(
            pair_streams(&[1], &[3, 2]),
            Err(Error::UnsortedStream(1))
        ));
    }

    #[test]
    fn marker_detection() {
        let plain = Frame::filled(5, 16, 16, [10; 3], ViewRole::Ego);
        let marker = render_start_marker(16, 16).with_timestamp(9);
        assert_eq!(
            detect_session_start(&[marker.clone(), plain.clone()]).unwrap(),
            9
        );
        assert_eq!(detect_session_start(&[plain.clone(), marker]).unwrap(), 9);
        let err = detect_session_start(&[plain]).unwrap_err();
        assert_eq!(err.to_string(), "no session start marker");
    }

    fn sorted(v: Vec<u64>) -> Vec<u64> {
        let mut v = v;
        v.sort_unstable();
        v.dedup();
        v
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            ego in proptest::collection::vec(0u64..2000, 1..60).prop_map(sorted),
            third in proptest::collection::vec(0u64..2000, 1..60).prop_map(sorted),
        ) {
            let got = pair_streams(&ego, &third).unwrap();
            prop_assert_eq!(&got, &brute(&ego, &third));
            for w in got.windows(2) {
                prop_assert!(w[0].1 <= w[1].1);
            }
            for &(i, j) in &got {
                prop_assert_eq!(nearest_index(&third, ego[i]), j);
            }
        }
    }
}
