//! On-disk session layout:
//!
//! ```text
//! <session>/manifest.json      sorted keys
//! <session>/ego/<t_ns>.ppm
//! <session>/third/<t_ns>.ppm
//! <session>/background.ppm
//! <session>/poses.csv          t_ns,x,y,theta,gripper_width
//! <session>/episodes.json      [{end_ns, episode_id, start_ns}]
//! ```

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pnm;
use crate::types::{EpisodeRecord, Frame, Mask, Pose2, SessionManifest, ViewRole, SCHEMA_VERSION};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const POSES_FILE: &str = "poses.csv";
pub const EPISODES_FILE: &str = "episodes.json";
pub const BACKGROUND_FILE: &str = "background.ppm";
pub const EGO_DIR: &str = "ego";
pub const THIRD_DIR: &str = "third";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseRow {
    pub t_ns: u64,
    pub pose: Pose2,
    pub gripper_width: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpan {
    pub episode_id: String,
    pub start_ns: u64,
    pub end_ns: u64,
}

impl EpisodeSpan {
    pub fn contains(&self, t_ns: u64) -> bool {
        (self.start_ns..=self.end_ns).contains(&t_ns)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub manifest: SessionManifest,
    pub ego: Vec<Frame>,
    pub third: Vec<Frame>,
    pub background: Frame,
    pub poses: Vec<PoseRow>,
    pub episodes: Vec<EpisodeSpan>,
}

pub fn write_session(dir: &Path, session: &Session) -> Result<()> {
    check_consistency(session)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    write_json(&dir.join(MANIFEST_FILE), &session.manifest)?;
    write_frames(&dir.join(EGO_DIR), &session.ego)?;
    write_frames(&dir.join(THIRD_DIR), &session.third)?;
    write_bytes(
        &dir.join(BACKGROUND_FILE),
        &pnm::encode_ppm(&session.background),
    )?;
    write_poses(&dir.join(POSES_FILE), &session.poses)?;
    write_json(&dir.join(EPISODES_FILE), &session.episodes)?;
    Ok(())
}

pub fn read_session(dir: &Path) -> Result<Session> {
    let manifest = read_manifest(dir)?;
    let poses_path = dir.join(POSES_FILE);
    if !poses_path.is_file() {
        return Err(Error::MissingPoseLog(poses_path));
    }
    let ego = read_frames(&dir.join(EGO_DIR), ViewRole::Ego)?;
    let third = read_frames(&dir.join(THIRD_DIR), manifest.embodiment.third_role())?;
    let background = read_frame(&dir.join(BACKGROUND_FILE), 0, ViewRole::BackgroundRef)?;
    let poses = read_poses(&poses_path)?;
    let episodes = read_episodes(dir)?;
    Ok(Session {
        manifest,
        ego,
        third,
        background,
        poses,
        episodes,
    })
}

pub fn read_manifest(dir: &Path) -> Result<SessionManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(Error::MissingManifest(path));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_manifest(&text)
}

pub fn parse_manifest(text: &str) -> Result<SessionManifest> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::malformed("manifest", e))?;
    let version = value
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::malformed("manifest", "missing schema_version"))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(Error::UnsupportedSchema(
            u32::try_from(version).unwrap_or(u32::MAX),
        ));
    }
    let manifest: SessionManifest =
        serde_json::from_value(value).map_err(|e| Error::malformed("manifest", e))?;
    manifest.validate()?;
    Ok(manifest)
}

pub fn read_episodes(dir: &Path) -> Result<Vec<EpisodeSpan>> {
    let path = dir.join(EPISODES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_episodes(&text)
}

pub fn parse_episodes(text: &str) -> Result<Vec<EpisodeSpan>> {
    let spans: Vec<EpisodeSpan> =
        serde_json::from_str(text).map_err(|e| Error::malformed("episodes", e))?;
    for s in &spans {
        if s.end_ns < s.start_ns {
            return Err(Error::malformed(
                "episodes",
                format!("episode {} ends before it starts", s.episode_id),
            ));
        }
    }
    Ok(spans)
}

fn check_consistency(s: &Session) -> Result<()> {
    if s.ego.is_empty() || s.third.is_empty() {
        return Err(Error::EmptySession);
    }
    s.manifest.validate()?;
    let m = &s.manifest;
    check_stream("ego", &s.ego, m.resolution_ego, m.fps_ego)?;
    check_stream("third", &s.third, m.resolution_third, m.fps_third)?;
    let [tw, th] = m.resolution_third;
    if s.background.dims() != (tw, th) {
        return Err(Error::Inconsistent(format!(
            "background is {:?}, manifest third resolution is {tw}x{th}",
            s.background.dims()
        )));
    }
    if s.poses.windows(2).any(|w| w[1].t_ns <= w[0].t_ns) {
        return Err(Error::Inconsistent(
            "pose log not strictly increasing".into(),
        ));
    }
    Ok(())
}

fn check_stream(name: &str, frames: &[Frame], res: [u32; 2], fps: f64) -> Result<()> {
    if let Some(f) = frames.iter().find(|f| f.dims() != (res[0], res[1])) {
        return Err(Error::Inconsistent(format!(
            "{name} frame at {} is {:?}, manifest says {}x{}",
            f.timestamp_ns,
            f.dims(),
            res[0],
            res[1]
        )));
    }
    if let Some(i) = frames
        .windows(2)
        .position(|w| w[1].timestamp_ns <= w[0].timestamp_ns)
    {
        return Err(Error::Inconsistent(format!(
            "{name} timestamps not strictly increasing at index {}",
            i + 1
        )));
    }
    // Median interval must sit near the nominal rate; episode gaps are rare
    // enough not to move the median.
    if frames.len() >= 3 {
        let mut intervals: Vec<u64> = frames
            .windows(2)
            .map(|w| w[1].timestamp_ns - w[0].timestamp_ns)
            .collect();
        intervals.sort_unstable();
        let median = intervals[intervals.len() / 2] as f64;
        let nominal = 1e9 / fps;
        if (median - nominal).abs() > 0.25 * nominal {
            return Err(Error::Inconsistent(format!(
                "{name} median interval {median} ns does not match {fps} fps"
            )));
        }
    }
    Ok(())
}

pub fn to_sorted_json<T: Serialize>(value: &T) -> Result<String> {
    // serde_json::Value objects are BTreeMap-backed, so keys come out sorted.
    let v = serde_json::to_value(value).map_err(|e| Error::malformed("json", e))?;
    let mut s = serde_json::to_string_pretty(&v).map_err(|e| Error::malformed("json", e))?;
    s.push('\n');
    Ok(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_bytes(path, to_sorted_json(value)?.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn frame_file_name(t_ns: u64, ext: &str) -> String {
    format!("{t_ns}.{ext}")
}

/// Replace the contents of `dir` with one file per frame.
pub fn write_frames(dir: &Path, frames: &[Frame]) -> Result<()> {
    reset_dir(dir)?;
    for f in frames {
        write_bytes(
            &dir.join(frame_file_name(f.timestamp_ns, "ppm")),
            &pnm::encode_ppm(f),
        )?;
    }
    Ok(())
}

pub fn write_masks(dir: &Path, masks: &[(u64, Mask)]) -> Result<()> {
    reset_dir(dir)?;
    for (t, m) in masks {
        write_bytes(&dir.join(frame_file_name(*t, "pbm")), &pnm::encode_pbm(m))?;
    }
    Ok(())
}

pub fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Timestamped files with the given extension, sorted by timestamp.
pub fn list_timestamped(dir: &Path, ext: &str) -> Result<Vec<(u64, PathBuf)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some(ext) {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        let t: u64 = stem.parse().map_err(|_| Error::CorruptFrame {
            path: path.clone(),
            reason: "file name is not a nanosecond timestamp".into(),
        })?;
        out.push((t, path));
    }
    out.sort_by_key(|(t, _)| *t);
    Ok(out)
}

pub fn read_frame(path: &Path, t_ns: u64, role: ViewRole) -> Result<Frame> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    pnm::decode_ppm(&data, t_ns, role).map_err(|e| Error::CorruptFrame {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    pnm::decode_pbm(&data).map_err(|e| Error::CorruptFrame {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

pub fn read_frames(dir: &Path, role: ViewRole) -> Result<Vec<Frame>> {
    list_timestamped(dir, "ppm")?
        .into_iter()
        .map(|(t, p)| read_frame(&p, t, role))
        .collect()
}

pub fn read_masks(dir: &Path) -> Result<Vec<(u64, Mask)>> {
    list_timestamped(dir, "pbm")?
        .into_iter()
        .map(|(t, p)| Ok((t, read_mask(&p)?)))
        .collect()
}

pub fn write_poses(path: &Path, rows: &[PoseRow]) -> Result<()> {
    let mut s = String::from("t_ns,x,y,theta,gripper_width\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.t_ns, r.pose.x, r.pose.y, r.pose.theta, r.gripper_width
        ));
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_poses(path: &Path) -> Result<Vec<PoseRow>> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_poses(&data)
}

pub fn parse_poses(data: &[u8]) -> Result<Vec<PoseRow>> {
    let rows = parse_csv_table(
        data,
        &["t_ns", "x", "y", "theta", "gripper_width"],
        "pose log",
    )?;
    rows.into_iter()
        .map(|r| {
            Ok(PoseRow {
                t_ns: parse_u64(&r[0], "pose log")?,
                pose: Pose2 {
                    x: parse_f64(&r[1], "pose log")?,
                    y: parse_f64(&r[2], "pose log")?,
                    theta: parse_f64(&r[3], "pose log")?,
                },
                gripper_width: parse_f64(&r[4], "pose log")?,
            })
        })
        .collect()
}

/// Parse a headed CSV table whose header must equal `header` exactly.
pub fn parse_csv_table(data: &[u8], header: &[&str], what: &str) -> Result<Vec<Vec<String>>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(data);
    let found = rdr.headers().map_err(|e| Error::malformed(what, e))?;
    if found.iter().ne(header.iter().copied()) {
        return Err(Error::malformed(
            what,
            format!("expected header {}", header.join(",")),
        ));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::malformed(what, e))?;
            if rec.len() != header.len() {
                return Err(Error::malformed(what, "wrong column count"));
            }
            Ok(rec.iter().map(str::to_owned).collect())
        })
        .collect()
}

pub fn parse_u64(s: &str, what: &str) -> Result<u64> {
    s.trim()
        .parse()
        .map_err(|_| Error::malformed(what, format!("bad integer {s:?}")))
}

pub fn parse_f64(s: &str, what: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::malformed(what, format!("bad number {s:?}")))?;
    if !v.is_finite() {
        return Err(Error::malformed(what, format!("non-finite number {s:?}")));
    }
    Ok(v)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyEpisode,
    FirstPoseNotIdentity,
    Sync { step: usize },
    WidthOutOfRange { step: usize },
    AngleNotNormalized { step: usize },
    NonFinite { step: usize },
    EgoNotIncreasing { step: usize },
    ThirdDecreasing { step: usize },
    WrongRole { step: usize },
    WrongResolution { step: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyEpisode => write!(f, "empty episode"),
            Violation::FirstPoseNotIdentity => write!(f, "first action pose is not the identity"),
            Violation::Sync { step } => write!(f, "sync violation at step {step}"),
            Violation::WidthOutOfRange { step } => write!(f, "width out of range at step {step}"),
            Violation::AngleNotNormalized { step } => {
                write!(f, "theta not normalized at step {step}")
            }
            Violation::NonFinite { step } => write!(f, "non-finite action at step {step}"),
            Violation::EgoNotIncreasing { step } => {
                write!(f, "ego timestamps not increasing at step {step}")
            }
            Violation::ThirdDecreasing { step } => {
                write!(f, "third timestamps decreasing at step {step}")
            }
            Violation::WrongRole { step } => write!(f, "wrong view role at step {step}"),
            Violation::WrongResolution { step } => write!(f, "wrong resolution at step {step}"),
        }
    }
}

/// Check every episode invariant; an empty result means the record is valid.
pub fn validate_episode(rec: &EpisodeRecord, manifest: &SessionManifest) -> Vec<Violation> {
    let mut out = Vec::new();
    let Some(first) = rec.steps.first() else {
        out.push(Violation::EmptyEpisode);
        return out;
    };
    let p0 = first.action.pose;
    if !(p0.x.abs() <= 1e-9 && p0.y.abs() <= 1e-9 && p0.theta.abs() <= 1e-9) {
        out.push(Violation::FirstPoseNotIdentity);
    }
    let tol = manifest.sync_tolerance_ns();
    let ego_res = (manifest.resolution_ego[0], manifest.resolution_ego[1]);
    let third_res = (manifest.resolution_third[0], manifest.resolution_third[1]);
    for (i, step) in rec.steps.iter().enumerate() {
        if step.ego.timestamp_ns.abs_diff(step.third.timestamp_ns) > tol {
            out.push(Violation::Sync { step: i });
        }
        let a = &step.action;
        let finite = a.pose.x.is_finite()
            && a.pose.y.is_finite()
            && a.pose.theta.is_finite()
            && a.gripper_width.is_finite();
        if !finite {
            out.push(Violation::NonFinite { step: i });
        } else {
            if !(0.0..=manifest.w_max).contains(&a.gripper_width) {
                out.push(Violation::WidthOutOfRange { step: i });
            }
            if !(a.pose.theta > -PI && a.pose.theta <= PI) {
                out.push(Violation::AngleNotNormalized { step: i });
            }
        }
        if step.ego.role != ViewRole::Ego || !step.third.role.is_third() {
            out.push(Violation::WrongRole { step: i });
        }
        if step.ego.dims() != ego_res || step.third.dims() != third_res {
            out.push(Violation::WrongResolution { step: i });
        }
        if i > 0 {
            let prev = &rec.steps[i - 1];
            if step.ego.timestamp_ns <= prev.ego.timestamp_ns {
                out.push(Violation::EgoNotIncreasing { step: i });
            }
            if step.third.timestamp_ns < prev.third.timestamp_ns {
                out.push(Violation::ThirdDecreasing { step: i });
            }
        }
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::types::{ActionLabel, Embodiment, Step};

    pub(crate) fn manifest() -> SessionManifest {
        SessionManifest {
            session_id: "unit".into(),
            fps_ego: 30.0,
            fps_third: 30.0,
            resolution_ego: [4, 4],
            resolution_third: [6, 4],
            seed: 7,
            task_id: "cup-place".into(),
            embodiment: Embodiment::Human,
            w_max: 0.08,
            scale_m_per_px: 0.0025,
            schema_version: 1,
        }
    }

    fn session(n: usize) -> Session {
        let m = manifest();
        let dt = m.ego_interval_ns();
        let ego = (0..n)
            .map(|i| {
                let px = (0..48).map(|j| (i * 31 + j * 7) as u8).collect();
                Frame::new(i as u64 * dt, 4, 4, px, ViewRole::Ego).unwrap()
            })
            .collect();
        let third = (0..n)
            .map(|i| {
                let px = (0..72).map(|j| (i * 13 + j * 3) as u8).collect();
                Frame::new(i as u64 * dt + 17, 6, 4, px, ViewRole::ThirdHuman).unwrap()
            })
            .collect();
        let poses = (0..n)
            .map(|i| PoseRow {
                t_ns: i as u64 * dt,
                pose: Pose2::new(0.1 * i as f64, 1.0 / 3.0, -0.25 * i as f64),
                gripper_width: 0.08 - 0.001 * i as f64,
            })
            .collect();
        Session {
            manifest: m,
            ego,
            third,
            background: Frame::filled(0, 6, 4, [200, 200, 200], ViewRole::BackgroundRef),
            poses,
            episodes: vec![EpisodeSpan {
                episode_id: "ep0".into(),
                start_ns: 0,
                end_ns: (n as u64 - 1) * dt,
            }],
        }
    }

    fn dir_bytes(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
        let mut out = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    out.push((
                        p.strip_prefix(dir).unwrap().to_path_buf(),
                        fs::read(&p).unwrap(),
                    ));
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn empty_session_is_rejected() {
        let mut s = session(1);
        s.ego.clear();
        let tmp = tempfile::tempdir().unwrap();
        let err = write_session(tmp.path(), &s).unwrap_err();
        assert_eq!(err.to_string(), "empty session");
    }

    #[test]
    fn single_frame_session_is_byte_deterministic() {
        let s = session(1);
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_session(a.path(), &s).unwrap();
        write_session(b.path(), &s).unwrap();
        assert_eq!(dir_bytes(a.path()), dir_bytes(b.path()));
    }

    #[test]
    fn ten_frame_roundtrip_field_by_field() {
        let s = session(10);
        let tmp = tempfile::tempdir().unwrap();
        write_session(tmp.path(), &s).unwrap();
        assert_eq!(
            list_timestamped(&tmp.path().join(EGO_DIR), "ppm")
                .unwrap()
                .len(),
            10
        );
        assert_eq!(
            list_timestamped(&tmp.path().join(THIRD_DIR), "ppm")
                .unwrap()
                .len(),
            10
        );
        let back = read_session(tmp.path()).unwrap();
        assert_eq!(back.manifest, s.manifest);
        assert_eq!(back.ego, s.ego);
        assert_eq!(back.third, s.third);
        assert_eq!(back.background, s.background);
        assert_eq!(back.poses, s.poses);
        assert_eq!(back.episodes, s.episodes);
    }

    #[test]
    fn manifest_keys_are_sorted() {
        let text = to_sorted_json(&manifest()).unwrap();
        let keys: Vec<&str> = text
            .lines()
            .filter_map(|l| l.trim().strip_prefix('"'))
            .filter_map(|l| l.split('"').next())
            .collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(keys.len(), 11);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let mut s = session(3);
        s.third[1] = Frame::filled(s.third[1].timestamp_ns, 5, 4, [0; 3], ViewRole::ThirdHuman);
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_session(tmp.path(), &s),
            Err(Error::Inconsistent(_))
        ));
    }

    #[test]
    fn fps_mismatch_is_rejected() {
        let mut s = session(5);
        s.manifest.fps_ego = 60.0;
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            write_session(tmp.path(), &s),
            Err(Error::Inconsistent(_))
        ));
    }

    #[test]
    fn missing_pose_log() {
        let tmp = tempfile::tempdir().unwrap();
        write_session(tmp.path(), &session(2)).unwrap();
        fs::remove_file(tmp.path().join(POSES_FILE)).unwrap();
        let err = read_session(tmp.path()).unwrap_err();
        assert!(err.to_string().starts_with("missing pose log"), "{err}");
    }

    #[test]
    fn missing_manifest() {
        let tmp = tempfile::tempdir().unwrap();
        assert!(matches!(
            read_session(tmp.path()),
            Err(Error::MissingManifest(_))
        ));
    }

    #[test]
    fn schema_version_two_is_unsupported() {
        let tmp = tempfile::tempdir().unwrap();
        write_session(tmp.path(), &session(2)).unwrap();
        let mut m = manifest();
        m.schema_version = 2;
        write_json(&tmp.path().join(MANIFEST_FILE), &m).unwrap();
        let err = read_session(tmp.path()).unwrap_err();
        assert!(err.to_string().starts_with("unsupported schema"), "{err}");
    }

    #[test]
    fn corrupt_frame_is_reported() {
        let tmp = tempfile::tempdir().unwrap();
        let s = session(2);
        write_session(tmp.path(), &s).unwrap();
        let name = frame_file_name(s.ego[1].timestamp_ns, "ppm");
        fs::write(tmp.path().join(EGO_DIR).join(name), b"P6\n4 4\n255\n").unwrap();
        assert!(matches!(
            read_session(tmp.path()),
            Err(Error::CorruptFrame { .. })
        ));
    }

    pub(crate) fn episode(n: usize) -> EpisodeRecord {
        let s = session(n);
        let steps = s
            .ego
            .iter()
            .zip(&s.third)
            .zip(&s.poses)
            .map(|((e, t), p)| Step {
                ego: e.clone(),
                third: t.clone(),
                action: ActionLabel {
                    pose: s.poses[0].pose.between(&p.pose),
                    gripper_width: p.gripper_width,
                },
            })
            .collect();
        EpisodeRecord {
            episode_id: "ep0".into(),
            steps,
            embodiment: Embodiment::Human,
            task_id: "cup-place".into(),
            seed: 7,
        }
    }

    #[test]
    fn well_formed_episode_has_no_violations() {
        assert_eq!(validate_episode(&episode(6), &manifest()), vec![]);
    }

    #[test]
    fn full_interval_offset_is_a_sync_violation() {
        let m = manifest();
        let mut rec = episode(6);
        let t = rec.steps[3].ego.timestamp_ns + m.slower_interval_ns();
        rec.steps[3].third.timestamp_ns = t;
        // Keep the third stream non-decreasing so only the sync check fires.
        for s in &mut rec.steps[4..] {
            s.third.timestamp_ns = s.third.timestamp_ns.max(t);
        }
        let v: Vec<String> = validate_episode(&rec, &m)
            .iter()
            .map(|v| v.to_string())
            .collect();
        assert_eq!(v, vec!["sync violation at step 3".to_string()]);
    }

    #[test]
    fn width_above_w_max_is_reported() {
        let m = manifest();
        let mut rec = episode(4);
        rec.steps[2].action.gripper_width = m.w_max + 0.01;
        let v = validate_episode(&rec, &m);
        assert_eq!(v.len(), 1);
        assert!(v[0].to_string().starts_with("width out of range"));
    }

    mod prop {
        use super::*;
        use proptest::prelude::*;

        #[derive(Debug, Clone)]
        enum Mutation {
            None,
            Width(usize, f64),
            Theta(usize, f64),
            ThirdShift(usize, u64),
            FirstPose(f64),
            Clear,
        }

        fn mutation() -> impl Strategy<Value = Mutation> {
            prop_oneof![
                Just(Mutation::None),
                (0usize..6, -0.2f64..0.3).prop_map(|(i, w)| Mutation::Width(i, w)),
                (0usize..6, -10.0f64..10.0).prop_map(|(i, t)| Mutation::Theta(i, t)),
                (0usize..6, 0u64..60_000_000).prop_map(|(i, d)| Mutation::ThirdShift(i, d)),
                (-0.01f64..0.01).prop_map(Mutation::FirstPose),
                Just(Mutation::Clear),
            ]
        }

        proptest! {
            #[test]
            fn violations_empty_iff_invariants_hold(m in mutation()) {
                let man = manifest();
                let mut rec = episode(6);
                match m {
                    Mutation::None => {}
                    Mutation::Width(i, w) => rec.steps[i].action.gripper_width = w,
                    Mutation::Theta(i, t) => rec.steps[i].action.pose.theta = t,
                    Mutation::ThirdShift(i, d) => {
                        for s in &mut rec.steps[i..] {
                            s.third.timestamp_ns += d;
                        }
                    }
                    Mutation::FirstPose(x) => rec.steps[0].action.pose.x = x,
                    Mutation::Clear => rec.steps.clear(),
                }
                // Independent restatement of the invariants.
                let tol = man.sync_tolerance_ns();
                let holds = !rec.steps.is_empty()
                    && rec.steps[0].action.pose.x.abs() <= 1e-9
                    && rec.steps[0].action.pose.y.abs() <= 1e-9
                    && rec.steps[0].action.pose.theta.abs() <= 1e-9
                    && rec.steps.iter().all(|s| {
                        let th = s.action.pose.theta;
                        s.ego.timestamp_ns.abs_diff(s.third.timestamp_ns) <= tol
                            && s.action.gripper_width >= 0.0
                            && s.action.gripper_width <= man.w_max
                            && th > -std::f64::consts::PI
                            && th <= std::f64::consts::PI
                    });
                prop_assert_eq!(validate_episode(&rec, &man).is_empty(), holds);
            }
        }
    }
}
