//! Action labels: episode-relative poses from the pose log and gripper
//! width from the two jaw markers in the ego view.

use crate::error::{Error, Result};
use crate::segment::Components;
use crate::session::PoseRow;
use crate::types::{Frame, Mask, Pose2, Rgb};

/// Per-channel tolerance when keying marker colors.
pub const MARKER_COLOR_TOLERANCE: u8 = 40;

/// `T0⁻¹ ∘ Tt` for every row in `[start_ns, end_ns]`. The start row may be
/// off by at most half the log's median interval; its own entry is exactly
/// the identity.
pub fn relative_poses(rows: &[PoseRow], start_ns: u64, end_ns: u64) -> Result<Vec<(u64, Pose2)>> {
    let start = start_index(rows, start_ns)?;
    let t0 = rows[start].pose;
    Ok(rows[start..]
        .iter()
        .take_while(|r| r.t_ns <= end_ns.max(rows[start].t_ns))
        .enumerate()
        .map(|(k, r)| {
            (
                r.t_ns,
                if k == 0 {
                    Pose2::IDENTITY
                } else {
                    t0.between(&r.pose)
                },
            )
        })
        .collect())
}

fn start_index(rows: &[PoseRow], start_ns: u64) -> Result<usize> {
    if rows.is_empty() {
        return Err(Error::StartNotCovered(start_ns));
    }
    let i = rows.partition_point(|r| r.t_ns < start_ns);
    let best = [i.checked_sub(1), (i < rows.len()).then_some(i)]
        .into_iter()
        .flatten()
        .min_by_key(|&j| rows[j].t_ns.abs_diff(start_ns))
        .expect("rows non-empty");
    let d = rows[best].t_ns.abs_diff(start_ns);
    if d == 0 {
        return Ok(best);
    }
    let mut gaps: Vec<u64> = rows.windows(2).map(|w| w[1].t_ns - w[0].t_ns).collect();
    if gaps.is_empty() {
        return Err(Error::StartNotCovered(start_ns));
    }
    gaps.sort_unstable();
    if d * 2 <= gaps[gaps.len() / 2] {
        Ok(best)
    } else {
        Err(Error::StartNotCovered(start_ns))
    }
}

/// Distance between the two marker blobs, in meters, clamped to `[0, w_max]`.
pub fn width_from_markers(
    frame: &Frame,
    colors: [Rgb; 2],
    scale_m_per_px: f64,
    w_max: f64,
) -> Result<f64> {
    let a = marker_centroid(frame, colors[0])?;
    let b = marker_centroid(frame, colors[1])?;
    Ok(((a.0 - b.0).hypot(a.1 - b.1) * scale_m_per_px).clamp(0.0, w_max))
}

fn marker_centroid(frame: &Frame, color: Rgb) -> Result<(f64, f64)> {
    let (w, h) = frame.dims();
    let bits = frame
        .pixels()
        .chunks_exact(3)
        .map(|p| (0..3).all(|c| p[c].abs_diff(color[c]) <= MARKER_COLOR_TOLERANCE))
        .collect();
    let mask = Mask::new(w, h, bits).expect("frame dimensions");
    let comps = Components::label(&mask);
    if comps.count != 1 {
        return Err(Error::MarkerDetection(format!(
            "expected one blob of color {color:?}, found {}",
            comps.count
        )));
    }
    Ok(comps.centroids[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ViewRole;
    use proptest::prelude::*;

    fn rows(poses: &[Pose2]) -> Vec<PoseRow> {
        poses
            .iter()
            .enumerate()
            .map(|(i, &pose)| PoseRow {
                t_ns: i as u64 * 100,
                pose,
                gripper_width: 0.05,
            })
            .collect()
    }

    #[test]
    fn constant_log_gives_identity() {
        let p = Pose2::new(0.3, -0.2, 1.0);
        for (_, r) in relative_poses(&rows(&[p; 5]), 0, 400).unwrap() {
            assert!(r.translation_norm() < 1e-12 && r.theta.abs() < 1e-12);
        }
    }

    #[test]
    fn world_step_maps_to_local_axis() {
        let half_pi = std::f64::consts::FRAC_PI_2;
        let r = relative_poses(
            &rows(&[Pose2::new(1.0, 2.0, half_pi), Pose2::new(1.0, 3.0, half_pi)]),
            0,
            100,
        )
        .unwrap();
        assert_eq!(r[0].1, Pose2::IDENTITY);
        let rel = r[1].1;
        // Matrix oracle: R(-pi/2) * (0, 1).
        let (s, c) = (-half_pi).sin_cos();
        let expect = [c * 0.0 - s * 1.0, s * 0.0 + c * 1.0];
        assert!((rel.x - expect[0]).abs() < 1e-12 && (rel.y - expect[1]).abs() < 1e-12);
        assert!((rel.x - 1.0).abs() < 1e-12 && rel.y.abs() < 1e-12 && rel.theta.abs() < 1e-12);
    }

    #[test]
    fn start_must_be_covered() {
        let r = rows(&[Pose2::IDENTITY; 3]);
        assert!(relative_poses(&r, 40, 200).is_ok());
        assert!(matches!(
            relative_poses(&r, 1000, 2000),
            Err(Error::StartNotCovered(1000))
        ));
        assert!(matches!(
            relative_poses(&[], 0, 0),
            Err(Error::StartNotCovered(0))
        ));
    }

    fn dot(f: &mut Frame, cx: u32, cy: u32, color: Rgb) {
        for y in cy - 1..=cy + 1 {
            for x in cx - 1..=cx + 1 {
                f.set(x, y, color);
            }
        }
    }

    const COLORS: [Rgb; 2] = [[255, 0, 255], [0, 255, 255]];

    #[test]
    fn exact_width_arithmetic() {
        let mut f = Frame::filled(0, 32, 32, [200; 3], ViewRole::Ego);
        dot(&mut f, 10, 10, COLORS[0]);
        dot(&mut f, 10, 20, COLORS[1]);
        let w = width_from_markers(&f, COLORS, 0.005, 0.08).unwrap();
        assert!((w - 0.05).abs() < 1e-15);
    }

    #[test]
    fn coincident_markers_give_zero() {
        let mut f = Frame::filled(0, 16, 16, [200; 3], ViewRole::Ego);
        dot(&mut f, 8, 8, COLORS[0]);
        f.set(8, 8, COLORS[1]);
        assert_eq!(width_from_markers(&f, COLORS, 0.005, 0.08).unwrap(), 0.0);
    }

    #[test]
    fn blob_count_errors() {
        let mut f = Frame::filled(0, 32, 32, [200; 3], ViewRole::Ego);
        dot(&mut f, 5, 5, COLORS[0]);
        assert!(matches!(
            width_from_markers(&f, COLORS, 0.005, 0.08),
            Err(Error::MarkerDetection(_))
        ));
        dot(&mut f, 20, 20, COLORS[1]);
        dot(&mut f, 25, 5, COLORS[1]);
        assert!(width_from_markers(&f, COLORS, 0.005, 0.08).is_err());
    }

    proptest! {
        #[test]
        fn composition_law(
            a in (-1.0..1.0f64, -1.0..1.0f64, -3.0..3.0f64),
            b in (-1.0..1.0f64, -1.0..1.0f64, -3.0..3.0f64),
            c in (-1.0..1.0f64, -1.0..1.0f64, -3.0..3.0f64),
        ) {
            let p = [Pose2::new(a.0, a.1, a.2), Pose2::new(b.0, b.1, b.2), Pose2::new(c.0, c.1, c.2)];
            let r = relative_poses(&rows(&p), 0, 200).unwrap();
            let r12 = relative_poses(&rows(&p[1..]), 0, 100).unwrap()[1].1;
            let lhs = r[2].1;
            let rhs = r[1].1.compose(&r12);
            prop_assert!((lhs.x - rhs.x).abs() < 1e-12 && (lhs.y - rhs.y).abs() < 1e-12);
            prop_assert!(crate::types::normalize_angle(lhs.theta - rhs.theta).abs() < 1e-12);
            prop_assert!(lhs.theta > -std::f64::consts::PI && lhs.theta <= std::f64::consts::PI);
        }
    }
}
