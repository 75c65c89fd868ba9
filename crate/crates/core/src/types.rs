//! Domain types shared by every pipeline stage.

use std::f64::consts::{PI, TAU};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ViewRole {
    Ego,
    ThirdHuman,
    ThirdRobot,
    ThirdMasked,
    BackgroundRef,
}

impl ViewRole {
    pub fn is_third(self) -> bool {
        matches!(
            self,
            ViewRole::ThirdHuman | ViewRole::ThirdRobot | ViewRole::ThirdMasked
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Embodiment {
    Human,
    Robot,
    None,
}

impl Embodiment {
    /// Role carried by raw third-person frames recorded with this embodiment.
    pub fn third_role(self) -> ViewRole {
        match self {
            Embodiment::Robot => ViewRole::ThirdRobot,
            Embodiment::Human | Embodiment::None => ViewRole::ThirdHuman,
        }
    }
}

impl fmt::Display for Embodiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Embodiment::Human => "human",
            Embodiment::Robot => "robot",
            Embodiment::None => "none",
        })
    }
}

impl std::str::FromStr for Embodiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "human" => Ok(Embodiment::Human),
            "robot" => Ok(Embodiment::Robot),
            "none" => Ok(Embodiment::None),
            other => Err(Error::InvalidConfig(format!(
                "unknown embodiment {other:?}"
            ))),
        }
    }
}

/// Timestamped 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub timestamp_ns: u64,
    width: u32,
    height: u32,
    pixels: Vec<u8>,
    pub role: ViewRole,
}

impl Frame {
    pub fn new(
        timestamp_ns: u64,
        width: u32,
        height: u32,
        pixels: Vec<u8>,
        role: ViewRole,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch(format!(
                "frame dimensions must be positive, got {width}x{height}"
            )));
        }
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} frame needs {expected} bytes, got {}",
                pixels.len()
            )));
        }
        Ok(Frame {
            timestamp_ns,
            width,
            height,
            pixels,
            role,
        })
    }

    pub fn filled(timestamp_ns: u64, width: u32, height: u32, color: Rgb, role: ViewRole) -> Self {
        assert!(width > 0 && height > 0, "frame dimensions must be positive");
        let pixels = color
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Frame {
            timestamp_ns,
            width,
            height,
            pixels,
            role,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> Rgb {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: Rgb) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn with_role(mut self, role: ViewRole) -> Self {
        self.role = role;
        self
    }

    pub fn with_timestamp(mut self, timestamp_ns: u64) -> Self {
        self.timestamp_ns = timestamp_ns;
        self
    }
}

/// Binary embodiment mask; `true` marks an embodiment pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::DimensionMismatch(format!(
                "mask dimensions must be positive, got {width}x{height}"
            )));
        }
        if bits.len() != width as usize * height as usize {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} mask needs {} bits, got {}",
                width as usize * height as usize,
                bits.len()
            )));
        }
        Ok(Mask {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn full(width: u32, height: u32) -> Self {
        Mask {
            width,
            height,
            bits: vec![true; width as usize * height as usize],
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn bits_mut(&mut self) -> &mut [bool] {
        &mut self.bits
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: bool) {
        self.bits[y as usize * self.width as usize + x as usize] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Mask) -> f64 {
        assert_eq!(self.dims(), other.dims(), "iou of mismatched masks");
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }
}

/// Normalize an angle to (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    if theta > -PI && theta <= PI {
        return theta;
    }
    let a = theta.rem_euclid(TAU);
    if a > PI {
        a - TAU
    } else {
        a
    }
}

/// Planar rigid transform (SE(2)).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2 {
    pub const IDENTITY: Pose2 = Pose2 {
        x: 0.0,
        y: 0.0,
        theta: 0.0,
    };

    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Pose2 {
            x,
            y,
            theta: normalize_angle(theta),
        }
    }

    /// `self ∘ other`: apply `other` in the frame of `self`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -(c * self.x + s * self.y),
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// `self⁻¹ ∘ other`: `other` expressed in the frame of `self`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        self.inverse().compose(other)
    }

    /// Map a point from this frame to the parent frame.
    pub fn transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [self.x + c * p[0] - s * p[1], self.y + s * p[0] + c * p[1]]
    }

    /// Map a point from the parent frame into this frame.
    pub fn inverse_transform_point(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (p[0] - self.x, p[1] - self.y);
        [c * dx + s * dy, -s * dx + c * dy]
    }

    pub fn translation_norm(&self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Episode-relative gripper pose plus gripper width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionLabel {
    pub pose: Pose2,
    pub gripper_width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub ego: Frame,
    pub third: Frame,
    pub action: ActionLabel,
}

/// Synchronized (ego, processed third, action) triples of one demonstration.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub steps: Vec<Step>,
    pub embodiment: Embodiment,
    pub task_id: String,
    pub seed: u64,
}

pub const SCHEMA_VERSION: u32 = 1;

/// Default maximum gripper opening in meters.
pub const DEFAULT_W_MAX: f64 = 0.08;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: String,
    pub fps_ego: f64,
    pub fps_third: f64,
    pub resolution_ego: [u32; 2],
    pub resolution_third: [u32; 2],
    pub seed: u64,
    pub task_id: String,
    pub embodiment: Embodiment,
    pub w_max: f64,
    pub scale_m_per_px: f64,
    pub schema_version: u32,
}

impl SessionManifest {
    pub fn ego_interval_ns(&self) -> u64 {
        interval_ns(self.fps_ego)
    }

    pub fn third_interval_ns(&self) -> u64 {
        interval_ns(self.fps_third)
    }

    /// Frame interval of the slower of the two streams.
    pub fn slower_interval_ns(&self) -> u64 {
        self.ego_interval_ns().max(self.third_interval_ns())
    }

    /// Largest ego/third offset a synchronized pair may have: half the
    /// slower interval plus the jitter allowance of both streams.
    pub fn sync_tolerance_ns(&self) -> u64 {
        sync_tolerance_ns(self.slower_interval_ns())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::UnsupportedSchema(self.schema_version));
        }
        if !(self.fps_ego > 0.0 && self.fps_third > 0.0) {
            return Err(Error::Inconsistent("fps values must be positive".into()));
        }
        if self.resolution_ego.contains(&0) || self.resolution_third.contains(&0) {
            return Err(Error::Inconsistent("resolutions must be positive".into()));
        }
        if !(self.w_max > 0.0 && self.scale_m_per_px > 0.0) {
            return Err(Error::Inconsistent(
                "w_max and scale_m_per_px must be positive".into(),
            ));
        }
        Ok(())
    }
}

pub fn interval_ns(fps: f64) -> u64 {
    (1e9 / fps).round() as u64
}

/// Each stream's timestamp jitter is clamped to an eighth of the slower
/// interval, so a nearest pairing never exceeds half that interval plus
/// twice the clamp.
pub fn sync_tolerance_ns(slower_interval_ns: u64) -> u64 {
    slower_interval_ns / 2 + 2 * jitter_clamp_ns(slower_interval_ns)
}

pub fn jitter_clamp_ns(slower_interval_ns: u64) -> u64 {
    slower_interval_ns / 8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn angle_normalization_range() {
        assert_eq!(normalize_angle(PI), PI);
        assert_eq!(normalize_angle(-PI), PI);
        assert!((normalize_angle(3.0 * PI / 2.0) + PI / 2.0).abs() < 1e-15);
        assert_eq!(normalize_angle(0.0), 0.0);
    }

    #[test]
    fn pose_inverse_is_identity() {
        let p = Pose2::new(0.3, -1.2, 2.5);
        let id = p.compose(&p.inverse());
        assert!(id.translation_norm() < 1e-15);
        assert!(id.theta.abs() < 1e-15);
    }

    #[test]
    fn frame_rejects_bad_length() {
        assert!(Frame::new(0, 2, 2, vec![0; 11], ViewRole::Ego).is_err());
        assert!(Frame::new(0, 0, 2, vec![], ViewRole::Ego).is_err());
        assert!(Frame::new(0, 2, 2, vec![0; 12], ViewRole::Ego).is_ok());
    }

    #[test]
    fn iou_basics() {
        let a = Mask::new(2, 1, vec![true, false]).unwrap();
        let b = Mask::new(2, 1, vec![true, true]).unwrap();
        assert_eq!(a.iou(&b), 0.5);
        assert_eq!(Mask::empty(3, 3).iou(&Mask::empty(3, 3)), 1.0);
    }
}
