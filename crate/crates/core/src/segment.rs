//! Embodiment segmentation of third-person frames.
//!
//! `Oracle` replays simulator ground truth. `BgSub` thresholds the difference
//! to a background reference, cleans it with morphology and tracks one
//! connected component through the session, seeded by operator prompts on a
//! single frame.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::session::{self, BACKGROUND_FILE, THIRD_DIR};
use crate::types::{Frame, Mask, ViewRole};

pub const PRED_MASKS_DIR: &str = "pred_masks";
pub const REPORT_FILE: &str = "segment_report.json";
pub const DEFAULT_THRESHOLD: u8 = 30;
pub const DEFAULT_MORPH_RADIUS: u32 = 2;
/// Consecutive frames without a tracked component tolerated before reporting.
pub const LOSS_TOLERANCE: usize = 5;
/// Max distance (px) from the tracked centroid to a component centroid.
pub const DEFAULT_GATE_PX: f64 = 15.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptSet {
    pub positive_points: Vec<(u32, u32)>,
    pub negative_points: Vec<(u32, u32)>,
    pub source_frame_ts: u64,
}

impl PromptSet {
    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        if self.positive_points.is_empty() {
            return Err(Error::MissingPrompts);
        }
        for &(x, y) in self.positive_points.iter().chain(&self.negative_points) {
            if x >= width || y >= height {
                return Err(Error::PromptOutOfBounds {
                    x,
                    y,
                    width,
                    height,
                });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Parse a prompt file; bounds are checked later against the frame.
    pub fn parse(text: &str) -> Result<Self> {
        let p: PromptSet =
            serde_json::from_str(text).map_err(|e| Error::malformed("prompts", e))?;
        if p.positive_points.is_empty() {
            return Err(Error::MissingPrompts);
        }
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SegmenterKind {
    Oracle,
    Bgsub,
}

impl std::str::FromStr for SegmenterKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "oracle" => Ok(SegmenterKind::Oracle),
            "bgsub" => Ok(SegmenterKind::Bgsub),
            _ => Err(Error::malformed("segmenter kind", s)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BgSubParams {
    pub threshold: u8,
    pub morph_radius: u32,
    pub gate_px: f64,
}

impl Default for BgSubParams {
    fn default() -> Self {
        BgSubParams {
            threshold: DEFAULT_THRESHOLD,
            morph_radius: DEFAULT_MORPH_RADIUS,
            gate_px: DEFAULT_GATE_PX,
        }
    }
}

impl BgSubParams {
    pub fn validate(&self) -> Result<()> {
        if !(1..=254).contains(&self.threshold) {
            return Err(Error::InvalidConfig("threshold must be in [1, 254]".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum SegmenterState {
    Oracle {
        masks: BTreeMap<u64, Mask>,
    },
    BgSub {
        background: Frame,
        params: BgSubParams,
        /// Tracked embodiment centroid, `None` until acquired.
        centroid: Option<(f64, f64)>,
        negatives: Vec<(f64, f64)>,
        prompted: bool,
    },
}

impl SegmenterState {
    pub fn oracle(masks: impl IntoIterator<Item = (u64, Mask)>) -> Self {
        SegmenterState::Oracle {
            masks: masks.into_iter().collect(),
        }
    }

    pub fn bgsub(background: Frame, params: BgSubParams) -> Result<Self> {
        params.validate()?;
        if background.role != ViewRole::BackgroundRef {
            return Err(Error::InvalidConfig(
                "background must be a background reference".into(),
            ));
        }
        Ok(SegmenterState::BgSub {
            background,
            params,
            centroid: None,
            negatives: Vec::new(),
            prompted: false,
        })
    }

    pub fn kind(&self) -> SegmenterKind {
        match self {
            SegmenterState::Oracle { .. } => SegmenterKind::Oracle,
            SegmenterState::BgSub { .. } => SegmenterKind::Bgsub,
        }
    }

    /// Segment one third-person frame. Returns an empty mask when the
    /// tracked component is not found.
    pub fn segment_frame(&mut self, frame: &Frame, prompts: Option<&PromptSet>) -> Result<Mask> {
        if !frame.role.is_third() {
            return Err(Error::InvalidConfig(
                "segmenter expects a third-person frame".into(),
            ));
        }
        match self {
            SegmenterState::Oracle { masks } => masks
                .get(&frame.timestamp_ns)
                .cloned()
                .ok_or(Error::MissingMask(frame.timestamp_ns)),
            SegmenterState::BgSub {
                background,
                params,
                centroid,
                negatives,
                prompted,
            } => {
                if frame.dims() != background.dims() {
                    return Err(Error::DimensionMismatch(format!(
                        "frame {:?} vs background {:?}",
                        frame.dims(),
                        background.dims()
                    )));
                }
                let (w, h) = frame.dims();
                let first = match prompts {
                    Some(p) => {
                        p.validate(w, h)?;
                        *negatives = p
                            .negative_points
                            .iter()
                            .map(|&(x, y)| (x as f64, y as f64))
                            .collect();
                        *prompted = true;
                        Some(p)
                    }
                    None if !*prompted => return Err(Error::MissingPrompts),
                    None => None,
                };
                let raw = diff_mask(frame, background, params.threshold);
                let cleaned =
                    morph_open(&morph_close(&raw, params.morph_radius), params.morph_radius);
                let labels = Components::label(&cleaned);

                let mut excluded = vec![false; labels.count];
                for n in negatives.iter_mut() {
                    if let Some(id) = labels.at(n.0.round() as u32, n.1.round() as u32) {
                        excluded[id] = true;
                        *n = labels.centroids[id];
                    }
                }

                let selected: Vec<usize> = if let Some(p) = first {
                    let mut ids: Vec<usize> = p
                        .positive_points
                        .iter()
                        .filter_map(|&(x, y)| labels.at(x, y))
                        .filter(|&id| !excluded[id])
                        .collect();
                    ids.sort_unstable();
                    ids.dedup();
                    ids
                } else if let Some(c) = *centroid {
                    labels
                        .track(c, params.gate_px, &excluded)
                        .into_iter()
                        .collect()
                } else {
                    Vec::new()
                };
                // A negative point swallowed by the tracked component is stale.
                negatives.retain(|n| {
                    labels
                        .at(n.0.round() as u32, n.1.round() as u32)
                        .is_none_or(|id| !selected.contains(&id))
                });

                let mut mask = Mask::empty(w, h);
                if selected.is_empty() {
                    if first.is_some() {
                        *centroid = None;
                    }
                    return Ok(mask);
                }
                let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
                for (i, bit) in mask.bits_mut().iter_mut().enumerate() {
                    if let Some(id) = labels.labels[i] {
                        if selected.contains(&id) {
                            *bit = true;
                            sx += (i as u32 % w) as f64;
                            sy += (i as u32 / w) as f64;
                            n += 1.0;
                        }
                    }
                }
                *centroid = Some((sx / n, sy / n));
                Ok(mask)
            }
        }
    }
}

/// Pixels where any channel differs from the background by more than `threshold`.
pub fn diff_mask(frame: &Frame, background: &Frame, threshold: u8) -> Mask {
    let (w, h) = frame.dims();
    let bits = frame
        .pixels()
        .chunks_exact(3)
        .zip(background.pixels().chunks_exact(3))
        .map(|(a, b)| (0..3).any(|c| a[c].abs_diff(b[c]) > threshold))
        .collect();
    Mask::new(w, h, bits).expect("dimensions match")
}

/// Square-element min or max filter; out-of-frame neighbors are ignored.
fn filter(mask: &Mask, radius: u32, dilate: bool) -> Mask {
    if radius == 0 {
        return mask.clone();
    }
    let (w, h) = mask.dims();
    let (w, h, r) = (w as usize, h as usize, radius as usize);
    let src = mask.bits();
    let mut tmp = vec![false; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for x in 0..w {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(w - 1);
            let win = &row[lo..=hi];
            tmp[y * w + x] = if dilate {
                win.iter().any(|&b| b)
            } else {
                win.iter().all(|&b| b)
            };
        }
    }
    let mut out = vec![false; w * h];
    for x in 0..w {
        for y in 0..h {
            let lo = y.saturating_sub(r);
            let hi = (y + r).min(h - 1);
            let mut acc = !dilate;
            for yy in lo..=hi {
                let b = tmp[yy * w + x];
                if dilate && b {
                    acc = true;
                    break;
                }
                if !dilate && !b {
                    acc = false;
                    break;
                }
            }
            out[y * w + x] = acc;
        }
    }
    Mask::new(w as u32, h as u32, out).expect("dimensions match")
}

pub fn dilate(mask: &Mask, radius: u32) -> Mask {
    filter(mask, radius, true)
}

pub fn erode(mask: &Mask, radius: u32) -> Mask {
    filter(mask, radius, false)
}

pub fn morph_close(mask: &Mask, radius: u32) -> Mask {
    erode(&dilate(mask, radius), radius)
}

pub fn morph_open(mask: &Mask, radius: u32) -> Mask {
    dilate(&erode(mask, radius), radius)
}

/// 8-connected component labeling.
pub struct Components {
    width: u32,
    pub labels: Vec<Option<usize>>,
    pub centroids: Vec<(f64, f64)>,
    pub sizes: Vec<usize>,
    pub count: usize,
}

impl Components {
    pub fn label(mask: &Mask) -> Components {
        let (w, h) = mask.dims();
        let (wu, hu) = (w as usize, h as usize);
        let bits = mask.bits();
        let mut labels = vec![None; wu * hu];
        let mut centroids = Vec::new();
        let mut sizes = Vec::new();
        let mut stack = Vec::new();
        for start in 0..wu * hu {
            if !bits[start] || labels[start].is_some() {
                continue;
            }
            let id = centroids.len();
            labels[start] = Some(id);
            stack.push(start);
            let (mut sx, mut sy, mut n) = (0usize, 0usize, 0usize);
            while let Some(i) = stack.pop() {
                let (x, y) = (i % wu, i / wu);
                sx += x;
                sy += y;
                n += 1;
                for ny in y.saturating_sub(1)..=(y + 1).min(hu - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(wu - 1) {
                        let j = ny * wu + nx;
                        if bits[j] && labels[j].is_none() {
                            labels[j] = Some(id);
                            stack.push(j);
                        }
                    }
                }
            }
            centroids.push((sx as f64 / n as f64, sy as f64 / n as f64));
            sizes.push(n);
        }
        let count = centroids.len();
        Components {
            width: w,
            labels,
            centroids,
            sizes,
            count,
        }
    }

    pub fn at(&self, x: u32, y: u32) -> Option<usize> {
        if x >= self.width {
            return None;
        }
        self.labels
            .get(y as usize * self.width as usize + x as usize)
            .copied()
            .flatten()
    }

    /// Component containing `c`, else the one with the nearest centroid
    /// within `gate` pixels.
    fn track(&self, c: (f64, f64), gate: f64, excluded: &[bool]) -> Option<usize> {
        // Containment of the tracked centroid outranks negative points.
        if c.0 >= 0.0 && c.1 >= 0.0 {
            if let Some(id) = self.at(c.0.round() as u32, c.1.round() as u32) {
                return Some(id);
            }
        }
        let mut best: Option<(usize, f64)> = None;
        for (id, &(x, y)) in self.centroids.iter().enumerate() {
            if excluded[id] {
                continue;
            }
            let d = (x - c.0).hypot(y - c.1);
            if d <= gate && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((id, d));
            }
        }
        best.map(|(id, _)| id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentReport {
    pub kind: SegmenterKind,
    pub n_frames: usize,
    pub n_empty: usize,
    /// Timestamps inside runs of more than `LOSS_TOLERANCE` consecutive misses.
    pub lost_timestamps: Vec<u64>,
}

/// Segment a whole third-person stream. BGSUB runs forward from the prompt
/// frame and backward from it for earlier frames.
pub fn segment_stream(
    frames: &[Frame],
    state: SegmenterState,
    prompts: Option<&PromptSet>,
) -> Result<(Vec<Mask>, SegmentReport)> {
    if frames.is_empty() {
        return Err(Error::EmptyStream);
    }
    let kind = state.kind();
    let mut masks: Vec<Option<Mask>> = vec![None; frames.len()];
    match kind {
        SegmenterKind::Oracle => {
            let mut st = state;
            for (i, f) in frames.iter().enumerate() {
                masks[i] = Some(st.segment_frame(f, None)?);
            }
        }
        SegmenterKind::Bgsub => {
            let p = prompts.ok_or(Error::MissingPrompts)?;
            let idx = frames
                .iter()
                .position(|f| f.timestamp_ns >= p.source_frame_ts)
                .unwrap_or(frames.len() - 1);
            let mut fwd = state;
            masks[idx] = Some(fwd.segment_frame(&frames[idx], Some(p))?);
            let mut bwd = fwd.clone();
            for i in idx + 1..frames.len() {
                masks[i] = Some(fwd.segment_frame(&frames[i], None)?);
            }
            for i in (0..idx).rev() {
                masks[i] = Some(bwd.segment_frame(&frames[i], None)?);
            }
        }
    }
    let masks: Vec<Mask> = masks
        .into_iter()
        .map(|m| m.expect("all frames segmented"))
        .collect();
    let mut lost = Vec::new();
    let mut run: Vec<u64> = Vec::new();
    let mut n_empty = 0;
    for (f, m) in frames.iter().zip(&masks) {
        if m.is_empty() {
            n_empty += 1;
            run.push(f.timestamp_ns);
        } else {
            if run.len() > LOSS_TOLERANCE {
                lost.extend_from_slice(&run);
            }
            run.clear();
        }
    }
    if run.len() > LOSS_TOLERANCE {
        lost.extend_from_slice(&run);
    }
    let report = SegmentReport {
        kind,
        n_frames: frames.len(),
        n_empty,
        lost_timestamps: lost,
    };
    Ok((masks, report))
}

/// Segment a session directory, writing `pred_masks/` and the report.
pub fn segment_session(
    dir: &Path,
    kind: SegmenterKind,
    prompts: Option<&PromptSet>,
    params: BgSubParams,
) -> Result<SegmentReport> {
    let manifest = session::read_manifest(dir)?;
    let frames = session::read_frames(&dir.join(THIRD_DIR), manifest.embodiment.third_role())?;
    let (masks, report) = match kind {
        SegmenterKind::Oracle => {
            let gt = session::read_masks(&dir.join(crate::sim::MASKS_DIR))?;
            segment_stream(&frames, SegmenterState::oracle(gt), None)?
        }
        SegmenterKind::Bgsub => {
            let loaded;
            let prompts = match prompts {
                Some(p) => p,
                None => {
                    let path = dir.join(crate::sim::PROMPTS_FILE);
                    if !path.exists() {
                        return Err(Error::MissingPrompts);
                    }
                    loaded = PromptSet::load(&path)?;
                    &loaded
                }
            };
            let bg = session::read_frame(&dir.join(BACKGROUND_FILE), 0, ViewRole::BackgroundRef)?;
            segment_stream(&frames, SegmenterState::bgsub(bg, params)?, Some(prompts))?
        }
    };
    let stamped: Vec<(u64, Mask)> = frames.iter().map(|f| f.timestamp_ns).zip(masks).collect();
    session::write_masks(&dir.join(PRED_MASKS_DIR), &stamped)?;
    session::write_json(&dir.join(REPORT_FILE), &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bg(w: u32, h: u32) -> Frame {
        Frame::filled(0, w, h, [100, 100, 100], ViewRole::BackgroundRef)
    }

    fn third(bg: &Frame) -> Frame {
        bg.clone().with_role(ViewRole::ThirdHuman)
    }

    fn prompts(pos: (u32, u32), neg: Vec<(u32, u32)>) -> PromptSet {
        PromptSet {
            positive_points: vec![pos],
            negative_points: neg,
            source_frame_ts: 0,
        }
    }

    #[test]
    fn identical_frame_gives_empty_mask() {
        let b = bg(20, 20);
        let mut s = SegmenterState::bgsub(b.clone(), BgSubParams::default()).unwrap();
        let m = s
            .segment_frame(&third(&b), Some(&prompts((5, 5), vec![])))
            .unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn shifted_block_is_segmented_exactly() {
        let b = bg(30, 30);
        let mut f = third(&b);
        for y in 8..18 {
            for x in 5..15 {
                f.set(x, y, [200, 200, 200]);
            }
        }
        let params = BgSubParams {
            morph_radius: 0,
            ..Default::default()
        };
        let mut s = SegmenterState::bgsub(b, params).unwrap();
        let m = s
            .segment_frame(&f, Some(&prompts((9, 10), vec![])))
            .unwrap();
        for y in 0..30 {
            for x in 0..30 {
                assert_eq!(m.get(x, y), (5..15).contains(&x) && (8..18).contains(&y));
            }
        }
    }

    #[test]
    fn negative_point_excludes_other_blob() {
        let b = bg(40, 20);
        let mut f = third(&b);
        for y in 5..12 {
            for x in 3..10 {
                f.set(x, y, [0, 0, 0]);
            }
            for x in 25..32 {
                f.set(x, y, [0, 0, 0]);
            }
        }
        let mut s = SegmenterState::bgsub(b, BgSubParams::default()).unwrap();
        let p = PromptSet {
            positive_points: vec![(5, 8)],
            negative_points: vec![(28, 8)],
            source_frame_ts: 0,
        };
        let m = s.segment_frame(&f, Some(&p)).unwrap();
        assert!(m.get(5, 8) && !m.get(28, 8));
        assert_eq!(m.count(), 49);
    }

    #[test]
    fn first_call_needs_prompts_and_bounds() {
        let b = bg(10, 10);
        let mut s = SegmenterState::bgsub(b.clone(), BgSubParams::default()).unwrap();
        assert!(matches!(
            s.segment_frame(&third(&b), None),
            Err(Error::MissingPrompts)
        ));
        assert!(matches!(
            s.segment_frame(&third(&b), Some(&prompts((10, 3), vec![]))),
            Err(Error::PromptOutOfBounds { x: 10, .. })
        ));
        let bad = BgSubParams {
            threshold: 0,
            ..Default::default()
        };
        assert!(SegmenterState::bgsub(b, bad).is_err());
    }

    #[test]
    fn tracking_follows_moving_blob() {
        let b = bg(40, 40);
        let mut s = SegmenterState::bgsub(b.clone(), BgSubParams::default()).unwrap();
        for step in 0..10u32 {
            let mut f = third(&b);
            for y in 10..20 {
                for x in step * 2 + 4..step * 2 + 12 {
                    f.set(x, y, [255, 0, 0]);
                }
            }
            let p = prompts((7, 15), vec![]);
            let m = s
                .segment_frame(&f, if step == 0 { Some(&p) } else { None })
                .unwrap();
            assert_eq!(m.count(), 80, "step {step}");
        }
    }

    #[test]
    fn components_are_eight_connected() {
        let m = Mask::new(
            3,
            3,
            vec![true, false, false, false, true, false, false, false, true],
        )
        .unwrap();
        assert_eq!(Components::label(&m).count, 1);
    }

    proptest! {
        #[test]
        fn raising_threshold_never_adds_pixels(
            seed in any::<u64>(), t1 in 1u8..254, dt in 0u8..100,
        ) {
            let t2 = t1.saturating_add(dt).min(254);
            let px: Vec<u8> = (0..8 * 8 * 3).map(|i| (seed.rotate_left(i as u32 % 64) as u8) ^ (i as u8)).collect();
            let f = Frame::new(0, 8, 8, px, ViewRole::ThirdHuman).unwrap();
            let b = bg(8, 8);
            let lo = diff_mask(&f, &b, t1);
            let hi = diff_mask(&f, &b, t2);
            for (a, c) in lo.bits().iter().zip(hi.bits()) {
                prop_assert!(!*c || *a);
            }
        }

        #[test]
        fn close_contains_and_open_is_contained(bits in proptest::collection::vec(any::<bool>(), 144), r in 0u32..3) {
            let m = Mask::new(12, 12, bits).unwrap();
            let c = morph_close(&m, r);
            let o = morph_open(&m, r);
            for i in 0..144 {
                prop_assert!(!m.bits()[i] || c.bits()[i]);
                prop_assert!(!o.bits()[i] || m.bits()[i]);
            }
        }
    }
}
