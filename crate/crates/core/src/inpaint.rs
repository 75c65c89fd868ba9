//! Background-reference inpainting of embodiment pixels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::segment::PRED_MASKS_DIR;
use crate::session::{self, BACKGROUND_FILE, THIRD_DIR};
use crate::types::{Frame, Mask, ViewRole};

pub const THIRD_MASKED_DIR: &str = "third_masked";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskSource {
    Pred,
    Oracle,
}

impl MaskSource {
    pub fn dir_name(self) -> &'static str {
        match self {
            MaskSource::Pred => PRED_MASKS_DIR,
            MaskSource::Oracle => crate::sim::MASKS_DIR,
        }
    }
}

impl std::str::FromStr for MaskSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pred" => Ok(MaskSource::Pred),
            "oracle" => Ok(MaskSource::Oracle),
            _ => Err(Error::malformed("mask source", s)),
        }
    }
}

/// Replace masked pixels with the background. With `feather_px > 0`,
/// unmasked pixels within `feather_px` (Chebyshev) of the mask are blended
/// linearly by distance.
pub fn inpaint_frame(
    frame: &Frame,
    mask: &Mask,
    background: &Frame,
    feather_px: u32,
) -> Result<Frame> {
    if frame.dims() != mask.dims() || frame.dims() != background.dims() {
        return Err(Error::DimensionMismatch(format!(
            "frame {:?}, mask {:?}, background {:?}",
            frame.dims(),
            mask.dims(),
            background.dims()
        )));
    }
    if background.role != ViewRole::BackgroundRef {
        return Err(Error::InvalidConfig(
            "background must be a background reference".into(),
        ));
    }
    let mut out = frame.clone().with_role(ViewRole::ThirdMasked);
    {
        let px = out.pixels_mut();
        let bg = background.pixels();
        for (i, &m) in mask.bits().iter().enumerate() {
            if m {
                px[3 * i..3 * i + 3].copy_from_slice(&bg[3 * i..3 * i + 3]);
            }
        }
    }
    if feather_px == 0 {
        return Ok(out);
    }
    let dist = chebyshev_distance(mask, feather_px);
    let px = out.pixels_mut();
    let bg = background.pixels();
    let f = feather_px as f64 + 1.0;
    for (i, &d) in dist.iter().enumerate() {
        if d == 0 || d > feather_px {
            continue;
        }
        // Weight of the original pixel grows from 1/(f) at the boundary to 1.
        let a = d as f64 / f;
        for c in 0..3 {
            let v = a * px[3 * i + c] as f64 + (1.0 - a) * bg[3 * i + c] as f64;
            px[3 * i + c] = v.round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Chebyshev distance to the nearest masked pixel, saturating at `cap + 1`.
fn chebyshev_distance(mask: &Mask, cap: u32) -> Vec<u32> {
    let (w, h) = mask.dims();
    let mut dist: Vec<u32> = mask
        .bits()
        .iter()
        .map(|&b| if b { 0 } else { cap + 1 })
        .collect();
    let mut cur = mask.clone();
    for d in 1..=cap {
        cur = crate::segment::dilate(&cur, 1);
        for (i, &b) in cur.bits().iter().enumerate() {
            if b && dist[i] > d {
                dist[i] = d;
            }
        }
    }
    debug_assert_eq!(dist.len(), (w * h) as usize);
    dist
}

/// Inpaint a session's third stream into `third_masked/`.
pub fn inpaint_session(dir: &Path, source: MaskSource, feather_px: u32) -> Result<usize> {
    let manifest = session::read_manifest(dir)?;
    let frames = session::read_frames(&dir.join(THIRD_DIR), manifest.embodiment.third_role())?;
    let masks: std::collections::BTreeMap<u64, Mask> =
        session::read_masks(&dir.join(source.dir_name()))?
            .into_iter()
            .collect();
    let bg = session::read_frame(&dir.join(BACKGROUND_FILE), 0, ViewRole::BackgroundRef)?;
    let mut out = Vec::with_capacity(frames.len());
    for f in &frames {
        let m = masks
            .get(&f.timestamp_ns)
            .ok_or(Error::MissingMask(f.timestamp_ns))?;
        out.push(inpaint_frame(f, m, &bg, feather_px)?);
    }
    session::write_frames(&dir.join(THIRD_MASKED_DIR), &out)?;
    Ok(out.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(px: &[[u8; 3]], w: u32, role: ViewRole) -> Frame {
        let h = px.len() as u32 / w;
        Frame::new(0, w, h, px.concat(), role).unwrap()
    }

    #[test]
    fn two_by_two_select() {
        let (a, b, c, d) = ([1, 1, 1], [2, 2, 2], [3, 3, 3], [4, 4, 4]);
        let (e, f, g, h) = ([5, 5, 5], [6, 6, 6], [7, 7, 7], [8, 8, 8]);
        let fr = frame(&[a, b, c, d], 2, ViewRole::ThirdHuman);
        let bg = frame(&[e, f, g, h], 2, ViewRole::BackgroundRef);
        let m = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        let out = inpaint_frame(&fr, &m, &bg, 0).unwrap();
        assert_eq!(out.pixels(), [e, b, c, h].concat().as_slice());
        assert_eq!(out.role, ViewRole::ThirdMasked);
    }

    #[test]
    fn empty_and_full_masks() {
        let fr = Frame::filled(3, 4, 3, [9, 8, 7], ViewRole::ThirdHuman);
        let bg = Frame::filled(0, 4, 3, [1, 2, 3], ViewRole::BackgroundRef);
        assert_eq!(
            inpaint_frame(&fr, &Mask::empty(4, 3), &bg, 0)
                .unwrap()
                .pixels(),
            fr.pixels()
        );
        assert_eq!(
            inpaint_frame(&fr, &Mask::full(4, 3), &bg, 0)
                .unwrap()
                .pixels(),
            bg.pixels()
        );
    }

    #[test]
    fn rejects_mismatch() {
        let fr = Frame::filled(0, 4, 3, [0; 3], ViewRole::ThirdHuman);
        let bg = Frame::filled(0, 4, 4, [0; 3], ViewRole::BackgroundRef);
        assert!(matches!(
            inpaint_frame(&fr, &Mask::empty(4, 3), &bg, 0),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn feather_blends_near_boundary_only() {
        let fr = Frame::filled(0, 9, 1, [200; 3], ViewRole::ThirdHuman);
        let bg = Frame::filled(0, 9, 1, [0; 3], ViewRole::BackgroundRef);
        let mut m = Mask::empty(9, 1);
        m.set(0, 0, true);
        let out = inpaint_frame(&fr, &m, &bg, 3).unwrap();
        let row: Vec<u8> = (0..9).map(|x| out.get(x, 0)[0]).collect();
        assert_eq!(row, vec![0, 50, 100, 150, 200, 200, 200, 200, 200]);
    }
}
