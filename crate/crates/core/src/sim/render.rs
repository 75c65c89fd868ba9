//! Per-pixel point-sampled renderer. Colors are hard; nothing is blended,
//! so masking and background substitution are exact.

use super::{SceneState, Shape, SimConfig};
use crate::types::{Embodiment, Frame, Mask, Pose2, Rgb, ViewRole};

pub const RING_OUTER_M: f64 = 0.045;
pub const RING_INNER_M: f64 = 0.033;
const BOTTLE_RADIUS_M: f64 = 0.025;
const HUMAN_THICKNESS_M: f64 = 0.08;
const HUMAN_HEAD_RADIUS_M: f64 = 0.09;
const ROBOT_THICKNESS_M: f64 = 0.05;
const ROBOT_JOINT_HALF_M: f64 = 0.03;
const JAW_HALF: [f64; 2] = [0.004, 0.012];
const BODY_CENTER_Y: f64 = -0.02;
const BODY_HALF: [f64; 2] = [0.05, 0.007];
const MARKER_RADIUS_M: f64 = 0.004;
/// Markers sit behind the jaw line, `width` apart.
pub const MARKER_OFFSET_Y_M: f64 = -0.018;

#[derive(Debug, Clone, Copy)]
pub struct Palette {
    pub table: Rgb,
    pub floor: Rgb,
    pub human: Rgb,
    pub robot: Rgb,
    pub target: Rgb,
    pub distractor: Rgb,
    pub slot: Rgb,
    pub bottle: Rgb,
    pub object: Rgb,
    pub gripper: Rgb,
    pub marker_left: Rgb,
    pub marker_right: Rgb,
}

pub const PALETTE: Palette = Palette {
    table: [198, 202, 206],
    floor: [70, 60, 55],
    human: [160, 110, 60],
    robot: [150, 152, 156],
    target: [40, 160, 70],
    distractor: [60, 90, 190],
    slot: [80, 80, 85],
    bottle: [120, 80, 40],
    object: [215, 45, 40],
    gripper: [45, 45, 50],
    marker_left: [255, 0, 255],
    marker_right: [0, 255, 255],
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Camera {
    /// Fixed overhead view of the whole table.
    Third,
    /// Wrist view, centered on and rotated with the gripper.
    Ego,
}

struct View {
    width: u32,
    height: u32,
    /// World point of the center of pixel (0, 0) and per-pixel steps.
    origin: [f64; 2],
    du: [f64; 2],
    dv: [f64; 2],
}

impl View {
    fn new(camera: Camera, state: &SceneState, cfg: &SimConfig) -> View {
        match camera {
            Camera::Third => {
                let sx = cfg.world_width_m / cfg.third_width_px as f64;
                let sy = cfg.world_height_m / cfg.third_height_px as f64;
                View {
                    width: cfg.third_width_px,
                    height: cfg.third_height_px,
                    origin: [0.5 * sx, cfg.world_height_m - 0.5 * sy],
                    du: [sx, 0.0],
                    dv: [0.0, -sy],
                }
            }
            Camera::Ego => {
                let n = cfg.ego_px as f64;
                let s = cfg.ego_crop_m / n;
                let g = state.gripper;
                let (sin, cos) = g.theta.sin_cos();
                let local0 = [(0.5 - n / 2.0) * s, (n / 2.0 - 0.5) * s];
                View {
                    width: cfg.ego_px,
                    height: cfg.ego_px,
                    origin: g.transform_point(local0),
                    du: [cos * s, sin * s],
                    dv: [sin * s, -cos * s],
                }
            }
        }
    }

    fn pixel_to_world(&self, u: u32, v: u32) -> [f64; 2] {
        let (u, v) = (u as f64, v as f64);
        [
            self.origin[0] + u * self.du[0] + v * self.dv[0],
            self.origin[1] + u * self.du[1] + v * self.dv[1],
        ]
    }

    /// Continuous pixel coordinates of a world point.
    fn world_to_pixel(&self, p: [f64; 2]) -> [f64; 2] {
        let d = [p[0] - self.origin[0], p[1] - self.origin[1]];
        let det = self.du[0] * self.dv[1] - self.du[1] * self.dv[0];
        [
            (d[0] * self.dv[1] - d[1] * self.dv[0]) / det,
            (self.du[0] * d[1] - self.du[1] * d[0]) / det,
        ]
    }

    /// Pixel range covering a world-space box, clipped to the view.
    fn pixel_range(&self, lo: [f64; 2], hi: [f64; 2]) -> Option<(u32, u32, u32, u32)> {
        let corners = [
            [lo[0], lo[1]],
            [hi[0], lo[1]],
            [lo[0], hi[1]],
            [hi[0], hi[1]],
        ];
        let mut umin = f64::INFINITY;
        let mut umax = f64::NEG_INFINITY;
        let mut vmin = f64::INFINITY;
        let mut vmax = f64::NEG_INFINITY;
        for c in corners {
            let [u, v] = self.world_to_pixel(c);
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        let u0 = (umin.floor() - 1.0).max(0.0);
        let v0 = (vmin.floor() - 1.0).max(0.0);
        let u1 = (umax.ceil() + 1.0).min(self.width as f64 - 1.0);
        let v1 = (vmax.ceil() + 1.0).min(self.height as f64 - 1.0);
        if u0 > u1 || v0 > v1 {
            return None;
        }
        Some((u0 as u32, u1 as u32, v0 as u32, v1 as u32))
    }
}

impl Camera {
    /// Pixel containing a world point, clamped into the view.
    pub fn world_to_pixel_clamped(
        self,
        p: [f64; 2],
        state: &SceneState,
        cfg: &SimConfig,
    ) -> (u32, u32) {
        let view = View::new(self, state, cfg);
        let [u, v] = view.world_to_pixel(p);
        (
            u.round().clamp(0.0, view.width as f64 - 1.0) as u32,
            v.round().clamp(0.0, view.height as f64 - 1.0) as u32,
        )
    }

    pub fn pixel_to_world(self, u: u32, v: u32, state: &SceneState, cfg: &SimConfig) -> [f64; 2] {
        View::new(self, state, cfg).pixel_to_world(u, v)
    }
}

#[derive(Debug, Clone, Copy)]
enum Prim {
    Disk { c: [f64; 2], r: f64 },
    Ring { c: [f64; 2], r_in: f64, r_out: f64 },
    Rect { pose: Pose2, half: [f64; 2] },
    Capsule { a: [f64; 2], b: [f64; 2], r: f64 },
}

impl Prim {
    fn contains(&self, p: [f64; 2]) -> bool {
        match *self {
            Prim::Disk { c, r } => dist2(p, c) <= r * r,
            Prim::Ring { c, r_in, r_out } => {
                let d = dist2(p, c);
                d <= r_out * r_out && d >= r_in * r_in
            }
            Prim::Rect { pose, half } => {
                let l = pose.inverse_transform_point(p);
                l[0].abs() <= half[0] && l[1].abs() <= half[1]
            }
            Prim::Capsule { a, b, r } => {
                let ab = [b[0] - a[0], b[1] - a[1]];
                let ap = [p[0] - a[0], p[1] - a[1]];
                let len2 = ab[0] * ab[0] + ab[1] * ab[1];
                let t = if len2 > 0.0 {
                    ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                dist2(p, [a[0] + t * ab[0], a[1] + t * ab[1]]) <= r * r
            }
        }
    }

    fn bounds(&self) -> ([f64; 2], [f64; 2]) {
        match *self {
            Prim::Disk { c, r } | Prim::Ring { c, r_out: r, .. } => {
                ([c[0] - r, c[1] - r], [c[0] + r, c[1] + r])
            }
            Prim::Rect { pose, half } => {
                let ext = half[0].hypot(half[1]);
                ([pose.x - ext, pose.y - ext], [pose.x + ext, pose.y + ext])
            }
            Prim::Capsule { a, b, r } => (
                [a[0].min(b[0]) - r, a[1].min(b[1]) - r],
                [a[0].max(b[0]) + r, a[1].max(b[1]) + r],
            ),
        }
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

struct Layer {
    prim: Prim,
    color: Rgb,
    embodiment: bool,
}

fn object_prim(shape: Shape, pose: Pose2) -> Prim {
    match shape {
        Shape::Disk { radius } => Prim::Disk {
            c: [pose.x, pose.y],
            r: radius,
        },
        Shape::Rect { half_w, half_h } => Prim::Rect {
            pose,
            half: [half_w, half_h],
        },
    }
}

fn embodiment_layers(state: &SceneState, out: &mut Vec<Layer>) {
    let joints = state.arm_joints();
    match state.embodiment {
        Embodiment::None => {}
        Embodiment::Human => {
            let color = PALETTE.human;
            out.push(Layer {
                prim: Prim::Disk {
                    c: [state.anchor.x, state.anchor.y + 0.03],
                    r: HUMAN_HEAD_RADIUS_M,
                },
                color,
                embodiment: true,
            });
            for seg in joints.windows(2) {
                out.push(Layer {
                    prim: Prim::Capsule {
                        a: seg[0],
                        b: seg[1],
                        r: HUMAN_THICKNESS_M / 2.0,
                    },
                    color,
                    embodiment: true,
                });
            }
        }
        Embodiment::Robot => {
            let color = PALETTE.robot;
            for seg in joints.windows(2) {
                out.push(Layer {
                    prim: Prim::Capsule {
                        a: seg[0],
                        b: seg[1],
                        r: ROBOT_THICKNESS_M / 2.0,
                    },
                    color,
                    embodiment: true,
                });
            }
            for j in &joints[..3] {
                out.push(Layer {
                    prim: Prim::Rect {
                        pose: Pose2::new(j[0], j[1], 0.0),
                        half: [ROBOT_JOINT_HALF_M; 2],
                    },
                    color,
                    embodiment: true,
                });
            }
        }
    }
}

fn scene_layers(state: &SceneState, camera: Camera) -> Vec<Layer> {
    let mut layers = Vec::new();
    if camera == Camera::Third {
        embodiment_layers(state, &mut layers);
    }
    let plain = |prim, color| Layer {
        prim,
        color,
        embodiment: false,
    };
    for c in &state.containers {
        let center = [c.pose.x, c.pose.y];
        let color = match (state.task, c.is_target) {
            (super::Task::SlotInsert, _) => PALETTE.slot,
            (_, true) => PALETTE.target,
            (_, false) => PALETTE.distractor,
        };
        layers.push(plain(
            Prim::Ring {
                c: center,
                r_in: RING_INNER_M,
                r_out: RING_OUTER_M,
            },
            color,
        ));
        if c.filled {
            layers.push(plain(
                Prim::Disk {
                    c: center,
                    r: BOTTLE_RADIUS_M,
                },
                PALETTE.bottle,
            ));
        }
    }
    for o in state.objects.iter().filter(|o| !o.held) {
        layers.push(plain(object_prim(o.shape, o.pose), o.color));
    }
    let g = state.gripper;
    let jaw_x = state.gripper_width / 2.0 + JAW_HALF[0];
    layers.push(plain(
        Prim::Rect {
            pose: g.compose(&Pose2::new(0.0, BODY_CENTER_Y, 0.0)),
            half: BODY_HALF,
        },
        PALETTE.gripper,
    ));
    for sx in [-1.0, 1.0] {
        layers.push(plain(
            Prim::Rect {
                pose: g.compose(&Pose2::new(sx * jaw_x, 0.0, 0.0)),
                half: JAW_HALF,
            },
            PALETTE.gripper,
        ));
    }
    for o in state.objects.iter().filter(|o| o.held) {
        layers.push(plain(object_prim(o.shape, o.pose), o.color));
    }
    if camera == Camera::Ego {
        for (sx, color) in [(-1.0, PALETTE.marker_left), (1.0, PALETTE.marker_right)] {
            layers.push(plain(
                Prim::Disk {
                    c: g.transform_point([sx * state.gripper_width / 2.0, MARKER_OFFSET_Y_M]),
                    r: MARKER_RADIUS_M,
                },
                color,
            ));
        }
    }
    layers
}

/// Render one view. The mask marks pixels owned by the embodiment and is
/// always empty for the ego view.
pub fn render(state: &SceneState, camera: Camera, cfg: &SimConfig) -> (Frame, Mask) {
    let view = View::new(camera, state, cfg);
    let role = match camera {
        Camera::Ego => ViewRole::Ego,
        Camera::Third => state.embodiment.third_role(),
    };
    let mut frame = Frame::filled(0, view.width, view.height, PALETTE.table, role);
    let mut mask = Mask::empty(view.width, view.height);
    if camera == Camera::Ego {
        for v in 0..view.height {
            for u in 0..view.width {
                let p = view.pixel_to_world(u, v);
                if p[0] < 0.0 || p[0] > cfg.world_width_m || p[1] < 0.0 || p[1] > cfg.world_height_m
                {
                    frame.set(u, v, PALETTE.floor);
                }
            }
        }
    }
    for layer in scene_layers(state, camera) {
        let (lo, hi) = layer.prim.bounds();
        let Some((u0, u1, v0, v1)) = view.pixel_range(lo, hi) else {
            continue;
        };
        for v in v0..=v1 {
            for u in u0..=u1 {
                if layer.prim.contains(view.pixel_to_world(u, v)) {
                    frame.set(u, v, layer.color);
                    mask.set(u, v, layer.embodiment);
                }
            }
        }
    }
    (frame, mask)
}

/// Static third-person background: the empty table.
pub fn render_background(cfg: &SimConfig) -> Frame {
    Frame::filled(
        0,
        cfg.third_width_px,
        cfg.third_height_px,
        PALETTE.table,
        ViewRole::BackgroundRef,
    )
}

/// 8x8 black and white code shown on the ego stream to mark session start.
const MARKER_CODE: u64 = 0xFF81_BDA5_A5BD_81FF ^ 0x0042_1818_2418_4200;

pub fn render_start_marker(width: u32, height: u32) -> Frame {
    let mut f = Frame::filled(0, width, height, [0, 0, 0], ViewRole::Ego);
    for v in 0..height {
        for u in 0..width {
            let cx = (u as u64 * 8 / width as u64).min(7);
            let cy = (v as u64 * 8 / height as u64).min(7);
            if MARKER_CODE >> (cy * 8 + cx) & 1 == 1 {
                f.set(u, v, [255, 255, 255]);
            }
        }
    }
    f
}
