//! Scripted expert: approach, close, transport, open.

use super::{success, Command, SceneState, MAX_STEP_M};
use crate::types::{ActionLabel, Pose2};

const ARRIVED_M: f64 = 1e-9;

/// Step `from` toward `to` by at most the translation cap.
fn step_toward(from: Pose2, to: [f64; 2]) -> Pose2 {
    let d = [to[0] - from.x, to[1] - from.y];
    let n = d[0].hypot(d[1]);
    if n <= MAX_STEP_M {
        Pose2::new(to[0], to[1], from.theta)
    } else {
        let s = MAX_STEP_M / n;
        Pose2::new(from.x + d[0] * s, from.y + d[1] * s, from.theta)
    }
}

/// Next absolute command for the current state.
pub fn expert_command(state: &SceneState) -> Command {
    let g = state.gripper;
    let hold = Command {
        pose: g,
        width: state.gripper_width,
    };
    if success(state) {
        return hold;
    }
    let obj = state.task_object();
    if let Some(off) = state.hold_offset {
        let t = state.target();
        let o = g.compose(&Pose2::new(off[0], off[1], 0.0));
        let d = (o.x - t.pose.x).hypot(o.y - t.pose.y);
        if d <= ARRIVED_M {
            return Command {
                pose: g,
                width: state.w_max,
            };
        }
        // Gripper pose that puts the held object on the container center.
        let r = Pose2::new(0.0, 0.0, g.theta).transform_point(off);
        return Command {
            pose: step_toward(g, [t.pose.x - r[0], t.pose.y - r[1]]),
            width: state.gripper_width,
        };
    }
    let d = (obj.pose.x - g.x).hypot(obj.pose.y - g.y);
    if d <= ARRIVED_M {
        return Command {
            pose: g,
            width: 0.0,
        };
    }
    Command {
        pose: step_toward(g, [obj.pose.x, obj.pose.y]),
        width: state.w_max,
    }
}

/// Remaining distance to the current phase's waypoint: the object while
/// approaching, the target center while transporting.
pub(crate) fn waypoint_distance(state: &SceneState) -> f64 {
    let g = state.gripper;
    match state.hold_offset {
        Some(off) => {
            let t = state.target();
            let o = g.compose(&Pose2::new(off[0], off[1], 0.0));
            (o.x - t.pose.x).hypot(o.y - t.pose.y)
        }
        None => {
            let obj = state.task_object();
            (obj.pose.x - g.x).hypot(obj.pose.y - g.y)
        }
    }
}

/// Expert command as a relative action: the next pose expressed in the
/// current gripper frame.
pub fn expert_step(state: &SceneState) -> ActionLabel {
    let cmd = expert_command(state);
    ActionLabel {
        pose: state.gripper.between(&cmd.pose),
        gripper_width: cmd.width,
    }
}
