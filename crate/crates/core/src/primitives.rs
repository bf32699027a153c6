//! Bernstein polynomials, cubic Bézier curves and the motion-primitive action set.

use crate::error::{Error, Result};
use crate::Vec3;

/// Number of discrete actions.
pub const NUM_PRIMITIVES: usize = 18;

/// Degree of the curves used for primitives.
pub const CUBIC: usize = 3;

pub fn binomial(n: usize, i: usize) -> f64 {
    if i > n {
        return 0.0;
    }
    let i = i.min(n - i);
    (0..i).fold(1.0, |acc, k| acc * (n - k) as f64 / (k + 1) as f64)
}

/// `(1 − t)^(n − i) · t^i`. The binomial weight is applied by [`bezier_eval`].
pub fn bernstein(n: usize, i: usize, t: f64) -> Result<f64> {
    if i > n {
        return Err(Error::Argument(format!(
            "bernstein index {i} exceeds degree {n}"
        )));
    }
    Ok((1.0 - t).powi((n - i) as i32) * t.powi(i as i32))
}

/// The four control points of a cubic Bézier curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPoints(pub [Vec3; 4]);

impl ControlPoints {
    pub fn start(&self) -> Vec3 {
        self.0[0]
    }

    pub fn end(&self) -> Vec3 {
        self.0[3]
    }
}

pub fn bezier_eval(cp: &ControlPoints, t: f64) -> Result<Vec3> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Argument(format!("curve parameter {t} outside [0, 1]")));
    }
    let mut point = Vec3::zeros();
    for (i, p) in cp.0.iter().enumerate() {
        point += p * (binomial(CUBIC, i) * bernstein(CUBIC, i, t)?);
    }
    Ok(point)
}

/// Evaluates the curve at `n_samples` evenly spaced parameters, endpoints included.
pub fn sample_curve(cp: &ControlPoints, n_samples: usize) -> Result<Vec<Vec3>> {
    if n_samples < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 curve samples, got {n_samples}"
        )));
    }
    let last = (n_samples - 1) as f64;
    (0..n_samples)
        .map(|k| bezier_eval(cp, k as f64 / last))
        .collect()
}

/// One discrete action: a body-frame end displacement (x forward, y left, z up).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionPrimitive {
    pub id: usize,
    pub end_displacement: Vec3,
}

/// Lateral/vertical offsets shared by the forward and non-forward halves.
const OFFSETS: [(f64, f64); 9] = [
    (0.0, 0.0),
    (1.0, 0.0),
    (-1.0, 0.0),
    (0.0, 1.0),
    (0.0, -1.0),
    (1.0, 1.0),
    (1.0, -1.0),
    (-1.0, 1.0),
    (-1.0, -1.0),
];

/// Default action table. Ids 0–8 move forward by `scale`, ids 9–17 do not;
/// id 0 is pure forward and id 9 is hover.
pub fn action_set(scale: f64) -> Result<Vec<MotionPrimitive>> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::Argument(format!(
            "primitive scale must be positive, got {scale}"
        )));
    }
    let actions = [scale, 0.0]
        .into_iter()
        .flat_map(|dx| {
            OFFSETS
                .iter()
                .map(move |&(dy, dz)| Vec3::new(dx, dy * scale, dz * scale))
        })
        .enumerate()
        .map(|(id, end_displacement)| MotionPrimitive {
            id,
            end_displacement,
        })
        .collect();
    Ok(actions)
}

/// Parses an action-set override: one `id dx dy dz` line per primitive,
/// `#` comments allowed. Ids must cover `0..18` exactly once.
pub fn parse_action_set(text: &str) -> Result<Vec<MotionPrimitive>> {
    let mut slots: Vec<Option<MotionPrimitive>> = vec![None; NUM_PRIMITIVES];
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                message: format!("expected `id dx dy dz`, got `{line}`"),
            });
        }
        let id: usize = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            message: format!("bad primitive id `{}`", fields[0]),
        })?;
        let mut d = [0.0; 3];
        for (slot, field) in d.iter_mut().zip(&fields[1..]) {
            *slot = field
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    line: line_no,
                    message: format!("bad displacement `{field}`"),
                })?;
        }
        if id >= NUM_PRIMITIVES {
            return Err(Error::Validation(format!(
                "line {line_no}: primitive id {id} outside 0..{NUM_PRIMITIVES}"
            )));
        }
        if slots[id].is_some() {
            return Err(Error::Validation(format!(
                "line {line_no}: duplicate primitive id {id}"
            )));
        }
        slots[id] = Some(MotionPrimitive {
            id,
            end_displacement: Vec3::from(d),
        });
    }
    let actions: Vec<MotionPrimitive> = slots
        .into_iter()
        .enumerate()
        .map(|(id, p)| p.ok_or_else(|| Error::Validation(format!("primitive id {id} missing"))))
        .collect::<Result<_>>()?;
    for (i, a) in actions.iter().enumerate() {
        if actions[..i]
            .iter()
            .any(|b| b.end_displacement == a.end_displacement)
        {
            return Err(Error::Validation(format!(
                "primitive {} repeats an earlier displacement",
                a.id
            )));
        }
    }
    Ok(actions)
}

pub fn format_action_set(actions: &[MotionPrimitive]) -> String {
    let mut out = String::from("# id dx dy dz (body frame, meters)\n");
    for a in actions {
        let d = a.end_displacement;
        out.push_str(&format!("{} {} {} {}\n", a.id, d.x, d.y, d.z));
    }
    out
}

/// Rotates a body-frame vector into the world frame by `yaw` about +z.
pub fn body_to_world(yaw: f64, v: &Vec3) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * v.x - s * v.y, s * v.x + c * v.y, v.z)
}

/// Inverse of [`body_to_world`].
pub fn world_to_body(yaw: f64, v: &Vec3) -> Vec3 {
    body_to_world(-yaw, v)
}

/// Control points with zero velocity at both ends: `P1 = P0`, `P2 = P3`.
pub fn primitive_to_curve(start: Vec3, yaw: f64, prim: &MotionPrimitive) -> ControlPoints {
    let end = start + body_to_world(yaw, &prim.end_displacement);
    ControlPoints([start, start, end, end])
}
