//! Plain-text factor graph format.
//!
//! ```text
//! # comment
//! VERTEX <frame>
//! ODOM   <frame_a> <frame_b> tx ty tz qx qy qz qw s_wx s_wy s_wz s_x s_y s_z
//! ASSIST <frame_a> <frame_b> ...same tail...
//! LOOP   <frame_a> <frame_b> ...same tail...
//! PRIOR  tx ty tz qx qy qz qw s_wx s_wy s_wz s_x s_y s_z
//! ```
//!
//! Vertices are listed in variable order (the first is the gauge). Between
//! measurements are `T_b⁻¹ T_a`. Numbers use shortest round-trip formatting.

use std::io::Write;

use nalgebra::{Quaternion, UnitQuaternion};

use crate::geometry::{Pose, Rotation, Vec3};

use super::{Factor, FactorGraph, FactorKind, PgoError};

fn tag(kind: FactorKind) -> &'static str {
    match kind {
        FactorKind::Odometry => "ODOM",
        FactorKind::Assistant => "ASSIST",
        FactorKind::Loop => "LOOP",
        FactorKind::Prior => "PRIOR",
    }
}

fn write_tail<W: Write>(w: &mut W, f: &Factor) -> std::io::Result<()> {
    let t = f.measurement.translation;
    let q = f.measurement.rotation.to_quaternion();
    write!(w, " {} {} {} {} {} {} {}", t.x, t.y, t.z, q.i, q.j, q.k, q.w)?;
    for s in f.sigmas {
        write!(w, " {s}")?;
    }
    writeln!(w)
}

pub fn write_graph<W: Write>(graph: &FactorGraph, mut w: W) -> std::io::Result<()> {
    writeln!(w, "# rigmap factor graph v1")?;
    for k in graph.keys() {
        writeln!(w, "VERTEX {k}")?;
    }
    for f in graph.factors() {
        if f.kind == FactorKind::Prior {
            write!(w, "{}", tag(f.kind))?;
        } else {
            write!(w, "{} {} {}", tag(f.kind), graph.keys()[f.a], graph.keys()[f.b])?;
        }
        write_tail(&mut w, f)?;
    }
    Ok(())
}

pub fn parse_graph(text: &str) -> Result<FactorGraph, PgoError> {
    let mut keys = Vec::new();
    let mut pending: Vec<(usize, FactorKind, usize, usize, Pose, [f64; 6])> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let err = |message: String| PgoError::Parse { line, message };
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let tok: Vec<&str> = body.split_whitespace().collect();
        let kind = match tok[0] {
            "VERTEX" => {
                let [_, id] = tok[..] else {
                    return Err(err("VERTEX takes one frame id".into()));
                };
                keys.push(id.parse::<usize>().map_err(|e| err(e.to_string()))?);
                continue;
            }
            "ODOM" => FactorKind::Odometry,
            "ASSIST" => FactorKind::Assistant,
            "LOOP" => FactorKind::Loop,
            "PRIOR" => FactorKind::Prior,
            other => return Err(err(format!("unknown record '{other}'"))),
        };
        let ids = if kind == FactorKind::Prior { 0 } else { 2 };
        if tok.len() != 1 + ids + 13 {
            return Err(err(format!("expected {} fields, found {}", 1 + ids + 13, tok.len())));
        }
        let mut frames = [0usize; 2];
        for (i, f) in frames.iter_mut().enumerate().take(ids) {
            *f = tok[1 + i].parse().map_err(|e: std::num::ParseIntError| err(e.to_string()))?;
        }
        let nums: Vec<f64> = tok[1 + ids..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| err(e.to_string()))?;
        let q = Quaternion::new(nums[6], nums[3], nums[4], nums[5]);
        if !(q.norm() > 0.0) {
            return Err(err("zero quaternion".into()));
        }
        let pose = Pose::new(
            Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q)),
            Vec3::new(nums[0], nums[1], nums[2]),
        );
        let mut sigmas = [0.0; 6];
        sigmas.copy_from_slice(&nums[7..13]);
        if sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(err("sigmas must be positive".into()));
        }
        pending.push((line, kind, frames[0], frames[1], pose, sigmas));
    }
    let mut g = FactorGraph::new(keys).map_err(|e| PgoError::Parse {
        line: 0,
        message: e.to_string(),
    })?;
    for (line, kind, a, b, pose, sigmas) in pending {
        let wrap = |e: PgoError| PgoError::Parse {
            line,
            message: e.to_string(),
        };
        let (ia, ib) = if kind == FactorKind::Prior {
            (0, 0)
        } else {
            if a == b {
                return Err(wrap(PgoError::SelfFactor(a)));
            }
            (
                g.index_of(a).ok_or(PgoError::UnknownFrame(a)).map_err(wrap)?,
                g.index_of(b).ok_or(PgoError::UnknownFrame(b)).map_err(wrap)?,
            )
        };
        g.factors.push(Factor {
            kind,
            a: ia,
            b: ib,
            measurement: pose,
            sigmas,
        });
    }
    Ok(g)
}
