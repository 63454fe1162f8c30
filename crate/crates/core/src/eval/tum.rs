//! TUM trajectory files: `timestamp tx ty tz qx qy qz qw` per line.

use std::io::Write;

use nalgebra::{Quaternion, UnitQuaternion};

use crate::geometry::{Pose, Rotation, Vec3};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TrajectoryError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("pose {0} has no timestamp")]
    MissingTimestamp(usize),
}

/// `x` rounded to nine significant digits, printed without trailing zeros.
pub fn format_significant(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    let s = rounded.to_string();
    if s == "-0" {
        "0".into()
    } else {
        s
    }
}

pub fn format_pose(p: &Pose) -> Result<String, TrajectoryError> {
    let t = p.timestamp.ok_or(TrajectoryError::MissingTimestamp(0))?;
    let mut q = p.rotation.to_quaternion().into_inner();
    if q.w < 0.0 {
        q = -q;
    }
    let v = [p.translation.x, p.translation.y, p.translation.z, q.i, q.j, q.k, q.w];
    let body: Vec<String> = v.iter().map(|x| format_significant(*x)).collect();
    Ok(format!("{t:.9} {}", body.join(" ")))
}

pub fn write_trajectory<W: Write>(poses: &[Pose], mut w: W) -> std::io::Result<()> {
    for (i, p) in poses.iter().enumerate() {
        let line = format_pose(p).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, TrajectoryError::MissingTimestamp(i))
        })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

pub fn read_trajectory(text: &str) -> Result<Vec<Pose>, TrajectoryError> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let body = raw.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let err = |message: String| TrajectoryError::Parse { line, message };
        let v: Vec<f64> = body
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .map_err(|e: std::num::ParseFloatError| err(e.to_string()))?;
        if v.len() != 8 {
            return Err(err(format!("expected 8 fields, found {}", v.len())));
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]);
        if !(q.norm() > 0.0) {
            return Err(err("zero quaternion".into()));
        }
        let r = Rotation::from_quaternion(&UnitQuaternion::from_quaternion(q));
        out.push(Pose::new(r, Vec3::new(v[1], v[2], v[3])).with_timestamp(v[0]));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::rodrigues;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_line() {
        let p = Pose::identity().with_timestamp(0.0);
        assert_eq!(format_pose(&p).unwrap(), "0.000000000 0 0 0 0 0 0 1");
    }

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(1.234567891234), "1.23456789");
        assert_eq!(format_significant(-0.000123456789123), "-0.000123456789");
        assert_eq!(format_significant(-0.0), "0");
    }

    #[test]
    fn round_trip_random_poses() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let poses: Vec<Pose> = (0..1000)
            .map(|i| {
                let w = Vec3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
                let t = Vec3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
                Pose::new(rodrigues(&w), t).with_timestamp(i as f64 * 0.1)
            })
            .collect();
        let mut buf = Vec::new();
        write_trajectory(&poses, &mut buf).unwrap();
        let back = read_trajectory(&String::from_utf8(buf).unwrap()).unwrap();
        assert_eq!(back.len(), 1000);
        for (a, b) in poses.iter().zip(&back) {
            assert!((a.translation - b.translation).norm() < 1e-8);
            assert!(a.rotation.angle_to(&b.rotation) < 1e-8);
            assert!((a.timestamp.unwrap() - b.timestamp.unwrap()).abs() < 1e-9);
        }
    }

    #[test]
    fn truncated_line_names_the_line() {
        let text = "0.0 0 0 0 0 0 0 1\n0.1 1 2 3 0 0\n";
        assert_eq!(
            read_trajectory(text),
            Err(TrajectoryError::Parse {
                line: 2,
                message: "expected 8 fields, found 6".into()
            })
        );
    }
}
