use std::f64::consts::{FRAC_PI_2, PI, TAU};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Mat3, Pose, Rotation, Vec2, Vec3};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    #[default]
    Line,
    /// Straight, a 90° left turn over the middle third, straight.
    Arc,
    /// One full circle ending where it started.
    Loop,
    /// Smoothly varying heading built from a few sinusoids.
    RandomWalk,
}

/// One sinusoidal heading component `amplitude · sin(2π s / wavelength + phase)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadingTerm {
    pub amplitude: f64,
    pub wavelength: f64,
    pub phase: f64,
}

const TABLE_STEP: f64 = 0.05;
const PITCH_WAVELENGTH: f64 = 37.0;

/// Ground-plane path with a forward-looking camera, parameterized by arc length.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Trajectory {
    pub kind: TrajectoryKind,
    pub length: f64,
    pub height: f64,
    pub pitch_amplitude: f64,
    pub terms: Vec<HeadingTerm>,
    #[serde(skip)]
    table: Vec<Vec2>,
}

impl PartialEq for Trajectory {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.length == other.length
            && self.height == other.height
            && self.pitch_amplitude == other.pitch_amplitude
            && self.terms == other.terms
    }
}

impl Trajectory {
    pub fn new<R: Rng>(
        kind: TrajectoryKind,
        length: f64,
        height: f64,
        pitch_amplitude: f64,
        rng: &mut R,
    ) -> Self {
        let terms = if kind == TrajectoryKind::RandomWalk {
            [(0.3, 80.0), (0.5, 200.0), (0.8, 500.0)]
                .iter()
                .map(|&(amplitude, wavelength)| HeadingTerm {
                    amplitude,
                    wavelength,
                    phase: rng.random_range(0.0..TAU),
                })
                .collect()
        } else {
            Vec::new()
        };
        let mut t = Trajectory {
            kind,
            length,
            height,
            pitch_amplitude,
            terms,
            table: Vec::new(),
        };
        t.rebuild();
        t
    }

    /// Recomputes the integrated position table after deserialization.
    pub fn rebuild(&mut self) {
        self.table.clear();
        if self.kind != TrajectoryKind::RandomWalk {
            return;
        }
        let n = ((self.length * 1.5 + 50.0) / TABLE_STEP).ceil() as usize + 2;
        let mut p = Vec2::zeros();
        self.table.reserve(n);
        self.table.push(p);
        for i in 0..n {
            let mid = (i as f64 + 0.5) * TABLE_STEP;
            let h = self.heading(mid);
            p += Vec2::new(h.cos(), h.sin()) * TABLE_STEP;
            self.table.push(p);
        }
    }

    pub fn heading(&self, s: f64) -> f64 {
        match self.kind {
            TrajectoryKind::Line => 0.0,
            TrajectoryKind::Arc => {
                let third = self.length / 3.0;
                let radius = third / FRAC_PI_2;
                ((s - third) / radius).clamp(0.0, FRAC_PI_2)
            }
            TrajectoryKind::Loop => s / self.loop_radius(),
            TrajectoryKind::RandomWalk => self
                .terms
                .iter()
                .map(|t| t.amplitude * (TAU * s / t.wavelength + t.phase).sin())
                .sum(),
        }
    }

    fn loop_radius(&self) -> f64 {
        self.length / (2.0 * PI)
    }

    /// Planar position at arc length `s`.
    pub fn planar(&self, s: f64) -> Vec2 {
        match self.kind {
            TrajectoryKind::Line => Vec2::new(s, 0.0),
            TrajectoryKind::Arc => {
                let third = self.length / 3.0;
                let radius = third / FRAC_PI_2;
                if s < third {
                    Vec2::new(s, 0.0)
                } else if s < 2.0 * third {
                    let phi = (s - third) / radius;
                    Vec2::new(third + radius * phi.sin(), radius * (1.0 - phi.cos()))
                } else {
                    Vec2::new(third + radius, radius + (s - 2.0 * third))
                }
            }
            TrajectoryKind::Loop => {
                let r = self.loop_radius();
                Vec2::new(r * (s / r).sin(), r * (1.0 - (s / r).cos()))
            }
            TrajectoryKind::RandomWalk => {
                let x = (s.max(0.0) / TABLE_STEP).min((self.table.len() - 2) as f64);
                let i = x.floor() as usize;
                let f = x - i as f64;
                self.table[i] * (1.0 - f) + self.table[i + 1] * f
            }
        }
    }

    pub fn pitch(&self, s: f64) -> f64 {
        self.pitch_amplitude * (TAU * s / PITCH_WAVELENGTH).sin()
    }

    /// Camera pose at arc length `s` (x right, y down, z forward).
    pub fn pose(&self, s: f64) -> Pose {
        let psi = self.heading(s);
        let theta = self.pitch(s);
        let flat = Vec3::new(psi.cos(), psi.sin(), 0.0);
        let right = Vec3::new(psi.sin(), -psi.cos(), 0.0);
        let forward = flat * theta.cos() - Vec3::z() * theta.sin();
        let down = forward.cross(&right);
        let r = Mat3::from_columns(&[right, down, forward]);
        let p = self.planar(s);
        Pose::new(
            Rotation::from_matrix_unchecked(r),
            Vec3::new(p.x, p.y, self.height),
        )
    }
}
