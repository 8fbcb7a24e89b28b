//! Ground-truth dynamical systems.
//!
//! All systems use unit physical parameters. The Cartesian pendulums keep the
//! rod length through an explicit tension term, which makes the radial
//! velocity `x vx + y vy` an exact invariant and the length an invariant for
//! initial states on the circle with tangential velocity.

mod dataset;
mod integrate;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;

pub use dataset::{generate_dataset, split_indices, Dataset, Sample};
pub use integrate::{integrate, linspace, Method, Trajectory, MAX_STEPS, MIN_STEP};

use crate::error::{Error, Result};
use crate::seeding::Rng;

/// Damping coefficient of the damped pendulum.
pub const DAMPING: f64 = 0.1;
/// Separation below which the two-body force is treated as singular.
pub const COLLISION_DISTANCE: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SystemKind {
    MassSpring,
    Pendulum2d,
    DampedPendulum,
    TwoBody,
    NonlinearSpring2d,
    LotkaVolterra,
    ForcedPendulum2d,
}

impl SystemKind {
    pub const ALL: [SystemKind; 7] = [
        SystemKind::MassSpring,
        SystemKind::Pendulum2d,
        SystemKind::DampedPendulum,
        SystemKind::TwoBody,
        SystemKind::NonlinearSpring2d,
        SystemKind::LotkaVolterra,
        SystemKind::ForcedPendulum2d,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::MassSpring => "mass-spring",
            SystemKind::Pendulum2d => "2d-pendulum",
            SystemKind::DampedPendulum => "damped-pendulum",
            SystemKind::TwoBody => "two-body",
            SystemKind::NonlinearSpring2d => "nonlinear-spring-2d",
            SystemKind::LotkaVolterra => "lotka-volterra",
            SystemKind::ForcedPendulum2d => "forced-2d-pendulum",
        }
    }

    pub fn system(self) -> SystemDef {
        SystemDef { kind: self }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemKind::ALL.iter().copied().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<&str> = SystemKind::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown system `{s}`; valid systems: {}", names.join(", ")))
        })
    }
}

/// Coefficients of the periodic x-force `a0 cos(a1 t + a2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForceCoefficients {
    pub a0: f64,
    pub a1: f64,
    pub a2: f64,
}

impl ForceCoefficients {
    pub const NONE: ForceCoefficients = ForceCoefficients { a0: 0.0, a1: 0.0, a2: 0.0 };

    /// `a0 ~ U(-0.5, 0.5)`, `a1 ~ U(0, 5)`, `a2 ~ U(0, 2 pi)`.
    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            a0: rng.random_range(-0.5..0.5),
            a1: rng.random_range(0.0..5.0),
            a2: rng.random_range(0.0..2.0 * PI),
        }
    }

    pub fn at(&self, t: f64) -> Vec<f64> {
        external_force(t, self.a0, self.a1, self.a2)
    }
}

/// `F = (a0 cos(a1 t + a2))`, acting along x.
pub fn external_force(t: f64, a0: f64, a1: f64, a2: f64) -> Vec<f64> {
    vec![a0 * libm::cos(a1 * t + a2)]
}

/// A ground-truth system: dynamics, conserved quantities, and initial states.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SystemDef {
    pub kind: SystemKind,
}

impl SystemDef {
    pub fn by_name(name: &str) -> Result<Self> {
        Ok(name.parse::<SystemKind>()?.system())
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn n_s(&self) -> usize {
        match self.kind {
            SystemKind::MassSpring | SystemKind::LotkaVolterra => 2,
            SystemKind::TwoBody => 8,
            _ => 4,
        }
    }

    pub fn n_c_true(&self) -> usize {
        match self.kind {
            SystemKind::MassSpring | SystemKind::LotkaVolterra => 1,
            SystemKind::Pendulum2d => 3,
            SystemKind::DampedPendulum | SystemKind::NonlinearSpring2d | SystemKind::ForcedPendulum2d => 2,
            SystemKind::TwoBody => 7,
        }
    }

    pub fn n_f(&self) -> usize {
        if self.forced() {
            1
        } else {
            0
        }
    }

    pub fn forced(&self) -> bool {
        self.kind == SystemKind::ForcedPendulum2d
    }

    /// Whether the conservation oracle applies to this system's constants.
    pub fn conservation_checked(&self) -> bool {
        self.kind != SystemKind::DampedPendulum
    }

    /// Rank used for the twin network on this system.
    pub fn default_rank(&self) -> usize {
        match self.kind {
            SystemKind::TwoBody => 20,
            SystemKind::NonlinearSpring2d => 30,
            _ => 10,
        }
    }

    pub fn params(&self) -> &'static [(&'static str, f64)] {
        match self.kind {
            SystemKind::MassSpring => &[("k", 1.0), ("m", 1.0)],
            SystemKind::Pendulum2d | SystemKind::ForcedPendulum2d => &[("g", 1.0), ("length", 1.0), ("m", 1.0)],
            SystemKind::DampedPendulum => &[("g", 1.0), ("length", 1.0), ("m", 1.0), ("gamma", DAMPING)],
            SystemKind::TwoBody => &[("G", 1.0), ("m1", 1.0), ("m2", 1.0)],
            SystemKind::NonlinearSpring2d => &[("k", 1.0)],
            SystemKind::LotkaVolterra => &[("alpha", 1.0), ("beta", 1.0), ("gamma", 1.0), ("delta", 1.0)],
        }
    }

    pub fn constant_names(&self) -> &'static [&'static str] {
        match self.kind {
            SystemKind::MassSpring => &["energy"],
            SystemKind::Pendulum2d => &["energy", "length", "radial velocity"],
            SystemKind::DampedPendulum | SystemKind::ForcedPendulum2d => &["length", "radial velocity"],
            SystemKind::TwoBody => &[
                "energy",
                "x-momentum",
                "y-momentum",
                "angular momentum",
                "runge-lenz x",
                "runge-lenz y",
                "centre-of-mass angular momentum",
            ],
            SystemKind::NonlinearSpring2d => &["energy", "angular momentum"],
            SystemKind::LotkaVolterra => &["lotka-volterra invariant"],
        }
    }

    fn check_len(&self, s: &[f64]) -> Result<()> {
        if s.len() != self.n_s() {
            return Err(Error::Shape {
                op: "system",
                detail: format!("{} expects {} states, got {}", self.name(), self.n_s(), s.len()),
            });
        }
        Ok(())
    }

    /// True time derivative. `force` is ignored by unforced systems.
    pub fn derivative(&self, s: &[f64], _t: f64, force: &[f64]) -> Result<Vec<f64>> {
        self.check_len(s)?;
        let out = match self.kind {
            SystemKind::MassSpring => vec![s[1], -s[0]],
            SystemKind::Pendulum2d => pendulum(s, 0.0, 0.0),
            SystemKind::DampedPendulum => pendulum(s, DAMPING, 0.0),
            SystemKind::ForcedPendulum2d => pendulum(s, 0.0, force.first().copied().unwrap_or(0.0)),
            SystemKind::TwoBody => {
                let (dx, dy) = (s[0] - s[2], s[1] - s[3]);
                let dist = libm::sqrt(dx * dx + dy * dy);
                if dist < COLLISION_DISTANCE {
                    return Err(Error::Collision(dist));
                }
                let inv3 = 1.0 / (dist * dist * dist);
                vec![s[4], s[5], s[6], s[7], -dx * inv3, -dy * inv3, dx * inv3, dy * inv3]
            }
            SystemKind::NonlinearSpring2d => {
                let q2 = s[0] * s[0] + s[1] * s[1];
                vec![s[2], s[3], -q2 * s[0], -q2 * s[1]]
            }
            SystemKind::LotkaVolterra => {
                let (u, w) = (s[0], s[1]);
                vec![u - u * w, u * w - w]
            }
        };
        Ok(out)
    }

    /// Closed-form conserved quantities, `n_c_true` of them.
    pub fn true_constants(&self, s: &[f64]) -> Result<Vec<f64>> {
        self.check_len(s)?;
        let out = match self.kind {
            SystemKind::MassSpring => vec![0.5 * (s[0] * s[0] + s[1] * s[1])],
            SystemKind::Pendulum2d => vec![pendulum_energy(s), length(s), radial_velocity(s)],
            SystemKind::DampedPendulum | SystemKind::ForcedPendulum2d => vec![length(s), radial_velocity(s)],
            SystemKind::TwoBody => two_body_constants(s),
            SystemKind::NonlinearSpring2d => {
                let q2 = s[0] * s[0] + s[1] * s[1];
                let v2 = s[2] * s[2] + s[3] * s[3];
                vec![0.5 * v2 + 0.25 * q2 * q2, s[0] * s[3] - s[1] * s[2]]
            }
            SystemKind::LotkaVolterra => {
                let (u, w) = (s[0], s[1]);
                vec![u + w - libm::log(u) - libm::log(w)]
            }
        };
        Ok(out)
    }

    /// Draws an initial state from the system's sampler.
    pub fn sample_initial(&self, rng: &mut Rng) -> Vec<f64> {
        match self.kind {
            SystemKind::MassSpring => vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            SystemKind::Pendulum2d | SystemKind::DampedPendulum | SystemKind::ForcedPendulum2d => {
                let theta: f64 = rng.random_range(0.0..2.0 * PI);
                let speed: f64 = rng.random_range(-0.5..0.5);
                let (sin, cos) = (libm::sin(theta), libm::cos(theta));
                vec![sin, -cos, speed * cos, speed * sin]
            }
            SystemKind::TwoBody => {
                let sep: f64 = rng.random_range(0.5..1.5);
                let phi: f64 = rng.random_range(0.0..2.0 * PI);
                let ecc: f64 = rng.random_range(0.0..0.4);
                // periapsis speed of the relative orbit, total mass 2
                let speed = libm::sqrt(2.0 * (1.0 + ecc) / sep);
                let (sin, cos) = (libm::sin(phi), libm::cos(phi));
                let (dx, dy) = (sep * cos, sep * sin);
                let (dvx, dvy) = (-speed * sin, speed * cos);
                vec![0.5 * dx, 0.5 * dy, -0.5 * dx, -0.5 * dy, 0.5 * dvx, 0.5 * dvy, -0.5 * dvx, -0.5 * dvy]
            }
            SystemKind::NonlinearSpring2d => (0..4).map(|_| rng.random_range(-1.0..1.0)).collect(),
            SystemKind::LotkaVolterra => vec![rng.random_range(0.5..2.0), rng.random_range(0.5..2.0)],
        }
    }
}

impl fmt::Display for SystemDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Cartesian pendulum of unit length under unit gravity along -y, with
/// optional damping and x-force. The tension keeps `d/dt (x vx + y vy) = 0`.
fn pendulum(s: &[f64], gamma: f64, force_x: f64) -> Vec<f64> {
    let (x, y, vx, vy) = (s[0], s[1], s[2], s[3]);
    let r2 = x * x + y * y;
    let v2 = vx * vx + vy * vy;
    let radial = x * vx + y * vy;
    let tension = (v2 - y - gamma * radial + x * force_x) / r2;
    vec![vx, vy, -tension * x - gamma * vx + force_x, -1.0 - tension * y - gamma * vy]
}

/// Kinetic plus potential energy of a pendulum state.
pub fn pendulum_energy(s: &[f64]) -> f64 {
    0.5 * (s[2] * s[2] + s[3] * s[3]) + s[1]
}

fn length(s: &[f64]) -> f64 {
    libm::sqrt(s[0] * s[0] + s[1] * s[1])
}

fn radial_velocity(s: &[f64]) -> f64 {
    s[0] * s[2] + s[1] * s[3]
}

fn two_body_constants(s: &[f64]) -> Vec<f64> {
    let (x1, y1, x2, y2) = (s[0], s[1], s[2], s[3]);
    let (vx1, vy1, vx2, vy2) = (s[4], s[5], s[6], s[7]);
    let (dx, dy) = (x1 - x2, y1 - y2);
    let (dvx, dvy) = (vx1 - vx2, vy1 - vy2);
    let dist = libm::sqrt(dx * dx + dy * dy);
    let energy = 0.5 * (vx1 * vx1 + vy1 * vy1 + vx2 * vx2 + vy2 * vy2) - 1.0 / dist;
    let (px, py) = (vx1 + vx2, vy1 + vy2);
    let angular = x1 * vy1 - y1 * vx1 + x2 * vy2 - y2 * vx2;
    // Runge-Lenz vector of the relative orbit (G M = 2)
    let h = dx * dvy - dy * dvx;
    let ax = dvy * h - 2.0 * dx / dist;
    let ay = -dvx * h - 2.0 * dy / dist;
    let (cx, cy) = (0.5 * (x1 + x2), 0.5 * (y1 + y2));
    let cm_angular = cx * py - cy * px;
    vec![energy, px, py, angular, ax, ay, cm_angular]
}

/// Human-readable list of system names.
pub fn system_names() -> String {
    SystemKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>().join(", ")
}
