//! Contact modes, schedules and a static walking gait.

use nalgebra::{DVector, Matrix3, Rotation3, UnitQuaternion, Vector3};

use super::{QuadrupedError, QuadrupedState, FEET};
use crate::clf::{ReferenceSample, ReferenceSignal};
use crate::ocp::ModeSchedule;

pub const FOOT_NAMES: [&str; FEET] = ["LF", "RF", "LH", "RH"];

/// One phase of the gait.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactMode {
    pub duration: f64,
    pub contact: [bool; FEET],
    /// World-frame foot positions; only stance entries matter.
    pub feet: [Vector3<f64>; FEET],
    /// Rotation from the world frame to the contact frame (z along the terrain normal).
    pub terrain: Matrix3<f64>,
}

impl ContactMode {
    pub fn flat(feet: [Vector3<f64>; FEET], contact: [bool; FEET], duration: f64) -> Self {
        Self {
            duration,
            contact,
            feet,
            terrain: Matrix3::identity(),
        }
    }

    pub fn stance_count(&self) -> usize {
        self.contact.iter().filter(|&&c| c).count()
    }

    /// Stance-foot positions relative to the CoM in the base frame.
    pub fn lever_arms(&self, state: &QuadrupedState) -> Vec<Vector3<f64>> {
        let rt = state.rotation().transpose();
        (0..FEET)
            .filter(|&i| self.contact[i])
            .map(|i| rt * (self.feet[i] - state.p))
            .collect()
    }
}

/// Mode sequence starting at `start`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContactSchedule {
    pub start: f64,
    pub modes: Vec<ContactMode>,
}

impl ContactSchedule {
    pub fn standing(feet: [Vector3<f64>; FEET], terrain: Matrix3<f64>, start: f64, duration: f64) -> Self {
        Self {
            start,
            modes: vec![ContactMode {
                duration,
                contact: [true; FEET],
                feet,
                terrain,
            }],
        }
    }

    pub fn end(&self) -> f64 {
        self.start + self.modes.iter().map(|m| m.duration).sum::<f64>()
    }

    /// `min_stance` is 3 for adaptive runs, where the wrench must stay matched.
    pub fn validate(&self, min_stance: usize) -> Result<(), QuadrupedError> {
        if self.modes.is_empty() {
            return Err(QuadrupedError::Schedule("no modes".into()));
        }
        for (k, m) in self.modes.iter().enumerate() {
            if !(m.duration > 0.0) {
                return Err(QuadrupedError::Schedule(format!("mode {k} has duration {}", m.duration)));
            }
            if m.stance_count() < min_stance {
                return Err(QuadrupedError::Schedule(format!(
                    "mode {k} has {} feet in contact, at least {min_stance} required",
                    m.stance_count()
                )));
            }
        }
        Ok(())
    }

    /// Index of the mode active at `t`, clamped to the first/last mode.
    pub fn mode_index(&self, t: f64) -> usize {
        let mut end = self.start;
        for (k, m) in self.modes.iter().enumerate() {
            end += m.duration;
            if t < end {
                return k;
            }
        }
        self.modes.len() - 1
    }

    pub fn mode_at(&self, t: f64) -> &ContactMode {
        &self.modes[self.mode_index(t)]
    }

    pub fn mode_schedule(&self) -> ModeSchedule {
        let mut switch_times = Vec::with_capacity(self.modes.len().saturating_sub(1));
        let mut t = self.start;
        for m in &self.modes[..self.modes.len() - 1] {
            t += m.duration;
            switch_times.push(t);
        }
        ModeSchedule {
            switch_times,
            modes: (0..self.modes.len()).collect(),
            start: self.start,
            end: self.end(),
        }
    }
}

/// Statically stable walk up (or down) a planar slope at constant speed.
///
/// Feet move one at a time in the order LH, LF, RH, RF. Each swing is preceded
/// by a four-foot phase. The base keeps its attitude parallel to the slope and
/// its CoM at `height` above the slope plane.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticWalk {
    pub start: f64,
    pub duration: f64,
    /// Slope angle [rad], positive uphill along +x.
    pub slope: f64,
    /// Speed along the slope [m/s].
    pub speed: f64,
    /// Nominal foot offsets from the CoM in the slope frame (z = -height).
    pub foot_offsets: [Vector3<f64>; FEET],
    pub four_foot_phase: f64,
    pub swing_phase: f64,
}

const SWING_ORDER: [usize; FEET] = [2, 0, 3, 1];

impl StaticWalk {
    /// Rotation from the slope frame to the world frame.
    pub fn slope_rotation(&self) -> Matrix3<f64> {
        *Rotation3::from_axis_angle(&Vector3::y_axis(), -self.slope).matrix()
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.slope_rotation() * Vector3::x()
    }

    pub fn cycle(&self) -> f64 {
        FEET as f64 * (self.four_foot_phase + self.swing_phase)
    }

    pub fn height(&self) -> f64 {
        -self.foot_offsets.iter().map(|f| f.z).sum::<f64>() / FEET as f64
    }

    pub fn base_position(&self, t: f64) -> Vector3<f64> {
        let s = self.speed * (t - self.start).max(0.0);
        self.slope_rotation() * Vector3::new(0.0, 0.0, self.height()) + s * self.direction()
    }

    pub fn base_velocity(&self, t: f64) -> Vector3<f64> {
        if t < self.start {
            Vector3::zeros()
        } else {
            self.speed * self.direction()
        }
    }

    pub fn orientation(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&Vector3::y_axis(), -self.slope)
    }

    /// Initial pose on the reference.
    pub fn initial_state(&self) -> QuadrupedState {
        let theta = crate::mechanics::rotation::euler_from_rotation(&self.slope_rotation());
        let mut s = QuadrupedState::at_rest(self.base_position(self.start), theta);
        s.vp = self.base_velocity(self.start);
        s
    }

    fn foothold(&self, foot: usize, t: f64) -> Vector3<f64> {
        self.base_position(t) + self.slope_rotation() * self.foot_offsets[foot]
    }

    pub fn schedule(&self) -> ContactSchedule {
        let terrain = self.slope_rotation().transpose();
        let mut feet: [Vector3<f64>; FEET] = std::array::from_fn(|i| self.foothold(i, self.start));
        let slot = self.four_foot_phase + self.swing_phase;
        let stance_time = self.cycle() - self.swing_phase;
        let mut modes = Vec::new();
        let mut t = self.start;
        let end = self.start + self.duration;
        'outer: loop {
            for &foot in &SWING_ORDER {
                if t >= end {
                    break 'outer;
                }
                modes.push(ContactMode {
                    duration: self.four_foot_phase,
                    contact: [true; FEET],
                    feet,
                    terrain,
                });
                let mut contact = [true; FEET];
                contact[foot] = false;
                modes.push(ContactMode {
                    duration: self.swing_phase,
                    contact,
                    feet,
                    terrain,
                });
                t += slot;
                feet[foot] = self.foothold(foot, t + 0.5 * stance_time);
            }
        }
        ContactSchedule {
            start: self.start,
            modes,
        }
    }
}

impl ReferenceSignal for StaticWalk {
    fn sample(&self, t: f64) -> ReferenceSample {
        let p = self.base_position(t);
        let v = self.base_velocity(t);
        ReferenceSample {
            position: DVector::from_column_slice(p.as_slice()),
            orientation: Some(self.orientation()),
            velocity: DVector::from_column_slice(&[v.x, v.y, v.z, 0.0, 0.0, 0.0]),
            acceleration: DVector::zeros(6),
        }
    }
}
