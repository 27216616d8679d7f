//! Conversions between spiking-input units (SI), degrees and 16-bit position
//! counter values for joints 1 to 4, plus the SI reference bounds.
//!
//! The three conversion columns are stored independently and each operation
//! uses its own column as published. They do not agree with each other
//! (e.g. for J1, `si_per_degree * degree_per_count` is -2.47e-3 while
//! `si_per_count` is 2.47e-2), so none is derived from another. Joints 5 and
//! 6 have no published mapping and are rejected.

use serde::{Deserialize, Serialize};

use crate::JointId;

/// Neutral value of every position counter.
pub const OFFSET: u16 = 32_768;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum JointMapError {
    #[error("joint {0} has no SI/degree mapping (only joints 1-4 are mapped)")]
    UnmappedJoint(u8),
    #[error("input is not a finite number")]
    NonFiniteInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointMapping {
    /// SI per degree.
    pub si_per_degree: f64,
    /// Degrees per count, applied to `P - O`.
    pub degree_per_count: f64,
    /// SI per count, applied to `P - O`.
    pub si_per_count: f64,
    pub upper_si: i32,
    pub lower_si: i32,
    pub upper_deg: f64,
    pub lower_deg: f64,
}

impl JointMapping {
    fn clamp_si(&self, si: f64) -> (f64, bool) {
        let clamped = si.clamp(f64::from(self.lower_si), f64::from(self.upper_si));
        (clamped, clamped != si)
    }
}

/// Tables I and II as compiled-in defaults.
pub const DEFAULT_MAPPINGS: [JointMapping; 4] = [
    JointMapping {
        si_per_degree: -3.1e-1,
        degree_per_count: 7.98e-3,
        si_per_count: 2.47e-2,
        upper_si: 487,
        lower_si: -487,
        upper_deg: 155.0,
        lower_deg: -155.0,
    },
    JointMapping {
        si_per_degree: -1.1e-1,
        degree_per_count: 7.67e-3,
        si_per_count: 6.77e-2,
        upper_si: 750,
        lower_si: -750,
        upper_deg: 85.0,
        lower_deg: -85.0,
    },
    JointMapping {
        si_per_degree: -2.9e-1,
        degree_per_count: 7.05e-3,
        si_per_count: 2.39e-2,
        upper_si: 383,
        lower_si: -383,
        upper_deg: 112.5,
        // Published as "112.5"; every other row is symmetric.
        lower_deg: -112.5,
    },
    JointMapping {
        si_per_degree: -5.7e-2,
        degree_per_count: 1.24e-2,
        si_per_count: 2.18e-1,
        upper_si: 1585,
        lower_si: -1585,
        upper_deg: 90.0,
        lower_deg: -90.0,
    },
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointMap {
    mappings: [JointMapping; 4],
}

impl Default for JointMap {
    fn default() -> Self {
        Self {
            mappings: DEFAULT_MAPPINGS,
        }
    }
}

/// Result of [`JointMap::clamp_reference`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Clamped<T> {
    pub value: T,
    pub clamped: bool,
}

fn offset_counts(p: u16) -> f64 {
    f64::from(p) - f64::from(OFFSET)
}

impl JointMap {
    pub fn new(mappings: [JointMapping; 4]) -> Self {
        Self { mappings }
    }

    pub fn mapping(&self, joint: JointId) -> Result<&JointMapping, JointMapError> {
        self.mappings
            .get(joint.index())
            .ok_or(JointMapError::UnmappedJoint(joint.number()))
    }

    pub fn mapping_mut(&mut self, joint: JointId) -> Result<&mut JointMapping, JointMapError> {
        self.mappings
            .get_mut(joint.index())
            .ok_or(JointMapError::UnmappedJoint(joint.number()))
    }

    pub fn is_mapped(&self, joint: JointId) -> bool {
        joint.index() < self.mappings.len()
    }

    pub fn counts_to_degrees(&self, joint: JointId, p: u16) -> Result<f64, JointMapError> {
        Ok(self.mapping(joint)?.degree_per_count * offset_counts(p))
    }

    /// Inverse of [`JointMap::counts_to_degrees`], rounded to the nearest
    /// count and saturated to the 16-bit range.
    pub fn degrees_to_counts(&self, joint: JointId, deg: f64) -> Result<u16, JointMapError> {
        if !deg.is_finite() {
            return Err(JointMapError::NonFiniteInput);
        }
        let m = self.mapping(joint)?;
        Ok(to_counter(deg / m.degree_per_count))
    }

    pub fn degrees_to_si(&self, joint: JointId, deg: f64) -> Result<f64, JointMapError> {
        Ok(self.mapping(joint)?.si_per_degree * deg)
    }

    pub fn counts_to_si(&self, joint: JointId, p: u16) -> Result<f64, JointMapError> {
        Ok(self.mapping(joint)?.si_per_count * offset_counts(p))
    }

    /// Inverse of [`JointMap::counts_to_si`], rounded and saturated.
    pub fn si_to_counts(&self, joint: JointId, si: f64) -> Result<u16, JointMapError> {
        if !si.is_finite() {
            return Err(JointMapError::NonFiniteInput);
        }
        let m = self.mapping(joint)?;
        Ok(to_counter(si / m.si_per_count))
    }

    pub fn clamp_reference(&self, joint: JointId, si: f64) -> Result<Clamped<f64>, JointMapError> {
        if !si.is_finite() {
            return Err(JointMapError::NonFiniteInput);
        }
        let (value, clamped) = self.mapping(joint)?.clamp_si(si);
        Ok(Clamped { value, clamped })
    }

    /// Counter range whose SI equivalent lies inside the SI bounds.
    pub fn count_bounds(&self, joint: JointId) -> Result<(u16, u16), JointMapError> {
        let m = self.mapping(joint)?;
        let span = |si: i32| f64::from(si) / m.si_per_count;
        let (a, b) = (span(m.lower_si), span(m.upper_si));
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        Ok((to_counter(lo.ceil()), to_counter(hi.floor())))
    }

    /// Clamps a raw counter reference into [`JointMap::count_bounds`].
    pub fn clamp_counts(&self, joint: JointId, p: u16) -> Result<Clamped<u16>, JointMapError> {
        let (lo, hi) = self.count_bounds(joint)?;
        let value = p.clamp(lo, hi);
        Ok(Clamped {
            value,
            clamped: value != p,
        })
    }
}

fn to_counter(offset: f64) -> u16 {
    (offset.round() + f64::from(OFFSET)).clamp(0.0, f64::from(u16::MAX)) as u16
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn j(n: u8) -> JointId {
        JointId::new(n).unwrap()
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-9 * b.abs().max(1.0)
    }

    #[test]
    fn counts_to_degrees_rows() {
        let map = JointMap::default();
        assert_eq!(map.counts_to_degrees(j(1), 32_768).unwrap(), 0.0);
        assert!(close(map.counts_to_degrees(j(1), 33_768).unwrap(), 7.98));
        assert!(close(map.counts_to_degrees(j(4), 31_768).unwrap(), -12.4));
        assert_eq!(map.counts_to_degrees(j(5), 0), Err(JointMapError::UnmappedJoint(5)));
    }

    #[test]
    fn degrees_to_si_rows() {
        let map = JointMap::default();
        assert_eq!(map.degrees_to_si(j(2), 0.0).unwrap(), 0.0);
        assert!(close(map.degrees_to_si(j(1), -100.0).unwrap(), 31.0));
        assert!(close(map.degrees_to_si(j(4), 90.0).unwrap(), -5.13));
        assert!(map.degrees_to_si(j(6), 1.0).is_err());
    }

    #[test]
    fn counts_to_si_rows() {
        let map = JointMap::default();
        assert_eq!(map.counts_to_si(j(3), 32_768).unwrap(), 0.0);
        assert!(close(map.counts_to_si(j(2), 32_868).unwrap(), 6.77));
        assert!(close(map.counts_to_si(j(1), 32_868).unwrap(), 2.47));
    }

    #[test]
    fn clamping_rows() {
        let map = JointMap::default();
        assert_eq!(
            map.clamp_reference(j(1), 600.0).unwrap(),
            Clamped { value: 487.0, clamped: true }
        );
        assert_eq!(
            map.clamp_reference(j(4), -1585.0).unwrap(),
            Clamped { value: -1585.0, clamped: false }
        );
        assert_eq!(
            map.clamp_reference(j(2), 0.0).unwrap(),
            Clamped { value: 0.0, clamped: false }
        );
        assert_eq!(map.clamp_reference(j(2), f64::NAN), Err(JointMapError::NonFiniteInput));
    }

    #[test]
    fn tables_are_symmetric() {
        for m in DEFAULT_MAPPINGS {
            assert_eq!(m.upper_si, -m.lower_si);
            assert_eq!(m.upper_deg, -m.lower_deg);
        }
    }

    #[test]
    fn count_bounds_stay_inside_si_bounds() {
        let map = JointMap::default();
        for n in 1..=4 {
            let (lo, hi) = map.count_bounds(j(n)).unwrap();
            let m = map.mapping(j(n)).unwrap();
            assert!(map.counts_to_si(j(n), hi).unwrap() <= f64::from(m.upper_si));
            assert!(map.counts_to_si(j(n), hi + 1).unwrap() > f64::from(m.upper_si));
            assert!(map.counts_to_si(j(n), lo).unwrap() >= f64::from(m.lower_si));
        }
    }

    proptest! {
        #[test]
        fn degree_round_trip(n in 1u8..=4, p in 0u16..=u16::MAX) {
            let map = JointMap::default();
            let deg = map.counts_to_degrees(j(n), p).unwrap();
            prop_assert_eq!(map.degrees_to_counts(j(n), deg).unwrap(), p);
        }

        #[test]
        fn clamp_is_idempotent_and_bounded(n in 1u8..=4, si in -1e4f64..1e4) {
            let map = JointMap::default();
            let once = map.clamp_reference(j(n), si).unwrap().value;
            let twice = map.clamp_reference(j(n), once).unwrap();
            prop_assert_eq!(twice.value, once);
            prop_assert!(!twice.clamped);
            let m = map.mapping(j(n)).unwrap();
            prop_assert!(once >= f64::from(m.lower_si) && once <= f64::from(m.upper_si));
        }

        #[test]
        fn conversions_are_strictly_monotone(n in 1u8..=4, p in 0u16..u16::MAX) {
            let map = JointMap::default();
            prop_assert!(map.counts_to_degrees(j(n), p + 1).unwrap() > map.counts_to_degrees(j(n), p).unwrap());
            prop_assert!(map.counts_to_si(j(n), p + 1).unwrap() > map.counts_to_si(j(n), p).unwrap());
            let d = f64::from(p) / 100.0;
            prop_assert!(map.degrees_to_si(j(n), d + 1.0).unwrap() < map.degrees_to_si(j(n), d).unwrap());
        }
    }
}
