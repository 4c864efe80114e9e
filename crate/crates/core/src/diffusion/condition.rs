use serde::{Deserialize, Serialize};

use crate::design::DesignParams;
use crate::error::{structural, Result};
use crate::geometry::{Pose, ShapeCoefficients};

/// Conditioning `c = [beta, theta, p]`: shape coefficients, the flattened
/// pose (per-joint axis-angle then root translation) and the design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionVector {
    pub shape: ShapeCoefficients,
    pub pose: Pose,
    pub design: DesignParams,
}

impl ConditionVector {
    pub fn len(&self) -> usize {
        self.shape.len() + 3 * self.pose.joint_count() + 3 + 3
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Length of the flat vector for a body with the given dimensions.
    pub fn dim(shape_dim: usize, joint_count: usize) -> usize {
        shape_dim + 3 * joint_count + 6
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.shape.0.clone();
        v.extend(self.pose.flatten());
        v.extend(self.design.to_array());
        v
    }

    pub fn from_slice(v: &[f64], shape_dim: usize, joint_count: usize) -> Result<Self> {
        let expected = Self::dim(shape_dim, joint_count);
        if v.len() != expected {
            return Err(structural!("condition vector has {} values, expected {expected}", v.len()));
        }
        let (shape, rest) = v.split_at(shape_dim);
        let (pose, design) = rest.split_at(3 * joint_count + 3);
        Ok(ConditionVector {
            shape: ShapeCoefficients(shape.to_vec()),
            pose: Pose::from_flat(pose)?,
            design: DesignParams::from_slice(design)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;

    #[test]
    fn flat_round_trip() {
        let c = ConditionVector {
            shape: ShapeCoefficients(vec![0.5, -1.0]),
            pose: Pose {
                rotations: vec![Vec3::new(0.1, 0.2, 0.3); 4],
                translation: Vec3::new(1.0, 2.0, 3.0),
            },
            design: DesignParams::new(0.1, 0.2, 0.3).unwrap(),
        };
        let v = c.to_vec();
        assert_eq!(v.len(), 20);
        assert_eq!(c.len(), 20);
        assert_eq!(ConditionVector::from_slice(&v, 2, 4).unwrap(), c);
        assert!(ConditionVector::from_slice(&v[1..], 2, 4).is_err());
    }
}
