use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Axis-aligned box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Aabb { min, max }
    }

    pub fn unit() -> Self {
        Aabb::new([0.0; 3], [1.0; 3])
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..3 {
            if !(self.min[k].is_finite() && self.max[k].is_finite()) {
                return Err(Error::domain("box corners must be finite"));
            }
            if self.max[k] <= self.min[k] {
                return Err(Error::domain(format!("box has zero or negative extent along axis {k}")));
            }
        }
        Ok(())
    }

    pub fn lo(&self) -> Vec3 {
        Vec3::from(self.min)
    }

    pub fn hi(&self) -> Vec3 {
        Vec3::from(self.max)
    }

    pub fn extent(&self) -> Vec3 {
        self.hi() - self.lo()
    }

    pub fn center(&self) -> Vec3 {
        (self.lo() + self.hi()) * 0.5
    }

    pub fn diagonal(&self) -> f64 {
        self.extent().norm()
    }

    /// Largest edge length; used as the characteristic domain size.
    pub fn size(&self) -> f64 {
        self.extent().max()
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e.x * e.y * e.z
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        Vec3::new(
            rng.gen_range(self.min[0]..self.max[0]),
            rng.gen_range(self.min[1]..self.max[1]),
            rng.gen_range(self.min[2]..self.max[2]),
        )
    }
}
