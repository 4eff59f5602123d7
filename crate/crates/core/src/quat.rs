//! Scalar quaternion algebra.
//!
//! Everything above this module (quaternion convolution, normalization,
//! the readout) is checked against these definitions.

use std::ops::{Add, Mul, Neg, Sub};

use crate::error::{Error, Result};

/// A quaternion `r + x i + y j + z k` with finite components.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Quaternion {
    pub r: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const ZERO: Quaternion = Quaternion { r: 0.0, x: 0.0, y: 0.0, z: 0.0 };
    pub const ONE: Quaternion = Quaternion { r: 1.0, x: 0.0, y: 0.0, z: 0.0 };
    pub const I: Quaternion = Quaternion { r: 0.0, x: 1.0, y: 0.0, z: 0.0 };
    pub const J: Quaternion = Quaternion { r: 0.0, x: 0.0, y: 1.0, z: 0.0 };
    pub const K: Quaternion = Quaternion { r: 0.0, x: 0.0, y: 0.0, z: 1.0 };

    /// Checked constructor; rejects NaN and infinite components.
    pub fn new(r: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        if [r, x, y, z].iter().all(|v| v.is_finite()) {
            Ok(Self { r, x, y, z })
        } else {
            Err(Error::Domain(format!(
                "non-finite quaternion component in ({r}, {x}, {y}, {z})"
            )))
        }
    }

    /// A pure quaternion `x i + y j + z k`.
    pub fn pure(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::new(0.0, x, y, z)
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.r, self.x, self.y, self.z]
    }

    pub fn is_pure(self) -> bool {
        self.r == 0.0
    }

    pub fn add(self, p: Quaternion) -> Quaternion {
        Quaternion {
            r: self.r + p.r,
            x: self.x + p.x,
            y: self.y + p.y,
            z: self.z + p.z,
        }
    }

    pub fn scalar_mul(self, a: f64) -> Quaternion {
        Quaternion {
            r: a * self.r,
            x: a * self.x,
            y: a * self.y,
            z: a * self.z,
        }
    }

    pub fn conjugate(self) -> Quaternion {
        Quaternion {
            r: self.r,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    pub fn norm_sqr(self) -> f64 {
        self.r * self.r + self.x * self.x + self.y * self.y + self.z * self.z
    }

    pub fn norm(self) -> f64 {
        self.norm_sqr().sqrt()
    }

    /// Divides by the norm. The zero quaternion has no direction and is rejected.
    pub fn unit(self) -> Result<Quaternion> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::Domain(
                "cannot normalize the zero quaternion".to_string(),
            ));
        }
        Ok(self.scalar_mul(1.0 / n))
    }

    /// Hamilton product `self ⊗ p`, written term by term.
    pub fn hamilton(self, p: Quaternion) -> Quaternion {
        let q = self;
        Quaternion {
            r: q.r * p.r - q.x * p.x - q.y * p.y - q.z * p.z,
            x: q.x * p.r + q.r * p.x - q.z * p.y + q.y * p.z,
            y: q.y * p.r + q.z * p.x + q.r * p.y - q.x * p.z,
            z: q.z * p.r - q.y * p.x + q.x * p.y + q.r * p.z,
        }
    }

    /// The real 4×4 matrix `L(q)` with `L(q) · p = q ⊗ p` for `p` as a column
    /// `[r, x, y, z]`.
    pub fn left_matrix(self) -> [[f64; 4]; 4] {
        let Quaternion { r, x, y, z } = self;
        [
            [r, -x, -y, -z],
            [x, r, -z, y],
            [y, z, r, -x],
            [z, -y, x, r],
        ]
    }
}

pub fn add(q: Quaternion, p: Quaternion) -> Quaternion {
    q.add(p)
}

pub fn scalar_mul(a: f64, q: Quaternion) -> Quaternion {
    q.scalar_mul(a)
}

pub fn conjugate(q: Quaternion) -> Quaternion {
    q.conjugate()
}

pub fn unit(q: Quaternion) -> Result<Quaternion> {
    q.unit()
}

pub fn hamilton(q: Quaternion, p: Quaternion) -> Quaternion {
    q.hamilton(p)
}

impl Add for Quaternion {
    type Output = Quaternion;
    fn add(self, rhs: Quaternion) -> Quaternion {
        Quaternion::add(self, rhs)
    }
}

impl Sub for Quaternion {
    type Output = Quaternion;
    fn sub(self, rhs: Quaternion) -> Quaternion {
        Quaternion::add(self, -rhs)
    }
}

impl Neg for Quaternion {
    type Output = Quaternion;
    fn neg(self) -> Quaternion {
        self.scalar_mul(-1.0)
    }
}

impl Mul for Quaternion {
    type Output = Quaternion;
    fn mul(self, rhs: Quaternion) -> Quaternion {
        self.hamilton(rhs)
    }
}

impl Mul<Quaternion> for f64 {
    type Output = Quaternion;
    fn mul(self, rhs: Quaternion) -> Quaternion {
        rhs.scalar_mul(self)
    }
}
