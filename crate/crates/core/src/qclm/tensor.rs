use crate::cam::AggregatedCorrelation;
use crate::error::{shape_err, Result};
use crate::quat::Quaternion;
use crate::tensor::RealTensor;

/// Four congruent `[C,H,W]` planes read elementwise as quaternions.
#[derive(Debug, Clone, PartialEq)]
pub struct QuatTensor {
    pub r: RealTensor,
    pub x: RealTensor,
    pub y: RealTensor,
    pub z: RealTensor,
}

impl QuatTensor {
    pub fn new(r: RealTensor, x: RealTensor, y: RealTensor, z: RealTensor) -> Result<Self> {
        r.expect_rank(3, "quaternion plane")?;
        for p in [&x, &y, &z] {
            if p.shape() != r.shape() {
                return Err(shape_err(format!(
                    "quaternion planes disagree: {:?} vs {:?}",
                    r.shape(),
                    p.shape()
                )));
            }
        }
        Ok(Self { r, x, y, z })
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        let z = RealTensor::zeros(&[c, h, w]);
        Self {
            r: z.clone(),
            x: z.clone(),
            y: z.clone(),
            z,
        }
    }

    /// Plane shape `[C, H, W]`.
    pub fn shape(&self) -> &[usize] {
        self.r.shape()
    }

    pub fn channels(&self) -> usize {
        self.r.shape()[0]
    }

    pub fn planes(&self) -> [&RealTensor; 4] {
        [&self.r, &self.x, &self.y, &self.z]
    }

    /// Planes stacked on a leading axis: `[4, C, H, W]`.
    pub fn stacked(&self) -> RealTensor {
        let s = self.shape();
        let mut data = Vec::with_capacity(4 * self.r.len());
        for p in self.planes() {
            data.extend_from_slice(p.data());
        }
        RealTensor::from_parts(vec![4, s[0], s[1], s[2]], data)
    }

    pub fn from_stacked(t: &RealTensor) -> Result<Self> {
        t.expect_rank(4, "stacked quaternion tensor")?;
        if t.shape()[0] != 4 {
            return Err(shape_err(format!(
                "stacked quaternion tensor needs a leading 4, got {:?}",
                t.shape()
            )));
        }
        let plane = t.len() / 4;
        let shape = t.shape()[1..].to_vec();
        let part = |i: usize| RealTensor::from_parts(shape.clone(), t.data()[i * plane..(i + 1) * plane].to_vec());
        Ok(Self {
            r: part(0),
            x: part(1),
            y: part(2),
            z: part(3),
        })
    }

    pub fn at(&self, index: &[usize]) -> Quaternion {
        Quaternion {
            r: self.r.get(index),
            x: self.x.get(index),
            y: self.y.get(index),
            z: self.z.get(index),
        }
    }

    pub fn add(&self, other: &QuatTensor) -> Result<QuatTensor> {
        QuatTensor::new(
            self.r.add(&other.r)?,
            self.x.add(&other.x)?,
            self.y.add(&other.y)?,
            self.z.add(&other.z)?,
        )
    }

    pub fn scale(&self, a: f64) -> QuatTensor {
        QuatTensor {
            r: self.r.scale(a),
            x: self.x.scale(a),
            y: self.y.scale(a),
            z: self.z.scale(a),
        }
    }
}

/// Routes the 2×2 support slices of `[Hq,Wq,2,2,D]` onto quaternion
/// components in raster order: (0,0)→r, (0,1)→x, (1,0)→y, (1,1)→z.
pub fn encapsulate(agg: &AggregatedCorrelation) -> Result<QuatTensor> {
    let t = agg.tensor();
    let s = t.shape();
    if s.len() != 5 || s[2] != 2 || s[3] != 2 {
        return Err(shape_err(format!("encapsulate needs [Hq,Wq,2,2,D], got {s:?}")));
    }
    // [Hq,Wq,2,2,D] → [2,2,D,Hq,Wq] = [4,D,Hq,Wq]
    let stacked = t.permute(&[2, 3, 4, 0, 1])?.into_reshaped(&[4, s[4], s[0], s[1]])?;
    QuatTensor::from_stacked(&stacked)
}

/// Inverse of [`encapsulate`].
pub fn decapsulate(q: &QuatTensor) -> Result<AggregatedCorrelation> {
    let s = q.shape();
    let t = q.stacked().into_reshaped(&[2, 2, s[0], s[1], s[2]])?;
    AggregatedCorrelation::new(t.permute(&[3, 4, 0, 1, 2])?)
}
