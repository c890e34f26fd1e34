//! As-rigid-as-possible deformation energy.

use nalgebra::Matrix3;

use crate::error::{Error, Result};
use crate::math::Vec3;
use crate::mesh::TriMesh;

/// ARAP energy with precomputed one-ring neighbourhoods and unit weights.
///
/// `E = sum_i sum_{j in N(i)} |(v'_i - v'_j) - R_i (v_i - v_j)|^2`, summed
/// over ordered pairs, with `R_i` the best local rotation. The gradient holds
/// the rotations fixed; because each `R_i` minimises its own term, this is
/// also the exact gradient of `E`.
#[derive(Clone, Debug)]
pub struct Arap {
    rest: Vec<Vec3>,
    rings: Vec<Vec<usize>>,
}

impl Arap {
    pub fn new(canonical: &TriMesh) -> Self {
        Arap {
            rest: canonical.vertices.clone(),
            rings: canonical.one_rings(),
        }
    }

    /// Sum of `|v_i - v_j|^2` over the same ordered pairs as the energy.
    pub fn rest_scale(&self) -> f64 {
        self.rings
            .iter()
            .enumerate()
            .flat_map(|(i, ring)| ring.iter().map(move |&j| (i, j)))
            .map(|(i, j)| (self.rest[i] - self.rest[j]).norm_squared())
            .sum()
    }

    pub fn rotations(&self, deformed: &[Vec3]) -> Vec<Matrix3<f64>> {
        self.rings
            .iter()
            .enumerate()
            .map(|(i, ring)| {
                // Undeformed neighbourhoods are exactly unrotated.
                if ring.iter().all(|&j| deformed[i] - deformed[j] == self.rest[i] - self.rest[j]) {
                    return Matrix3::identity();
                }
                let mut cov = Matrix3::zeros();
                for &j in ring {
                    cov += (self.rest[i] - self.rest[j]) * (deformed[i] - deformed[j]).transpose();
                }
                best_rotation(&cov)
            })
            .collect()
    }

    pub fn energy(&self, deformed: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
        if deformed.len() != self.rest.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.rest.len(), 3],
                actual: vec![deformed.len(), 3],
            });
        }
        let rot = self.rotations(deformed);
        let mut energy = 0.0;
        let mut grad = vec![Vec3::zeros(); deformed.len()];
        for (i, ring) in self.rings.iter().enumerate() {
            for &j in ring {
                let r = (deformed[i] - deformed[j]) - rot[i] * (self.rest[i] - self.rest[j]);
                energy += r.norm_squared();
                grad[i] += 2.0 * r;
                grad[j] -= 2.0 * r;
            }
        }
        Ok((energy, grad))
    }
}

/// Rotation maximising `tr(R S)` for the covariance `S = sum e e'^T`,
/// with the reflection case corrected to `det R = +1`.
fn best_rotation(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = cov.svd(true, true);
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let v = v_t.transpose();
    let mut r = v * u.transpose();
    if r.determinant() < 0.0 {
        let k = svd.singular_values.imin();
        let mut u = u;
        u.column_mut(k).neg_mut();
        r = v * u.transpose();
    }
    r
}

/// One-shot ARAP energy and gradient of `deformed` relative to `canonical`.
pub fn arap_energy(canonical: &TriMesh, deformed: &[Vec3]) -> Result<(f64, Vec<Vec3>)> {
    Arap::new(canonical).energy(deformed)
}
