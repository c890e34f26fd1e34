//! Principal component analysis of pooled feature cells.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::io::tensorfile::{self, NamedArray};
use crate::io::Image;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// `d_F` orthonormal rows of length `C`.
    pub components: Vec<Vec<f64>>,
    /// Variance along each component, non-increasing.
    pub variances: Vec<f64>,
}

impl PcaBasis {
    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    pub fn project(&self, x: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(x.iter().zip(&self.mean)).map(|(c, (x, m))| c * (x - m)).sum())
            .collect()
    }

    /// Projects every cell of a feature map.
    pub fn project_map(&self, map: &Image) -> Result<Image> {
        if map.channels != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: vec![map.height, map.width, self.input_dim()],
                actual: map.shape().to_vec(),
            });
        }
        let data = map.data.chunks_exact(map.channels).flat_map(|cell| self.project(cell)).collect();
        Image::from_data(map.width, map.height, self.dim(), data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (d, c) = (self.dim(), self.input_dim());
        let arrays = vec![
            NamedArray::f64("mean", vec![c], self.mean.clone()),
            NamedArray::f64("components", vec![d, c], self.components.concat()),
            NamedArray::f64("variances", vec![d], self.variances.clone()),
        ];
        tensorfile::write(path, &serde_json::json!({ "kind": "pca_basis" }), &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (_, arrays) = tensorfile::read(path)?;
        let get = |name: &str| {
            arrays
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| Error::format("PCA basis", path, format!("missing array {name}")))
        };
        let (mean, comp, var) = (get("mean")?, get("components")?, get("variances")?);
        let c = mean.len();
        let d = var.len();
        if comp.shape != [d, c] || c == 0 {
            return Err(Error::format("PCA basis", path, format!("components shape {:?}", comp.shape)));
        }
        Ok(PcaBasis {
            mean: mean.to_f64(),
            components: comp.to_f64().chunks_exact(c).map(<[f64]>::to_vec).collect(),
            variances: var.to_f64(),
        })
    }
}

/// Mean-centred PCA over all cells of all maps; keeps the top `d_f`
/// eigenvectors of the covariance.
pub fn fit_pca(maps: &[Image], d_f: usize) -> Result<PcaBasis> {
    let c = maps.first().map(|m| m.channels).unwrap_or(0);
    if c == 0 || maps.iter().any(|m| m.channels != c) {
        return Err(Error::InvalidConfig("PCA needs feature maps with a common, nonzero channel count".into()));
    }
    let cells: usize = maps.iter().map(|m| m.width * m.height).sum();
    if d_f == 0 || d_f > c || cells < d_f {
        return Err(Error::InvalidConfig(format!(
            "cannot fit {d_f} components to {cells} cells of {c} channels"
        )));
    }
    let mut mean = vec![0.0; c];
    for m in maps {
        for cell in m.data.chunks_exact(c) {
            for (a, x) in mean.iter_mut().zip(cell) {
                *a += x / cells as f64;
            }
        }
    }
    let mut cov = DMatrix::<f64>::zeros(c, c);
    for m in maps {
        for cell in m.data.chunks_exact(c) {
            for i in 0..c {
                let di = cell[i] - mean[i];
                for j in 0..c {
                    cov[(i, j)] += di * (cell[j] - mean[j]) / cells as f64;
                }
            }
        }
    }
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            array: "feature maps".into(),
        });
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let mut components = Vec::with_capacity(d_f);
    let mut variances = Vec::with_capacity(d_f);
    for &k in &order[..d_f] {
        let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = v.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        if pivot < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(v);
        variances.push(eig.eigenvalues[k].max(0.0));
    }
    Ok(PcaBasis {
        mean,
        components,
        variances,
    })
}
