//! Principal component analysis via the eigen-decomposition of the centred
//! data's Gram matrix.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::LearnError;

/// Fitted projection onto the top-k principal axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// k×d, rows orthonormal, sorted by descending variance.
    pub components: Vec<Vec<f64>>,
    /// Sample variance along each component.
    pub explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn d(&self) -> usize {
        self.mean.len()
    }

    pub fn transform_row(&self, x: &[f64]) -> Result<Vec<f64>, LearnError> {
        if x.len() != self.d() {
            return Err(LearnError::DimensionMismatch {
                expected: self.d(),
                found: x.len(),
            });
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(x).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect())
    }

    /// `(X - mean) · componentsᵀ`
    pub fn transform(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, LearnError> {
        x.iter().map(|row| self.transform_row(row)).collect()
    }

    pub fn inverse_transform_row(&self, z: &[f64]) -> Result<Vec<f64>, LearnError> {
        if z.len() != self.k() {
            return Err(LearnError::DimensionMismatch {
                expected: self.k(),
                found: z.len(),
            });
        }
        let mut out = self.mean.clone();
        for (zi, c) in z.iter().zip(&self.components) {
            for (o, cj) in out.iter_mut().zip(c) {
                *o += zi * cj;
            }
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram–Schmidt. Directions that collapse (possible only when the
/// data have fewer nonzero singular values than `k`) are replaced by the
/// first standard basis vector that is still independent.
fn orthonormalize(rows: &mut [Vec<f64>], d: usize) {
    let mut basis = 0;
    for i in 0..rows.len() {
        loop {
            for j in 0..i {
                let p = dot(&rows[i], &rows[j]);
                let (head, tail) = rows.split_at_mut(i);
                for (a, b) in tail[0].iter_mut().zip(&head[j]) {
                    *a -= p * b;
                }
            }
            let norm = dot(&rows[i], &rows[i]).sqrt();
            if norm > 1e-10 {
                rows[i].iter_mut().for_each(|v| *v /= norm);
                break;
            }
            let mut e = vec![0.0; d];
            e[basis % d] = 1.0;
            basis += 1;
            rows[i] = e;
        }
    }
}

/// Fits a k-component PCA. Components are sign-normalised so the entry of
/// largest magnitude is positive.
pub fn pca_fit(x: &[Vec<f64>], k: usize) -> Result<PcaModel, LearnError> {
    let n = x.len();
    if n < 2 {
        return Err(LearnError::Invalid(format!("PCA needs at least 2 rows, got {n}")));
    }
    let d = x[0].len();
    if let Some(row) = x.iter().find(|r| r.len() != d) {
        return Err(LearnError::DimensionMismatch {
            expected: d,
            found: row.len(),
        });
    }
    if k == 0 || k > n.min(d) {
        return Err(LearnError::InvalidK { k, max: n.min(d) });
    }
    let mut mean = vec![0.0; d];
    for row in x {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let centred = DMatrix::from_fn(n, d, |i, j| x[i][j] - mean[j]);
    // Eigen-decomposition of the smaller Gram matrix. For n < d the axes are
    // recovered as Xᵀu / ‖Xᵀu‖, which keeps them inside the row space.
    let wide = n < d;
    let gram = if wide {
        &centred * centred.transpose()
    } else {
        centred.transpose() * &centred
    };
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&r| {
            let v = eig.eigenvectors.column(r);
            if wide {
                (centred.transpose() * v).iter().copied().collect()
            } else {
                v.iter().copied().collect()
            }
        })
        .collect();
    orthonormalize(&mut components, d);
    for c in &mut components {
        let mut best = 0;
        for (j, v) in c.iter().enumerate() {
            if v.abs() > c[best].abs() {
                best = j;
            }
        }
        if c[best] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
    }
    let explained_variance = order[..k]
        .iter()
        .map(|&r| eig.eigenvalues[r].max(0.0) / (n - 1) as f64)
        .collect();
    Ok(PcaModel {
        mean,
        components,
        explained_variance,
    })
}
