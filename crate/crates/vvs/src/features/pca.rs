//! PCA whitening of region descriptors with optional dimension reduction.

use nalgebra::{DMatrix, DVector};

use crate::error::{Result, VvsError};
use crate::io::FrameFeatures;
use crate::tensor::Tensor;

/// Variance floor added before the inverse square root.
pub const WHITEN_EPS: f64 = 1e-6;

/// Fitted whitening transform: rows are centered by `mean`, projected onto
/// the top `out_dim` principal axes, and scaled to unit variance.
#[derive(Debug, Clone)]
pub struct PcaModel {
    /// `[C_in]` training mean.
    pub mean: Vec<f32>,
    /// `[C_in, C_out]` orthonormal columns, descending eigenvalue order.
    pub components: Tensor,
    /// `[C_out]` eigenvalues, descending, non-negative.
    pub eigenvalues: Vec<f32>,
}

impl PcaModel {
    pub fn in_dim(&self) -> usize {
        self.components.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.components.shape()[1]
    }

    /// Project and whiten raw rows `[n, C_in]` to `[n, C_out]`, without the
    /// final per-row normalization.
    pub fn whiten_rows(&self, rows: &[f32], n: usize) -> Result<Vec<f32>> {
        let (c_in, c_out) = (self.in_dim(), self.out_dim());
        if rows.len() != n * c_in {
            return Err(VvsError::Shape {
                op: "whiten_rows",
                detail: format!("{} values for {n} rows of width {c_in}", rows.len()),
            });
        }
        let comp = self.components.data();
        let scale: Vec<f64> = self
            .eigenvalues
            .iter()
            .map(|&l| 1.0 / (l as f64 + WHITEN_EPS).sqrt())
            .collect();
        let mut out = vec![0.0f32; n * c_out];
        let mut centered = vec![0.0f64; c_in];
        for r in 0..n {
            let row = &rows[r * c_in..(r + 1) * c_in];
            for (dst, (&v, &m)) in centered.iter_mut().zip(row.iter().zip(&self.mean)) {
                *dst = (v - m) as f64;
            }
            for j in 0..c_out {
                let mut acc = 0.0f64;
                for i in 0..c_in {
                    acc += centered[i] * comp[i * c_out + j] as f64;
                }
                out[r * c_out + j] = (acc * scale[j]) as f32;
            }
        }
        Ok(out)
    }

    /// Whiten a feature tensor and L2-normalize each region row; marks the
    /// result as whitened.
    pub fn apply(&self, x: &FrameFeatures) -> Result<FrameFeatures> {
        let s = x.data.shape();
        if s[2] != self.in_dim() {
            return Err(VvsError::Shape {
                op: "apply_pca_whitening",
                detail: format!("feature C={} vs model C_in={}", s[2], self.in_dim()),
            });
        }
        let n = s[0] * s[1];
        let c_out = self.out_dim();
        let mut rows = self.whiten_rows(x.data.data(), n)?;
        for row in rows.chunks_exact_mut(c_out) {
            let norm = crate::tensor::l2_norm(row);
            if norm < crate::video_graph::NORM_EPS {
                return Err(VvsError::ZeroNorm {
                    op: "apply_pca_whitening",
                    norm,
                });
            }
            for v in row.iter_mut() {
                *v = (*v as f64 / norm) as f32;
            }
        }
        FrameFeatures::new(Tensor::new(&[s[0], s[1], c_out], rows)?, true)
    }

    /// Named tensors for checkpoint embedding.
    pub fn to_params(&self) -> Vec<(String, Tensor)> {
        vec![
            (
                "pca.mean".into(),
                Tensor::new(&[self.in_dim()], self.mean.clone()).expect("shape"),
            ),
            ("pca.components".into(), self.components.clone()),
            (
                "pca.eigenvalues".into(),
                Tensor::new(&[self.out_dim()], self.eigenvalues.clone()).expect("shape"),
            ),
        ]
    }

    pub fn from_params(params: &[(String, Tensor)]) -> Result<Self> {
        let find = |name: &str| -> Result<&Tensor> {
            params
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| VvsError::Format {
                    format: "VVSC",
                    detail: format!("missing section '{name}'"),
                })
        };
        let mean = find("pca.mean")?.data().to_vec();
        let components = find("pca.components")?.clone();
        let eigenvalues = find("pca.eigenvalues")?.data().to_vec();
        if components.shape().len() != 2
            || components.shape()[0] != mean.len()
            || components.shape()[1] != eigenvalues.len()
        {
            return Err(VvsError::Format {
                format: "VVSC",
                detail: format!(
                    "inconsistent whitening sections: mean {}, components {:?}, eigenvalues {}",
                    mean.len(),
                    components.shape(),
                    eigenvalues.len()
                ),
            });
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }
}

/// Fit whitening on raw region rows drawn from `features`, keeping the top
/// `out_dim` principal axes.
pub fn fit_pca_whitening<'a, I>(features: I, out_dim: usize) -> Result<PcaModel>
where
    I: IntoIterator<Item = &'a FrameFeatures>,
{
    let mut rows: Vec<f64> = Vec::new();
    let mut c_in = 0usize;
    let mut n = 0usize;
    for f in features {
        let s = f.data.shape();
        if c_in == 0 {
            c_in = s[2];
        } else if s[2] != c_in {
            return Err(VvsError::Shape {
                op: "fit_pca_whitening",
                detail: format!("mixed channel widths {c_in} and {}", s[2]),
            });
        }
        n += s[0] * s[1];
        rows.extend(f.data.data().iter().map(|&v| v as f64));
    }
    fit_pca_rows(&rows, n, c_in, out_dim)
}

fn fit_pca_rows(rows: &[f64], n: usize, c_in: usize, out_dim: usize) -> Result<PcaModel> {
    if out_dim == 0 || out_dim > c_in {
        return Err(VvsError::Config(format!(
            "whitening out_dim {out_dim} must be in [1, {c_in}]"
        )));
    }
    if n < out_dim.max(2) {
        return Err(VvsError::Config(format!(
            "whitening needs at least {} sample rows, got {n}",
            out_dim.max(2)
        )));
    }
    let mut mean = DVector::<f64>::zeros(c_in);
    for row in rows.chunks_exact(c_in) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean /= n as f64;

    let mut cov = DMatrix::<f64>::zeros(c_in, c_in);
    let mut centered = vec![0.0f64; c_in];
    for row in rows.chunks_exact(c_in) {
        for (dst, (&v, m)) in centered.iter_mut().zip(row.iter().zip(mean.iter())) {
            *dst = v - m;
        }
        for i in 0..c_in {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            for j in i..c_in {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..c_in {
        for j in i..c_in {
            let v = cov[(i, j)] / denom;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = cov.symmetric_eigen();
    let mut order: Vec<usize> = (0..c_in).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .expect("finite eigenvalues")
            .then(a.cmp(&b))
    });

    let lam_max = eig.eigenvalues[order[0]].max(0.0);
    let tol = lam_max * 1e-9;
    let rank = order
        .iter()
        .take_while(|&&i| eig.eigenvalues[i] > tol)
        .count();
    if rank < out_dim {
        return Err(VvsError::RankDeficient {
            requested: out_dim,
            rank,
        });
    }

    let mut components = vec![0.0f32; c_in * out_dim];
    let mut eigenvalues = vec![0.0f32; out_dim];
    for (j, &src) in order.iter().take(out_dim).enumerate() {
        let col = eig.eigenvectors.column(src);
        let lead = (0..c_in)
            .max_by(|&a, &b| col[a].abs().partial_cmp(&col[b].abs()).expect("finite"))
            .expect("non-empty column");
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..c_in {
            components[i * out_dim + j] = (col[i] * sign) as f32;
        }
        eigenvalues[j] = eig.eigenvalues[src].max(0.0) as f32;
    }

    Ok(PcaModel {
        mean: mean.iter().map(|&v| v as f32).collect(),
        components: Tensor::new(&[c_in, out_dim], components)?,
        eigenvalues,
    })
}
