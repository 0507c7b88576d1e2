//! Pure (non-differentiable) video feature operations.
//!
//! These run on plain [`Tensor`] values and back the evaluation, oracle,
//! and benchmark paths. The training path re-implements the differentiable
//! subset on [`crate::graph::Graph`]; unit tests pin the two routes to each
//! other so they cannot drift apart.

use crate::error::{Result, VvsError};
use crate::tensor::Tensor;

/// Region correlation tensor of `a [Ta, S2, C]` against `b [Tb, S2, C]`:
/// `out[i, p, q, j] = sum_c a[i, p, c] * b[j, q, c]`, shape `[Ta, S2, S2, Tb]`.
pub fn tensor_dot(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[1] != sb[1] || sa[2] != sb[2] {
        return Err(VvsError::Shape {
            op: "tensor_dot",
            detail: format!("a {:?} vs b {:?}", sa, sb),
        });
    }
    let (ta, s2, c) = (sa[0], sa[1], sa[2]);
    let tb = sb[0];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; ta * s2 * s2 * tb];
    for i in 0..ta {
        for p in 0..s2 {
            let arow = &ad[(i * s2 + p) * c..(i * s2 + p + 1) * c];
            for q in 0..s2 {
                for j in 0..tb {
                    let brow = &bd[(j * s2 + q) * c..(j * s2 + q + 1) * c];
                    let mut acc = 0.0f32;
                    for (x, y) in arow.iter().zip(brow) {
                        acc += x * y;
                    }
                    out[((i * s2 + p) * s2 + q) * tb + j] = acc;
                }
            }
        }
    }
    Tensor::new(&[ta, s2, s2, tb], out)
}

/// Chamfer similarity over the last two axes of `d [..., N, M]`: for each
/// leading index, the mean over rows of the per-row maximum. Collapses the
/// last two axes; a 2-d input yields a scalar.
pub fn chamfer_similarity(d: &Tensor) -> Result<Tensor> {
    let s = d.shape();
    if s.len() < 2 || s[s.len() - 1] == 0 || s[s.len() - 2] == 0 {
        return Err(VvsError::Shape {
            op: "chamfer_similarity",
            detail: format!("need trailing [N, M] axes, got {:?}", s),
        });
    }
    let (n, m) = (s[s.len() - 2], s[s.len() - 1]);
    let batch: usize = s[..s.len() - 2].iter().product();
    let dd = d.data();
    let mut out = vec![0.0f32; batch];
    for b in 0..batch {
        let block = &dd[b * n * m..(b + 1) * n * m];
        let mut acc = 0.0f64;
        for row in block.chunks_exact(m) {
            acc += row.iter().fold(f32::NEG_INFINITY, |mx, &v| mx.max(v)) as f64;
        }
        out[b] = (acc / n as f64) as f32;
    }
    Tensor::new(&s[..s.len() - 2], out)
}

/// Frame similarity map `[Ta, Tb]`: the region correlation tensor reduced
/// over cell pairs by max-then-mean. Equal to permuting [`tensor_dot`]
/// output to `[Ta, Tb, S2, S2]` and applying [`chamfer_similarity`], but
/// computed without the 4-d intermediate.
pub fn frame_similarity_map(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[1] != sb[1] || sa[2] != sb[2] {
        return Err(VvsError::Shape {
            op: "frame_similarity_map",
            detail: format!("a {:?} vs b {:?}", sa, sb),
        });
    }
    let (ta, s2, c) = (sa[0], sa[1], sa[2]);
    let tb = sb[0];
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0f32; ta * tb];
    for i in 0..ta {
        for j in 0..tb {
            let mut acc = 0.0f64;
            for p in 0..s2 {
                let arow = &ad[(i * s2 + p) * c..(i * s2 + p + 1) * c];
                let mut best = f32::NEG_INFINITY;
                for q in 0..s2 {
                    let brow = &bd[(j * s2 + q) * c..(j * s2 + q + 1) * c];
                    let mut dot = 0.0f32;
                    for (x, y) in arow.iter().zip(brow) {
                        dot += x * y;
                    }
                    best = best.max(dot);
                }
                acc += best as f64;
            }
            out[i * tb + j] = (acc / s2 as f64) as f32;
        }
    }
    Tensor::new(&[ta, tb], out)
}

/// Video-level similarity of two embeddings: chamfer of the 1x1 case
/// degenerates to the dot product, which for unit vectors is the cosine.
pub fn video_similarity(a: &[f32], b: &[f32]) -> f32 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum::<f64>() as f32
}

/// Spatio-temporal average pool of `x [T, S2, C]` to a unit vector `[C]`.
pub fn st_gap(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(VvsError::Shape {
            op: "st_gap",
            detail: format!("expected [T, S2, C], got {:?}", s),
        });
    }
    let (rows, c) = (s[0] * s[1], s[2]);
    let mut mean = vec![0.0f64; c];
    for row in x.data().chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v as f64;
        }
    }
    for m in mean.iter_mut() {
        *m /= rows as f64;
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm < crate::video_graph::NORM_EPS {
        return Err(VvsError::ZeroNorm { op: "st_gap", norm });
    }
    Tensor::new(&[c], mean.iter().map(|v| (v / norm) as f32).collect())
}

/// Per-frame spatial average pool of `x [T, S2, C]` to unit rows `[T, C]`.
pub fn s_gap(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(VvsError::Shape {
            op: "s_gap",
            detail: format!("expected [T, S2, C], got {:?}", s),
        });
    }
    let (t, s2, c) = (s[0], s[1], s[2]);
    let mut out = vec![0.0f32; t * c];
    for fr in 0..t {
        let mut mean = vec![0.0f64; c];
        for sp in 0..s2 {
            let row = &x.data()[(fr * s2 + sp) * c..(fr * s2 + sp + 1) * c];
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        for m in mean.iter_mut() {
            *m /= s2 as f64;
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < crate::video_graph::NORM_EPS {
            return Err(VvsError::ZeroNorm { op: "s_gap", norm });
        }
        for k in 0..c {
            out[fr * c + k] = (mean[k] / norm) as f32;
        }
    }
    Tensor::new(&[t, c], out)
}

/// Main-diagonal slice of `e [T, T, C]`: `out[t, c] = e[t, t, c]`.
pub fn diagonal_sampling(e: &Tensor) -> Result<Tensor> {
    let s = e.shape();
    if s.len() != 3 || s[0] != s[1] {
        return Err(VvsError::Shape {
            op: "diagonal_sampling",
            detail: format!("expected [T, T, C], got {:?}", s),
        });
    }
    let (t, c) = (s[0], s[2]);
    let mut out = vec![0.0f32; t * c];
    for fr in 0..t {
        out[fr * c..(fr + 1) * c]
            .copy_from_slice(&e.data()[(fr * t + fr) * c..(fr * t + fr + 1) * c]);
    }
    Tensor::new(&[t, c], out)
}

/// Soft gate `sigma * logistic(h / tau) - offset`, elementwise.
pub fn tempered_sigmoid(h: &Tensor, sigma: f32, tau: f32, offset: f32) -> Tensor {
    let data = h
        .data()
        .iter()
        .map(|&v| sigma * crate::graph::logistic(v / tau) - offset)
        .collect();
    Tensor::new(h.shape(), data).expect("shape preserved")
}

/// Unit step with `H(0) = 1`.
pub fn heaviside(x: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data).expect("shape preserved")
}

/// Scale every region of frame `t` by `w[t]`.
pub fn hadamard_weight(x: &Tensor, w: &[f32]) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || w.len() != s[0] {
        return Err(VvsError::Shape {
            op: "hadamard_weight",
            detail: format!("x {:?} vs w len {}", s, w.len()),
        });
    }
    let per = s[1] * s[2];
    let mut out = x.data().to_vec();
    for (fr, &wv) in w.iter().enumerate() {
        for v in &mut out[fr * per..(fr + 1) * per] {
            *v *= wv;
        }
    }
    Tensor::new(s, out)
}

/// Cosine similarity of two equal-length vectors.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(VvsError::Shape {
            op: "cosine_similarity",
            detail: format!("lengths {} vs {}", a.len(), b.len()),
        });
    }
    let na = crate::tensor::l2_norm(a);
    let nb = crate::tensor::l2_norm(b);
    if na < crate::video_graph::NORM_EPS || nb < crate::video_graph::NORM_EPS {
        return Err(VvsError::ZeroNorm {
            op: "cosine_similarity",
            norm: na.min(nb),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    Ok((dot / (na * nb)) as f32)
}

/// Weighted video embedding: frame weights, average pool, unit norm.
pub fn embed_video(x: &Tensor, w: &[f32]) -> Result<Tensor> {
    let weighted = hadamard_weight(x, w)?;
    st_gap(&weighted)
}

/// Nearest-neighbor resampling of a 1-d signal to `target_len`
/// (center-aligned source indices).
pub fn resample_nearest(values: &[f32], target_len: usize) -> Vec<f32> {
    assert!(
        !values.is_empty() && target_len > 0,
        "resample_nearest: empty input"
    );
    let src_len = values.len();
    (0..target_len)
        .map(|t| {
            let idx = ((t as f64 + 0.5) * src_len as f64 / target_len as f64) as usize;
            values[idx.min(src_len - 1)]
        })
        .collect()
}
