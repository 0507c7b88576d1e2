//! Multi-level region max-pooling of backbone activation maps onto a fixed
//! spatial grid, and channel-axis assembly across layers.

use crate::error::{Result, VvsError};
use crate::io::FrameFeatures;
use crate::tensor::Tensor;

/// Side of the fixed region grid; every level's region vectors are
/// accumulated into these cells.
pub const GRID_SIDE: usize = 3;
/// Region count of the assembled feature (`S2`).
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;
/// Default number of region granularity levels.
pub const DEFAULT_LEVELS: usize = 4;

/// Backbone activation dump for one video: `K` layers, layer `k` shaped
/// `[T, H_k, W_k, C_k]`, all sharing the frame count.
#[derive(Debug, Clone)]
pub struct ActivationStack {
    pub video_id: String,
    pub layers: Vec<Tensor>,
    pub backbone_tag: String,
}

impl ActivationStack {
    pub fn new(
        video_id: impl Into<String>,
        layers: Vec<Tensor>,
        backbone_tag: impl Into<String>,
    ) -> Result<Self> {
        let video_id = video_id.into();
        if layers.is_empty() {
            return Err(VvsError::Manifest(format!(
                "activation stack '{video_id}' has no layers"
            )));
        }
        let t = layers[0].shape()[0];
        for (k, layer) in layers.iter().enumerate() {
            let s = layer.shape();
            if s.len() != 4 {
                return Err(VvsError::Shape {
                    op: "activation_stack",
                    detail: format!("layer {k} shaped {:?}, expected [T, H, W, Ck]", s),
                });
            }
            if s[0] != t {
                return Err(VvsError::Manifest(format!(
                    "activation stack '{video_id}': layer {k} has {} frames, layer 0 has {t}",
                    s[0]
                )));
            }
        }
        Ok(Self {
            video_id,
            layers,
            backbone_tag: backbone_tag.into(),
        })
    }

    pub fn frames(&self) -> usize {
        self.layers[0].shape()[0]
    }

    /// Total channel width after concatenation.
    pub fn channels(&self) -> usize {
        self.layers.iter().map(|l| l.shape()[3]).sum()
    }
}

/// Square regions of one granularity level over an `H x W` map: level `l`
/// uses an `l x l` arrangement of side `ceil(2 * min(H, W) / (l + 1))`,
/// spread to the map corners (centered when `l = 1`).
fn level_regions(h: usize, w: usize, level: usize) -> Result<Vec<(usize, usize, usize)>> {
    let short = h.min(w);
    let side = (2 * short).div_ceil(level + 1);
    if side == 0 || side > short {
        return Err(VvsError::Config(format!(
            "level {level} region side {side} does not fit a {h}x{w} map"
        )));
    }
    let offset = |span: usize, i: usize| -> usize {
        if level == 1 {
            (span - side) / 2
        } else {
            ((i as f64) * ((span - side) as f64) / ((level - 1) as f64)).round() as usize
        }
    };
    let mut regions = Vec::with_capacity(level * level);
    for i in 0..level {
        for j in 0..level {
            regions.push((offset(h, i), offset(w, j), side));
        }
    }
    Ok(regions)
}

/// Grid cell receiving a region whose center pixel coordinate is `center`
/// on an axis of length `span`.
fn grid_cell(center: f64, span: usize) -> usize {
    let frac = (center + 0.5) / span as f64;
    ((frac * GRID_SIDE as f64) as usize).min(GRID_SIDE - 1)
}

/// Region max-pooling of one activation map `[H, W, Ck]` over `levels`
/// granularities, accumulated into the fixed grid: `[GRID_CELLS, Ck]`.
pub fn rmac_pool(layer: &Tensor, levels: usize) -> Result<Tensor> {
    let s = layer.shape();
    if s.len() != 3 {
        return Err(VvsError::Shape {
            op: "rmac_pool",
            detail: format!("expected [H, W, Ck], got {:?}", s),
        });
    }
    if levels == 0 {
        return Err(VvsError::Config(
            "rmac_pool needs at least one level".into(),
        ));
    }
    let (h, w, ck) = (s[0], s[1], s[2]);
    let data = layer.data();
    let mut out = vec![0.0f32; GRID_CELLS * ck];
    for level in 1..=levels {
        for (r0, c0, side) in level_regions(h, w, level)? {
            let cell_r = grid_cell(r0 as f64 + (side as f64 - 1.0) / 2.0, h);
            let cell_c = grid_cell(c0 as f64 + (side as f64 - 1.0) / 2.0, w);
            let cell = cell_r * GRID_SIDE + cell_c;
            for ch in 0..ck {
                let mut mx = f32::NEG_INFINITY;
                for r in r0..r0 + side {
                    for c in c0..c0 + side {
                        mx = mx.max(data[(r * w + c) * ck + ch]);
                    }
                }
                out[cell * ck + ch] += mx;
            }
        }
    }
    Tensor::new(&[GRID_CELLS, ck], out)
}

/// Assemble the frame feature tensor `[T, GRID_CELLS, C]` from a stack:
/// per frame, pool each layer and concatenate along channels in layer
/// order, `C = sum of layer widths`.
pub fn assemble_imac(stack: &ActivationStack, levels: usize) -> Result<FrameFeatures> {
    let t = stack.frames();
    let c = stack.channels();
    let mut out = vec![0.0f32; t * GRID_CELLS * c];
    for fr in 0..t {
        let mut col = 0usize;
        for layer in &stack.layers {
            let s = layer.shape();
            let (h, w, ck) = (s[1], s[2], s[3]);
            let frame = Tensor::new(
                &[h, w, ck],
                layer.data()[fr * h * w * ck..(fr + 1) * h * w * ck].to_vec(),
            )?;
            let pooled = rmac_pool(&frame, levels)?;
            for cell in 0..GRID_CELLS {
                let dst = (fr * GRID_CELLS + cell) * c + col;
                out[dst..dst + ck].copy_from_slice(&pooled.data()[cell * ck..(cell + 1) * ck]);
            }
            col += ck;
        }
    }
    FrameFeatures::new(Tensor::new(&[t, GRID_CELLS, c], out)?, false)
}

/// Frobenius norm of a raw (pre-whitening) frame tensor `[S2, C]`.
pub fn frame_magnitude(x_raw: &[f32]) -> f32 {
    crate::tensor::l2_norm(x_raw) as f32
}

/// Per-frame magnitudes of a raw feature tensor `[T, S2, C]`.
pub fn frame_magnitudes(x: &Tensor) -> Result<Vec<f32>> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(VvsError::Shape {
            op: "frame_magnitudes",
            detail: format!("expected [T, S2, C], got {:?}", s),
        });
    }
    let per = s[1] * s[2];
    Ok(x.data().chunks_exact(per).map(frame_magnitude).collect())
}
