//! Temporal saliency: tune pairwise frame-similarity maps with a small
//! conv stack, extract per-frame saliency pseudo-labels from the tuned
//! positive map, and predict saliency weights `W_sa` from a video's
//! self-similarity diagonal with a transformer encoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VvsError};
use crate::graph::{Graph, NodeId};
use crate::layers::Pad;
use crate::nn::{kaiming_uniform, ParamSet};
use crate::tensor::Tensor;
use crate::video_ops::resample_nearest;

/// Margin of the frame-level triplet term.
pub const FRAME_MARGIN: f32 = 0.5;
/// Total shrink of each map axis across the four valid 3x3 tune convs.
pub const TUNE_SHRINK: usize = 8;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TsmConfig {
    /// Channel widths of the first three tune convs (the fourth returns
    /// to one channel).
    pub tune_widths: (usize, usize, usize),
    /// Token width of the saliency encoder.
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
}

impl TsmConfig {
    pub fn new() -> Self {
        Self {
            tune_widths: (32, 32, 64),
            model_dim: 128,
            heads: 8,
            ffn_dim: 512,
        }
    }

    /// Narrow stack for gradient-check suites.
    pub fn toy() -> Self {
        Self {
            tune_widths: (3, 3, 4),
            model_dim: 8,
            heads: 2,
            ffn_dim: 16,
        }
    }
}

impl Default for TsmConfig {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-frame saliency pseudo-label derived from a tuned positive map.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyLabel {
    /// One 0/1 entry per tuned-map row.
    pub values: Vec<f32>,
    /// `values` nearest-resampled to the anchor's frame count.
    pub resampled: Vec<f32>,
}

/// Parameter indices of the tune and saliency paths inside a shared
/// [`ParamSet`]. The two paths share no parameters.
#[derive(Debug, Clone)]
pub struct TsmModel {
    pub cfg: TsmConfig,
    tune_w: [usize; 4],
    tune_b: [usize; 4],
    bott_w: usize,
    bott_b: usize,
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    ffn1_w: usize,
    ffn1_b: usize,
    ffn2_w: usize,
    ffn2_b: usize,
    head_w: usize,
    head_b: usize,
}

impl TsmModel {
    pub fn init(set: &mut ParamSet, cfg: TsmConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (c1, c2, c3) = cfg.tune_widths;
        let d = cfg.model_dim;
        if !d.is_multiple_of(cfg.heads) {
            return Err(VvsError::Config(format!(
                "tsm: model_dim {d} not divisible by heads {}",
                cfg.heads
            )));
        }
        let chans = [(c1, 1), (c2, c1), (c3, c2), (1, c3)];
        let mut tune_w = [0usize; 4];
        let mut tune_b = [0usize; 4];
        for (i, &(cout, cin)) in chans.iter().enumerate() {
            let fan = cin * 9;
            tune_w[i] =
                set.add_or_init(&format!("tsm.tune{}.w", i + 1), &[cout, cin, 3, 3], || {
                    kaiming_uniform(cout * fan, fan, rng)
                })?;
            tune_b[i] =
                set.add_or_init(&format!("tsm.tune{}.b", i + 1), &[cout], || vec![0.0; cout])?;
        }
        let bott_w = set.add_or_init("tsm.bottleneck.w", &[d, 1, 1, 1], || {
            kaiming_uniform(d, 1, rng)
        })?;
        let bott_b = set.add_or_init("tsm.bottleneck.b", &[d], || vec![0.0; d])?;

        let mut proj = |name: &str| -> Result<(usize, usize)> {
            let w = set.add_or_init(&format!("tsm.enc.{name}.w"), &[d, d], || {
                kaiming_uniform(d * d, d, rng)
            })?;
            let b = set.add_or_init(&format!("tsm.enc.{name}.b"), &[d], || vec![0.0; d])?;
            Ok((w, b))
        };
        let (wq, bq) = proj("q")?;
        let (wk, bk) = proj("k")?;
        let (wv, bv) = proj("v")?;
        let (wo, bo) = proj("o")?;
        let ln1_g = set.add_or_init("tsm.enc.ln1.g", &[d], || vec![1.0; d])?;
        let ln1_b = set.add_or_init("tsm.enc.ln1.b", &[d], || vec![0.0; d])?;
        let ln2_g = set.add_or_init("tsm.enc.ln2.g", &[d], || vec![1.0; d])?;
        let ln2_b = set.add_or_init("tsm.enc.ln2.b", &[d], || vec![0.0; d])?;
        let f = cfg.ffn_dim;
        let ffn1_w =
            set.add_or_init("tsm.enc.ffn1.w", &[d, f], || kaiming_uniform(d * f, d, rng))?;
        let ffn1_b = set.add_or_init("tsm.enc.ffn1.b", &[f], || vec![0.0; f])?;
        let ffn2_w =
            set.add_or_init("tsm.enc.ffn2.w", &[f, d], || kaiming_uniform(f * d, f, rng))?;
        let ffn2_b = set.add_or_init("tsm.enc.ffn2.b", &[d], || vec![0.0; d])?;
        let head_w = set.add_or_init("tsm.head.w", &[d, 1], || kaiming_uniform(d, d, rng))?;
        let head_b = set.add_or_init("tsm.head.b", &[1], || vec![0.0; 1])?;

        Ok(Self {
            cfg,
            tune_w,
            tune_b,
            bott_w,
            bott_b,
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            ffn1_w,
            ffn1_b,
            ffn2_w,
            ffn2_b,
            head_w,
            head_b,
        })
    }

    /// Sharpen a raw similarity map `[Ta, Tb]` through the four-conv stack
    /// (valid padding, so each axis shrinks by [`TUNE_SHRINK`]).
    pub fn tune_map(&self, g: &mut Graph, bind: &[NodeId], raw: NodeId) -> Result<NodeId> {
        let rs = g.shape(raw).to_vec();
        if rs.len() != 2 {
            return Err(VvsError::Shape {
                op: "tune_map",
                detail: format!("expected a 2-d map, got {:?}", rs),
            });
        }
        let (ta, tb) = (rs[0], rs[1]);
        if ta <= TUNE_SHRINK || tb <= TUNE_SHRINK {
            return Err(VvsError::Shape {
                op: "tune_map",
                detail: format!("map {ta}x{tb} too small; both axes must exceed {TUNE_SHRINK}"),
            });
        }
        let mut h = g.reshape(raw, &[1, ta, tb]);
        for i in 0..4 {
            h = g.conv2d(h, bind[self.tune_w[i]], bind[self.tune_b[i]], Pad::Valid)?;
            if i < 3 {
                h = g.relu(h);
            }
        }
        Ok(g.reshape(h, &[ta - TUNE_SHRINK, tb - TUNE_SHRINK]))
    }

    /// Saliency weights `W_sa [T']` in (0,1) from the video's own
    /// similarity structure: self map, 1x1 bottleneck to `model_dim`
    /// channels, diagonal sampling, one pre-norm encoder layer, scalar
    /// head, sigmoid.
    pub fn tsm_forward(&self, g: &mut Graph, bind: &[NodeId], anchor: NodeId) -> Result<NodeId> {
        let xs = g.shape(anchor).to_vec();
        if xs.len() != 3 || xs[0] < 1 {
            return Err(VvsError::Shape {
                op: "tsm_forward",
                detail: format!("expected non-empty [T, S2, C], got {:?}", xs),
            });
        }
        let t = xs[0];
        let d = self.cfg.model_dim;
        let self_map = g.frame_sim_map(anchor, anchor)?;
        let img = g.reshape(self_map, &[1, t, t]);
        let bott = g.conv2d(img, bind[self.bott_w], bind[self.bott_b], Pad::Same)?;
        let mut tokens = g.diag_chw(bott)?;
        // The encoder has no other source of frame order.
        let pe = g.constant(sinusoid_table(t, d), &[t, d]);
        tokens = g.add(tokens, pe);
        let h = self.encoder_layer(g, bind, tokens)?;
        let scores = g.linear(h, bind[self.head_w], bind[self.head_b])?;
        let flat = g.reshape(scores, &[t]);
        Ok(g.sigmoid(flat))
    }

    fn encoder_layer(&self, g: &mut Graph, bind: &[NodeId], x: NodeId) -> Result<NodeId> {
        let n1 = g.layer_norm(x, bind[self.ln1_g], bind[self.ln1_b])?;
        let q = g.linear(n1, bind[self.wq], bind[self.bq])?;
        let k = g.linear(n1, bind[self.wk], bind[self.bk])?;
        let v = g.linear(n1, bind[self.wv], bind[self.bv])?;
        let att = g.attention_core(q, k, v, self.cfg.heads)?;
        let att = g.linear(att, bind[self.wo], bind[self.bo])?;
        let x = g.add(x, att);
        let n2 = g.layer_norm(x, bind[self.ln2_g], bind[self.ln2_b])?;
        let mut f = g.linear(n2, bind[self.ffn1_w], bind[self.ffn1_b])?;
        f = g.relu(f);
        f = g.linear(f, bind[self.ffn2_w], bind[self.ffn2_b])?;
        Ok(g.add(x, f))
    }
}

/// Position-encoding table `[len, dim]`: interleaved sine/cosine waves
/// with geometrically spaced periods.
fn sinusoid_table(len: usize, dim: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; len * dim];
    for t in 0..len {
        for j in 0..dim {
            let pair = (j / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            out[t * dim + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() } as f32;
        }
    }
    out
}

/// Threshold the row maxima of a tuned positive map `[Ta'', Tb'']` at
/// their mean (ties count as salient) and resample to `t_prime` frames.
/// The label is plain data, outside any gradient graph.
pub fn extract_saliency_label(d_p: &Tensor, t_prime: usize) -> Result<SaliencyLabel> {
    let s = d_p.shape();
    if s.len() != 2 || s[0] == 0 || s[1] == 0 {
        return Err(VvsError::Shape {
            op: "extract_saliency_label",
            detail: format!("expected non-empty [Ta, Tb], got {:?}", s),
        });
    }
    if t_prime == 0 {
        return Err(VvsError::Shape {
            op: "extract_saliency_label",
            detail: "target length must be at least 1".into(),
        });
    }
    let (ta, tb) = (s[0], s[1]);
    let dd = d_p.data();
    let rho: Vec<f32> = (0..ta)
        .map(|i| {
            dd[i * tb..(i + 1) * tb]
                .iter()
                .fold(f32::NEG_INFINITY, |m, &v| m.max(v))
        })
        .collect();
    let mean = (rho.iter().map(|&v| v as f64).sum::<f64>() / ta as f64) as f32;
    let values: Vec<f32> = rho
        .iter()
        .map(|&r| if r - mean >= 0.0 { 1.0 } else { 0.0 })
        .collect();
    let resampled = resample_nearest(&values, t_prime);
    Ok(SaliencyLabel { values, resampled })
}

/// Frame-level loss: triplet margin on the chamfer scores of the tuned
/// maps plus half the mass of both maps outside `[-1, 1]`.
pub fn frame_loss(g: &mut Graph, d_p: NodeId, d_n: NodeId, gamma: f32) -> Result<NodeId> {
    let cs_p = g.chamfer_matrix(d_p)?;
    let cs_n = g.chamfer_matrix(d_n)?;
    let diff = g.sub(cs_n, cs_p);
    let shifted = g.add_scalar(diff, gamma);
    let tri = g.relu(shifted);
    let reg_p = g.band_penalty(d_p);
    let reg_n = g.band_penalty(d_n);
    let reg = g.add(reg_p, reg_n);
    let half = g.scale(reg, 0.5);
    Ok(g.add(tri, half))
}

/// Binary cross entropy between predicted saliency weights and the
/// resampled pseudo-label.
pub fn saliency_loss(g: &mut Graph, w_sa: NodeId, label: &SaliencyLabel) -> Result<NodeId> {
    let t = g.numel(w_sa);
    if label.resampled.len() != t {
        return Err(VvsError::Shape {
            op: "saliency_loss",
            detail: format!("label length {} vs weights {t}", label.resampled.len()),
        });
    }
    let y = g.constant(label.resampled.clone(), &[t]);
    Ok(g.bce(w_sa, y))
}
