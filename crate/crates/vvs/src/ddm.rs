//! Easy-distractor elimination: inject low-magnitude frames into training
//! anchors, score every frame with a pooling + FC confidence head, and drop
//! low-confidence frames at inference.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VvsError};
use crate::features::distractor::EasyDistractorSet;
use crate::features::pca::PcaModel;
use crate::graph::{Graph, NodeId};
use crate::nn::{kaiming_uniform, ParamSet};
use crate::tensor::Tensor;

/// Confidence threshold below which frames are dropped at inference.
pub const LAMBDA_DI: f32 = 0.5;
/// Injection ratio bounds relative to the anchor length.
pub const INJECT_RATIO: (f64, f64) = (0.2, 0.5);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DdmConfig {
    pub in_dim: usize,
    #[serde(default = "default_hidden1")]
    pub hidden1: usize,
    #[serde(default = "default_hidden2")]
    pub hidden2: usize,
    #[serde(default = "default_dropout")]
    pub dropout_p: f32,
    /// Feed raw (unwhitened) features to the head and inject raw frames.
    #[serde(default)]
    pub raw_input: bool,
}

fn default_hidden1() -> usize {
    1024
}

fn default_hidden2() -> usize {
    256
}

fn default_dropout() -> f32 {
    0.5
}

impl DdmConfig {
    pub fn new(in_dim: usize) -> Self {
        Self {
            in_dim,
            hidden1: 1024,
            hidden2: 256,
            dropout_p: 0.5,
            raw_input: false,
        }
    }

    /// Narrow head for gradient-check suites.
    pub fn toy(in_dim: usize) -> Self {
        Self {
            in_dim,
            hidden1: 8,
            hidden2: 4,
            dropout_p: 0.5,
            raw_input: false,
        }
    }
}

/// Parameter indices of the confidence head inside a shared [`ParamSet`].
#[derive(Debug, Clone)]
pub struct DdmModel {
    pub cfg: DdmConfig,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
    fc3_w: usize,
    fc3_b: usize,
}

impl DdmModel {
    pub fn init(set: &mut ParamSet, cfg: DdmConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (c, h1, h2) = (cfg.in_dim, cfg.hidden1, cfg.hidden2);
        let fc1_w = set.add_or_init("ddm.fc1.w", &[c, h1], || kaiming_uniform(c * h1, c, rng))?;
        let fc1_b = set.add_or_init("ddm.fc1.b", &[h1], || vec![0.0; h1])?;
        let fc2_w =
            set.add_or_init("ddm.fc2.w", &[h1, h2], || kaiming_uniform(h1 * h2, h1, rng))?;
        let fc2_b = set.add_or_init("ddm.fc2.b", &[h2], || vec![0.0; h2])?;
        let fc3_w = set.add_or_init("ddm.fc3.w", &[h2, 1], || kaiming_uniform(h2, h2, rng))?;
        let fc3_b = set.add_or_init("ddm.fc3.b", &[1], || vec![0.0; 1])?;
        Ok(Self {
            cfg,
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            fc3_w,
            fc3_b,
        })
    }

    /// Per-frame confidence `W_di` in (0,1): spatial pooling, FC stack,
    /// sigmoid. Frames are scored independently. `dropout` supplies the
    /// training-time mask source; `None` disables dropout.
    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &[NodeId],
        x: NodeId,
        dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let t = g.shape(x)[0];
        let pooled = g.s_gap(x)?;
        let mut h = g.linear(pooled, bind[self.fc1_w], bind[self.fc1_b])?;
        h = g.relu(h);
        if let Some(rng) = dropout {
            if self.cfg.dropout_p > 0.0 {
                let keep = 1.0 - self.cfg.dropout_p;
                let numel = g.numel(h);
                let mask: Vec<f32> = (0..numel)
                    .map(|_| {
                        if rng.gen::<f32>() < keep {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let shape = g.shape(h).to_vec();
                let m = g.constant(mask, &shape);
                h = g.mul(h, m);
            }
        }
        h = g.linear(h, bind[self.fc2_w], bind[self.fc2_b])?;
        h = g.relu(h);
        h = g.linear(h, bind[self.fc3_w], bind[self.fc3_b])?;
        let flat = g.reshape(h, &[t]);
        Ok(g.sigmoid(flat))
    }

    /// Inference-mode confidence on plain tensors.
    pub fn confidences(&self, set: &ParamSet, x: &Tensor) -> Result<Vec<f32>> {
        let mut g = Graph::inference();
        let bind = set.bind(&mut g);
        let xn = g.constant_tensor(x);
        let w = self.forward(&mut g, &bind, xn, None)?;
        Ok(g.value(w).to_vec())
    }
}

/// Binary cross entropy between confidences and the injection label.
pub fn discrimination_loss(g: &mut Graph, w_di: NodeId, label: NodeId) -> NodeId {
    g.bce(w_di, label)
}

#[derive(Debug, Clone)]
pub struct InjectionResult {
    /// `[T', S2, C]` with injected frames inserted.
    pub features: Tensor,
    /// `[T']`, 1 for genuine frames, 0 at injected positions.
    pub label: Vec<f32>,
    pub injected_count: usize,
}

/// Insert `m ~ U[ceil(r0 T), floor(r1 T)]` pool frames at random positions.
/// Entries are whitened with `pca` before insertion when given (the pool
/// stores raw frames); pass `None` only for the raw-input configuration.
pub fn inject_distractors(
    x: &Tensor,
    set: &EasyDistractorSet,
    pca: Option<&PcaModel>,
    ratio_range: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<InjectionResult> {
    let s = x.shape();
    if s.len() != 3 {
        return Err(VvsError::Shape {
            op: "inject_distractors",
            detail: format!("expected [T, S2, C], got {:?}", s),
        });
    }
    let (t, s2, c) = (s[0], s[1], s[2]);
    let lo = (ratio_range.0 * t as f64).ceil() as usize;
    let hi = (ratio_range.1 * t as f64).floor() as usize;
    if hi < lo {
        return Err(VvsError::Sampling(format!(
            "injection ratio range {ratio_range:?} empty for T={t}"
        )));
    }
    let m = rng.gen_range(lo..=hi);
    if m > 0 && set.is_empty() {
        return Err(VvsError::EmptyDistractorSet);
    }

    let per = s2 * c;
    let mut frames: Vec<(Vec<f32>, f32)> = x
        .data()
        .chunks_exact(per)
        .map(|f| (f.to_vec(), 1.0))
        .collect();
    for _ in 0..m {
        let entry = &set.entries[rng.gen_range(0..set.entries.len())];
        if entry.features.shape() != [s2, c] {
            return Err(VvsError::Shape {
                op: "inject_distractors",
                detail: format!(
                    "pool frame {:?} vs video frame [{s2}, {c}]",
                    entry.features.shape()
                ),
            });
        }
        let frame = match pca {
            Some(model) => {
                let mut rows = model.whiten_rows(entry.features.data(), s2)?;
                for row in rows.chunks_exact_mut(model.out_dim()) {
                    let norm = crate::tensor::l2_norm(row);
                    if norm < crate::video_graph::NORM_EPS {
                        return Err(VvsError::ZeroNorm {
                            op: "inject_distractors",
                            norm,
                        });
                    }
                    for v in row.iter_mut() {
                        *v = (*v as f64 / norm) as f32;
                    }
                }
                rows
            }
            None => entry.features.data().to_vec(),
        };
        if frame.len() != per {
            return Err(VvsError::Shape {
                op: "inject_distractors",
                detail: format!("whitened pool frame width {} vs {per}", frame.len()),
            });
        }
        let pos = rng.gen_range(0..=frames.len());
        frames.insert(pos, (frame, 0.0));
    }

    let mut data = Vec::with_capacity(frames.len() * per);
    let mut label = Vec::with_capacity(frames.len());
    for (f, y) in &frames {
        data.extend_from_slice(f);
        label.push(*y);
    }
    Ok(InjectionResult {
        features: Tensor::new(&[t + m, s2, c], data)?,
        label,
        injected_count: m,
    })
}

/// Training-mode application: every frame scaled by its confidence, as a
/// differentiable node.
pub fn ddm_apply_train(g: &mut Graph, x: NodeId, w_di: NodeId) -> Result<NodeId> {
    g.hadamard_frames(x, w_di)
}

/// Inference-mode application: keep frames with confidence at or above
/// `lambda_di`. If that would drop everything, the single most confident
/// frame is kept instead.
pub fn ddm_apply_infer(x: &Tensor, w_di: &[f32], lambda_di: f32) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 3 || s[0] != w_di.len() {
        return Err(VvsError::Shape {
            op: "ddm_apply_infer",
            detail: format!("x {:?} vs {} confidences", s, w_di.len()),
        });
    }
    let mut kept: Vec<usize> = (0..s[0]).filter(|&t| w_di[t] >= lambda_di).collect();
    if kept.is_empty() {
        let best = (0..s[0])
            .max_by(|&a, &b| {
                w_di[a]
                    .partial_cmp(&w_di[b])
                    .expect("finite confidence")
                    .then(b.cmp(&a))
            })
            .expect("non-empty video");
        kept.push(best);
    }
    let per = s[1] * s[2];
    let mut data = Vec::with_capacity(kept.len() * per);
    for &t in &kept {
        data.extend_from_slice(&x.data()[t * per..(t + 1) * per]);
    }
    Ok((Tensor::new(&[kept.len(), s[1], s[2]], data)?, kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::distractor::DistractorEntry;
    use crate::nn::{grad_check, seeded_rng, GradCheckOptions};

    fn pseudo(n: usize, salt: u32) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let h = (i as u32).wrapping_mul(2654435761) ^ salt.wrapping_mul(0x9E3779B9);
                ((h >> 8) & 0xffff) as f32 / 65536.0 - 0.5
            })
            .collect()
    }

    fn toy_model(c: usize) -> (ParamSet, DdmModel) {
        let mut set = ParamSet::new();
        let mut rng = seeded_rng(5);
        let model = DdmModel::init(&mut set, DdmConfig::toy(c), &mut rng).unwrap();
        (set, model)
    }

    fn pool(s2: usize, c: usize, n: usize) -> EasyDistractorSet {
        let entries = (0..n)
            .map(|i| DistractorEntry {
                source_id: format!("b{i}"),
                frame_index: i,
                features: Tensor::new(&[s2, c], pseudo(s2 * c, 100 + i as u32)).unwrap(),
                magnitude: 10.0,
            })
            .collect();
        EasyDistractorSet {
            entries,
            lambda_mag: 40.0,
            scanned_frames: n,
        }
    }

    #[test]
    fn confidence_in_open_interval_and_permutation_equivariant() {
        let (set, model) = toy_model(6);
        let x = Tensor::new(&[5, 2, 6], pseudo(60, 1)).unwrap();
        let w = model.confidences(&set, &x).unwrap();
        assert_eq!(w.len(), 5);
        assert!(w.iter().all(|&v| v > 0.0 && v < 1.0));

        let perm = [3usize, 0, 4, 1, 2];
        let mut px = Vec::new();
        for &p in &perm {
            px.extend_from_slice(&x.data()[p * 12..(p + 1) * 12]);
        }
        let wx = model
            .confidences(&set, &Tensor::new(&[5, 2, 6], px).unwrap())
            .unwrap();
        for (i, &p) in perm.iter().enumerate() {
            assert!((wx[i] - w[p]).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_frames_score_identically() {
        let (set, model) = toy_model(4);
        let frame = pseudo(8, 2);
        let mut data = frame.clone();
        data.extend_from_slice(&frame);
        let x = Tensor::new(&[2, 2, 4], data).unwrap();
        let w = model.confidences(&set, &x).unwrap();
        assert!((w[0] - w[1]).abs() < 1e-7);
    }

    #[test]
    fn injection_counts_and_labels() {
        let set = pool(2, 4, 6);
        let x = Tensor::new(&[10, 2, 4], pseudo(80, 3)).unwrap();
        let mut rng = seeded_rng(9);
        for _ in 0..200 {
            let r = inject_distractors(&x, &set, None, INJECT_RATIO, &mut rng).unwrap();
            assert!((2..=5).contains(&r.injected_count));
            assert_eq!(r.features.shape()[0], 10 + r.injected_count);
            assert_eq!(r.label.len(), 10 + r.injected_count);
            let zeros = r.label.iter().filter(|&&y| y == 0.0).count();
            assert_eq!(zeros, r.injected_count);
        }
    }

    #[test]
    fn injection_sampler_covers_the_ratio_range() {
        let set = pool(1, 4, 3);
        let x = Tensor::new(&[10, 1, 4], pseudo(40, 4)).unwrap();
        let mut rng = seeded_rng(11);
        let mut seen = [0usize; 6];
        for _ in 0..1000 {
            let r = inject_distractors(&x, &set, None, INJECT_RATIO, &mut rng).unwrap();
            seen[r.injected_count] += 1;
        }
        for (m, &count) in seen.iter().enumerate().skip(2) {
            assert!(count > 100, "count {m} drawn {count} times");
        }
        assert_eq!(seen[0] + seen[1], 0);
    }

    #[test]
    fn zero_ratio_is_identity() {
        let set = pool(1, 4, 3);
        let x = Tensor::new(&[7, 1, 4], pseudo(28, 5)).unwrap();
        let mut rng = seeded_rng(13);
        let r = inject_distractors(&x, &set, None, (0.0, 0.0), &mut rng).unwrap();
        assert_eq!(r.injected_count, 0);
        assert_eq!(r.features.data(), x.data());
        assert!(r.label.iter().all(|&y| y == 1.0));
    }

    #[test]
    fn empty_pool_rejected() {
        let set = EasyDistractorSet {
            entries: vec![],
            lambda_mag: 40.0,
            scanned_frames: 0,
        };
        let x = Tensor::new(&[10, 1, 4], pseudo(40, 6)).unwrap();
        let mut rng = seeded_rng(15);
        let err = inject_distractors(&x, &set, None, INJECT_RATIO, &mut rng).unwrap_err();
        assert!(matches!(err, VvsError::EmptyDistractorSet));
    }

    #[test]
    fn infer_apply_thresholds_with_fallback() {
        let x = Tensor::new(&[3, 1, 2], pseudo(6, 7)).unwrap();
        let (kept, idx) = ddm_apply_infer(&x, &[0.9, 0.3, 0.6], 0.5).unwrap();
        assert_eq!(idx, vec![0, 2]);
        assert_eq!(kept.shape(), &[2, 1, 2]);
        assert_eq!(&kept.data()[0..2], &x.data()[0..2]);
        assert_eq!(&kept.data()[2..4], &x.data()[4..6]);

        let (kept, idx) = ddm_apply_infer(&x, &[0.1, 0.4, 0.2], 0.5).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(kept.shape(), &[1, 1, 2]);
    }

    #[test]
    fn train_apply_with_unit_confidence_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(pseudo(12, 8), &[3, 2, 2]);
        let w = g.constant(vec![1.0; 3], &[3]);
        let y = ddm_apply_train(&mut g, x, w).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn discrimination_loss_known_values() {
        let mut g = Graph::new();
        let w = g.constant(vec![0.5, 0.5], &[2]);
        let y = g.constant(vec![1.0, 0.0], &[2]);
        let l = discrimination_loss(&mut g, w, y);
        assert!((g.scalar_value(l) - std::f32::consts::LN_2).abs() < 1e-6);

        let mut g = Graph::new();
        let w = g.constant(vec![0.9999, 0.0001], &[2]);
        let y = g.constant(vec![1.0, 0.0], &[2]);
        let l = discrimination_loss(&mut g, w, y);
        assert!(g.scalar_value(l) < 1e-3);
    }

    #[test]
    fn head_gradients_pass_finite_differences() {
        let (mut set, model) = toy_model(5);
        // Biases start at zero, so a dropout mask that blanks a whole row
        // parks the next relu exactly on its kink, where central
        // differences are invalid. Shift every parameter off the freshly
        // initialized values before differencing.
        for pi in 0..set.len() {
            let p = set.get_mut(pi);
            let n = p.tensor.numel();
            for (v, d) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(pseudo(n, 1000 + pi as u32))
            {
                *v += 0.1 * d;
            }
        }
        let x = Tensor::new(&[4, 2, 5], pseudo(40, 9)).unwrap();
        let y = vec![1.0, 0.0, 1.0, 1.0];

        let loss_fn = |set: &ParamSet| -> Result<f64> {
            let mut g = Graph::new();
            let bind = set.bind(&mut g);
            let xn = g.constant_tensor(&x);
            let mut drop_rng = seeded_rng(77);
            let model = model.clone();
            let w = model.forward(&mut g, &bind, xn, Some(&mut drop_rng))?;
            let yn = g.constant(y.clone(), &[4]);
            let l = discrimination_loss(&mut g, w, yn);
            Ok(g.scalar_value(l) as f64)
        };

        set.zero_grads();
        {
            let mut g = Graph::new();
            let bind = set.bind(&mut g);
            let xn = g.constant_tensor(&x);
            let mut drop_rng = seeded_rng(77);
            let w = model
                .forward(&mut g, &bind, xn, Some(&mut drop_rng))
                .unwrap();
            let yn = g.constant(y.clone(), &[4]);
            let l = discrimination_loss(&mut g, w, yn);
            g.backward(l).unwrap();
            set.accumulate_from(&g);
        }
        let report = grad_check(
            &mut set,
            loss_fn,
            &GradCheckOptions {
                h: 2e-4,
                max_per_param: 6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-2, "{report:?}");
    }
}
