//! Triplet training of the suppression pipeline: corpus preparation,
//! triplet sampling with temporal augmentation, suppression-weight
//! composition, the four-term objective, the Adam loop with per-epoch
//! validation, and unified checkpoint files.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ddm::{
    ddm_apply_infer, ddm_apply_train, discrimination_loss, inject_distractors, DdmConfig, DdmModel,
    INJECT_RATIO,
};
use crate::error::{Result, VvsError};
use crate::eval::{mean_average_precision, EmbeddingStore};
use crate::features::{build_distractor_set, fit_pca_whitening, EasyDistractorSet, PcaModel};
use crate::graph::{Graph, NodeId};
use crate::io::FrameFeatures;
use crate::manifest::{DatasetManifest, Tier};
use crate::nn::{seeded_rng, AdamState, ParamSet};
use crate::tensor::Tensor;
use crate::tgm::{TgmConfig, TgmModel};
use crate::tsm::{
    extract_saliency_label, frame_loss, saliency_loss, TsmConfig, TsmModel, TUNE_SHRINK,
};
use crate::video_ops;

/// Shortest clip the tune convs accept on either map axis.
pub const MIN_CLIP_LEN: usize = TUNE_SHRINK + 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Anchor frame count after crop/pad.
    pub t_train: usize,
    pub epochs: usize,
    pub iters_per_epoch: usize,
    pub lr: f32,
    /// Weight of the discrimination loss in the total.
    pub alpha: f32,
    /// Margin of the frame and video triplet losses.
    pub gamma: f32,
    /// Magnitude threshold for the easy-distractor pool.
    pub lambda_mag: f32,
    /// Confidence threshold for frame dropping at inference.
    pub lambda_di: f32,
    /// Temperature of the guidance gate.
    pub tau: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            t_train: 64,
            epochs: 60,
            iters_per_epoch: 100,
            lr: 2e-5,
            alpha: 0.5,
            gamma: 0.5,
            lambda_mag: 40.0,
            lambda_di: 0.5,
            tau: 512.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_train < MIN_CLIP_LEN {
            return Err(VvsError::Config(format!(
                "t_train must be at least {MIN_CLIP_LEN}, got {}",
                self.t_train
            )));
        }
        if self.epochs == 0 || self.iters_per_epoch == 0 {
            return Err(VvsError::Config(
                "epochs and iters_per_epoch must be positive".into(),
            ));
        }
        if self.lr <= 0.0 || self.gamma <= 0.0 || self.lambda_mag <= 0.0 || self.tau <= 0.0 {
            return Err(VvsError::Config(
                "lr, gamma, lambda_mag and tau must be positive".into(),
            ));
        }
        if self.alpha < 0.0 {
            return Err(VvsError::Config("alpha must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_di) {
            return Err(VvsError::Config(format!(
                "lambda_di must lie in [0, 1], got {}",
                self.lambda_di
            )));
        }
        Ok(())
    }
}

/// Everything a checkpoint needs to rebuild the model: the training
/// schedule plus the three module configurations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub train: TrainConfig,
    pub ddm: DdmConfig,
    pub tsm: TsmConfig,
    pub tgm: TgmConfig,
}

impl PipelineSpec {
    /// Full-width modules on `channels`-dimensional whitened features.
    pub fn new(channels: usize) -> Self {
        Self {
            train: TrainConfig::default(),
            ddm: DdmConfig::new(channels),
            tsm: TsmConfig::new(),
            tgm: TgmConfig::new(),
        }
    }

    /// Reduced widths sized for minutes-scale CPU training on synthetic
    /// corpora.
    pub fn desk(channels: usize) -> Self {
        let mut spec = Self::new(channels);
        spec.ddm.hidden1 = 128;
        spec.ddm.hidden2 = 32;
        spec.tsm.tune_widths = (8, 8, 16);
        spec.tsm.model_dim = 32;
        spec.tsm.heads = 4;
        spec.tsm.ffn_dim = 64;
        spec.tgm.widths = (8, 16, 32);
        spec.tgm.reduce_dim = 8;
        spec
    }

    /// Toy widths and a two-epoch schedule for unit tests.
    pub fn toy(channels: usize) -> Self {
        Self {
            train: TrainConfig {
                t_train: 12,
                epochs: 2,
                iters_per_epoch: 10,
                tau: 4.0,
                ..TrainConfig::default()
            },
            ddm: DdmConfig::toy(channels),
            tsm: TsmConfig::toy(),
            tgm: TgmConfig::toy(),
        }
    }
}

/// Which suppression modules participate in embedding. All three on is
/// the full pipeline; all three off is the uniform-weight baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PipelineToggles {
    pub use_ddm: bool,
    pub use_tsm: bool,
    pub use_tgm: bool,
}

impl PipelineToggles {
    pub fn all() -> Self {
        Self {
            use_ddm: true,
            use_tsm: true,
            use_tgm: true,
        }
    }

    pub fn none() -> Self {
        Self {
            use_ddm: false,
            use_tsm: false,
            use_tgm: false,
        }
    }
}

impl Default for PipelineToggles {
    fn default() -> Self {
        Self::all()
    }
}

/// The three suppression modules bound to one shared parameter set.
#[derive(Debug, Clone)]
pub struct Pipeline {
    pub spec: PipelineSpec,
    pub ddm: DdmModel,
    pub tsm: TsmModel,
    pub tgm: TgmModel,
}

/// Per-frame record of one inference embedding.
#[derive(Debug, Clone)]
pub struct EmbedTrace {
    /// Per input frame: survived the confidence threshold.
    pub kept: Vec<bool>,
    /// Per input frame: distractor-head confidence (1.0 with DDM off).
    pub w_di: Vec<f32>,
    /// Per kept frame: saliency weight (1.0 with TSM off).
    pub w_sa: Vec<f32>,
    /// Per kept frame: guidance weight (1.0 with TGM off).
    pub w_gu: Vec<f32>,
    /// Per kept frame: final suppression weight.
    pub w: Vec<f32>,
    /// Unit video embedding.
    pub embedding: Vec<f32>,
}

impl Pipeline {
    pub fn init(set: &mut ParamSet, spec: PipelineSpec, rng: &mut ChaCha8Rng) -> Result<Self> {
        spec.train.validate()?;
        let ddm = DdmModel::init(set, spec.ddm.clone(), rng)?;
        let tsm = TsmModel::init(set, spec.tsm.clone(), rng)?;
        // The training temperature is authoritative for the guidance gate.
        let mut tgm_cfg = spec.tgm.clone();
        tgm_cfg.tau = spec.train.tau;
        let tgm = TgmModel::init(set, tgm_cfg, rng)?;
        Ok(Self {
            spec,
            ddm,
            tsm,
            tgm,
        })
    }

    /// Inference embedding of one whitened video `[T, S2, C]` through the
    /// enabled module subset.
    pub fn embed(
        &self,
        set: &ParamSet,
        x: &Tensor,
        toggles: PipelineToggles,
    ) -> Result<EmbedTrace> {
        let s = x.shape();
        if s.len() != 3 {
            return Err(VvsError::Shape {
                op: "pipeline_embed",
                detail: format!("expected [T, S2, C], got {:?}", s),
            });
        }
        let t = s[0];

        let (w_di, kept_idx, x_kept) = if toggles.use_ddm {
            let w = self.ddm.confidences(set, x)?;
            let (xk, kept) = ddm_apply_infer(x, &w, self.spec.train.lambda_di)?;
            (w, kept, xk)
        } else {
            (vec![1.0; t], (0..t).collect(), x.clone())
        };
        let tk = x_kept.shape()[0];

        let (w_sa, w_gu) = if toggles.use_tsm || toggles.use_tgm {
            let mut g = Graph::inference();
            let bind = set.bind(&mut g);
            let xn = g.constant_tensor(&x_kept);
            let w_sa = if toggles.use_tsm {
                let node = self.tsm.tsm_forward(&mut g, &bind, xn)?;
                g.value(node).to_vec()
            } else {
                vec![1.0; tk]
            };
            let w_gu = if toggles.use_tgm {
                let node = self.tgm.tgm_forward(&mut g, &bind, xn)?;
                g.value(node).to_vec()
            } else {
                vec![1.0; tk]
            };
            (w_sa, w_gu)
        } else {
            (vec![1.0; tk], vec![1.0; tk])
        };

        let w = suppression_weights(Some(&w_sa), &w_gu)?;
        let embedding = video_ops::embed_video(&x_kept, &w)?;
        let mut kept = vec![false; t];
        for &i in &kept_idx {
            kept[i] = true;
        }
        Ok(EmbedTrace {
            kept,
            w_di,
            w_sa,
            w_gu,
            w,
            embedding: embedding.data().to_vec(),
        })
    }
}

/// Final per-frame multipliers: saliency times guidance for anchors,
/// guidance alone (pass `None`) for positives and negatives.
pub fn suppression_weights(w_sa: Option<&[f32]>, w_gu: &[f32]) -> Result<Vec<f32>> {
    match w_sa {
        Some(sa) => {
            if sa.len() != w_gu.len() {
                return Err(VvsError::Shape {
                    op: "suppression_weights",
                    detail: format!("w_sa length {} vs w_gu length {}", sa.len(), w_gu.len()),
                });
            }
            Ok(sa.iter().zip(w_gu).map(|(&a, &b)| a * b).collect())
        }
        None => Ok(w_gu.to_vec()),
    }
}

/// Margin loss on video embeddings: `max(0, θ(v,v⁻) − θ(v,v⁺) + γ)`.
pub fn video_loss(g: &mut Graph, v: NodeId, v_pos: NodeId, v_neg: NodeId, gamma: f32) -> NodeId {
    let theta_p = g.dot(v, v_pos);
    let theta_n = g.dot(v, v_neg);
    let diff = g.sub(theta_n, theta_p);
    let shifted = g.add_scalar(diff, gamma);
    g.relu(shifted)
}

/// The four-term objective on already-evaluated components.
pub fn total_loss(l_vi: f64, l_fr: f64, l_sa: f64, l_di: f64, alpha: f64) -> f64 {
    l_vi + l_fr + l_sa + alpha * l_di
}

/// Component losses of one iteration.
#[derive(Debug, Clone, Serialize)]
pub struct LossReport {
    pub l_vi: f64,
    pub l_fr: f64,
    pub l_sa: f64,
    pub l_di: f64,
    pub total: f64,
}

/// One training example: anchor plus a same-topic positive and a
/// different-topic negative.
#[derive(Debug, Clone)]
pub struct Triplet {
    pub anchor: Tensor,
    pub positive: Tensor,
    pub negative: Tensor,
    pub anchor_is_core: bool,
}

/// In-memory training corpus: whitened features plus the topic layout.
#[derive(Debug)]
pub struct TrainCorpus {
    /// Whitened `[T, S2, C]` features per video id, queries included.
    pub features: BTreeMap<String, Tensor>,
    /// `(topic, id)` for every core video, sorted by id.
    core: Vec<(u32, String)>,
}

impl TrainCorpus {
    pub fn new(manifest: &DatasetManifest, features: BTreeMap<String, Tensor>) -> Result<Self> {
        let mut core = Vec::new();
        for v in &manifest.videos {
            if let Some(topic) = v.topic_id {
                if features.contains_key(&v.id) {
                    core.push((topic, v.id.clone()));
                }
            }
        }
        core.sort_by(|a, b| a.1.cmp(&b.1));
        if core.is_empty() {
            return Err(VvsError::Sampling(
                "corpus has no core videos with features".into(),
            ));
        }
        Ok(Self { features, core })
    }

    pub fn topic_count(&self) -> usize {
        self.core
            .iter()
            .map(|(t, _)| *t)
            .collect::<BTreeSet<_>>()
            .len()
    }
}

fn take_frames(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let s = x.shape();
    let per = s[1] * s[2];
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    Tensor::new(&[idx.len(), s[1], s[2]], data)
}

/// Exact-length clip: random window when the video is long enough,
/// cyclic repetition otherwise.
fn crop_or_cycle(x: &Tensor, len: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let t = x.shape()[0];
    let idx: Vec<usize> = if t >= len {
        let start = rng.gen_range(0..=t - len);
        (start..start + len).collect()
    } else {
        (0..len).map(|i| i % t).collect()
    };
    take_frames(x, &idx)
}

fn random_window(x: &Tensor, max_len: usize, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let t = x.shape()[0];
    let len = t.min(max_len);
    let start = rng.gen_range(0..=t - len);
    (start, len)
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Positive-branch augmentation: temporal crop to 50-100% of the
/// window, per-frame dropout up to 20%, additive feature noise, and a
/// cyclic pad back up to the shortest tunable length.
fn augment_positive(x: &Tensor, max_len: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let (w_start, w_len) = random_window(x, max_len, rng);
    let frac: f64 = rng.gen_range(0.5..=1.0);
    let len = ((w_len as f64 * frac).round() as usize).clamp(1, w_len);
    let start = w_start + rng.gen_range(0..=w_len - len);
    let drop_p: f64 = rng.gen_range(0.0..0.2);
    let mut idx: Vec<usize> = (start..start + len)
        .filter(|_| !rng.gen_bool(drop_p))
        .collect();
    if idx.is_empty() {
        idx.push(start);
    }
    if idx.len() < MIN_CLIP_LEN {
        let n = idx.len();
        for k in 0..MIN_CLIP_LEN - n {
            idx.push(idx[k % n]);
        }
    }
    let mut out = take_frames(x, &idx)?;
    for v in out.data_mut() {
        *v += (0.05 * gauss(rng)) as f32;
    }
    Ok(out)
}

/// Draw one training triplet: a core anchor cropped/padded to exactly
/// `t_train` frames, an augmented same-topic positive, and a uniform
/// different-topic negative.
pub fn sample_triplet(
    corpus: &TrainCorpus,
    rng: &mut ChaCha8Rng,
    t_train: usize,
) -> Result<Triplet> {
    if corpus.topic_count() < 2 {
        return Err(VvsError::Sampling(
            "triplet sampling needs core videos from at least two topics".into(),
        ));
    }
    let (a_topic, a_id) = corpus.core[rng.gen_range(0..corpus.core.len())].clone();
    let same: Vec<&str> = corpus
        .core
        .iter()
        .filter(|(t, _)| *t == a_topic)
        .map(|(_, id)| id.as_str())
        .collect();
    let p_id = same[rng.gen_range(0..same.len())];
    let diff: Vec<&str> = corpus
        .core
        .iter()
        .filter(|(t, _)| *t != a_topic)
        .map(|(_, id)| id.as_str())
        .collect();
    let n_id = diff[rng.gen_range(0..diff.len())];

    let anchor = crop_or_cycle(&corpus.features[&a_id], t_train, rng)?;
    let positive = augment_positive(&corpus.features[p_id], t_train, rng)?;
    let negative = {
        let src = &corpus.features[n_id];
        let (start, len) = random_window(src, t_train, rng);
        let mut idx: Vec<usize> = (start..start + len).collect();
        if idx.len() < MIN_CLIP_LEN {
            let n = idx.len();
            for k in 0..MIN_CLIP_LEN - n {
                idx.push(idx[k % n]);
            }
        }
        take_frames(src, &idx)?
    };
    Ok(Triplet {
        anchor,
        positive,
        negative,
        anchor_is_core: true,
    })
}

/// Immutable inputs shared by every training iteration.
pub struct TrainContext<'a> {
    pub pipeline: &'a Pipeline,
    pub corpus: &'a TrainCorpus,
    pub pool: &'a EasyDistractorSet,
    pub pca: &'a PcaModel,
}

/// One optimizer step: sample, inject, run the three branches, assemble
/// the objective, backpropagate, and update.
pub fn train_iteration(
    ctx: &TrainContext,
    set: &mut ParamSet,
    adam: &mut AdamState,
    rng: &mut ChaCha8Rng,
    iteration: u64,
) -> Result<LossReport> {
    let cfg = &ctx.pipeline.spec.train;
    let trip = sample_triplet(ctx.corpus, rng, cfg.t_train)?;
    let (x_a, inj_label) = if trip.anchor_is_core && !ctx.pool.is_empty() {
        let inj = inject_distractors(&trip.anchor, ctx.pool, Some(ctx.pca), INJECT_RATIO, rng)?;
        (inj.features, Some(inj.label))
    } else {
        (trip.anchor.clone(), None)
    };

    let mut g = Graph::new();
    let bind = set.bind(&mut g);
    let xa = g.constant_tensor(&x_a);
    let xp = g.constant_tensor(&trip.positive);
    let xn = g.constant_tensor(&trip.negative);

    let wdi_a = ctx.pipeline.ddm.forward(&mut g, &bind, xa, Some(rng))?;
    let wdi_p = ctx.pipeline.ddm.forward(&mut g, &bind, xp, Some(rng))?;
    let wdi_n = ctx.pipeline.ddm.forward(&mut g, &bind, xn, Some(rng))?;
    let l_di = inj_label.as_ref().map(|label| {
        let y = g.constant(label.clone(), &[label.len()]);
        discrimination_loss(&mut g, wdi_a, y)
    });
    let xa_w = ddm_apply_train(&mut g, xa, wdi_a)?;
    let xp_w = ddm_apply_train(&mut g, xp, wdi_p)?;
    let xn_w = ddm_apply_train(&mut g, xn, wdi_n)?;

    let map_p = g.frame_sim_map(xa_w, xp_w)?;
    let map_n = g.frame_sim_map(xa_w, xn_w)?;
    let d_p = ctx.pipeline.tsm.tune_map(&mut g, &bind, map_p)?;
    let d_n = ctx.pipeline.tsm.tune_map(&mut g, &bind, map_n)?;
    let l_fr = frame_loss(&mut g, d_p, d_n, cfg.gamma)?;

    let d_p_val = Tensor::new(g.shape(d_p), g.value(d_p).to_vec())?;
    let label_sa = extract_saliency_label(&d_p_val, x_a.shape()[0])?;
    let w_sa = ctx.pipeline.tsm.tsm_forward(&mut g, &bind, xa_w)?;
    let l_sa = saliency_loss(&mut g, w_sa, &label_sa)?;

    let wgu_a = ctx.pipeline.tgm.tgm_forward(&mut g, &bind, xa_w)?;
    let wgu_p = ctx.pipeline.tgm.tgm_forward(&mut g, &bind, xp_w)?;
    let wgu_n = ctx.pipeline.tgm.tgm_forward(&mut g, &bind, xn_w)?;

    let w_anchor = g.mul(w_sa, wgu_a);
    let va_in = g.hadamard_frames(xa_w, w_anchor)?;
    let va = g.st_gap(va_in)?;
    let vp_in = g.hadamard_frames(xp_w, wgu_p)?;
    let vp = g.st_gap(vp_in)?;
    let vn_in = g.hadamard_frames(xn_w, wgu_n)?;
    let vn = g.st_gap(vn_in)?;
    let l_vi = video_loss(&mut g, va, vp, vn, cfg.gamma);

    let mut objective = g.add(l_vi, l_fr);
    objective = g.add(objective, l_sa);
    if let Some(ld) = l_di {
        let scaled = g.scale(ld, cfg.alpha);
        objective = g.add(objective, scaled);
    }

    let (l_vi_v, l_fr_v, l_sa_v) = (
        g.scalar_value(l_vi) as f64,
        g.scalar_value(l_fr) as f64,
        g.scalar_value(l_sa) as f64,
    );
    let l_di_v = l_di.map(|n| g.scalar_value(n) as f64).unwrap_or(0.0);
    let report = LossReport {
        l_vi: l_vi_v,
        l_fr: l_fr_v,
        l_sa: l_sa_v,
        l_di: l_di_v,
        total: total_loss(l_vi_v, l_fr_v, l_sa_v, l_di_v, cfg.alpha as f64),
    };
    if !report.total.is_finite() {
        return Err(VvsError::Diverged {
            iteration,
            detail: format!(
                "l_vi={:.4e} l_fr={:.4e} l_sa={:.4e} l_di={:.4e}",
                report.l_vi, report.l_fr, report.l_sa, report.l_di
            ),
        });
    }

    g.backward(objective)?;
    set.accumulate_from(&g);
    adam.step(set)?;
    Ok(report)
}

/// Embed every video of `features` through the enabled module subset
/// into a fresh store.
pub fn embed_corpus(
    pipeline: &Pipeline,
    set: &ParamSet,
    features: &BTreeMap<String, Tensor>,
    toggles: PipelineToggles,
) -> Result<EmbeddingStore> {
    let dim = features
        .values()
        .next()
        .map(|x| x.shape()[2])
        .ok_or_else(|| VvsError::Config("embed: empty corpus".into()))?;
    let mut store = EmbeddingStore::new(dim)?;
    for (id, x) in features {
        let trace = pipeline.embed(set, x, toggles)?;
        store.index_add(id, &trace.embedding)?;
    }
    Ok(store)
}

pub fn load_raw_corpus(
    manifest: &DatasetManifest,
    base: &Path,
) -> Result<BTreeMap<String, FrameFeatures>> {
    let mut out = BTreeMap::new();
    for v in &manifest.videos {
        let path = manifest.feature_path(base, &v.id)?;
        out.insert(v.id.clone(), crate::io::read_features(&path)?);
    }
    Ok(out)
}

pub fn whiten_corpus(
    pca: &PcaModel,
    raw: &BTreeMap<String, FrameFeatures>,
) -> Result<BTreeMap<String, Tensor>> {
    raw.iter()
        .map(|(id, f)| Ok((id.clone(), pca.apply(f)?.data)))
        .collect()
}

/// Everything `train` produces: the best parameters, the fitted
/// whitening, and the per-iteration and per-epoch histories.
#[derive(Debug)]
pub struct TrainOutcome {
    pub spec: PipelineSpec,
    pub pipeline: Pipeline,
    pub set: ParamSet,
    pub pca: PcaModel,
    pub reports: Vec<LossReport>,
    pub val_history: Vec<f64>,
    pub best_epoch: usize,
    pub best_map: f64,
}

type ParamSnapshot = Vec<(String, Tensor)>;

fn snapshot(set: &ParamSet) -> ParamSnapshot {
    set.iter()
        .map(|p| (p.name.clone(), p.tensor.clone()))
        .collect()
}

fn restore(set: &mut ParamSet, snap: &[(String, Tensor)]) {
    for (name, tensor) in snap {
        let i = set.find(name).expect("snapshot taken from this set");
        set.get_mut(i).tensor = tensor.clone();
    }
}

/// Full training run on a corpus directory: fit whitening, build the
/// distractor pool, optimize, validate per epoch, and keep the
/// best-validation parameters.
pub fn train(spec: &PipelineSpec, manifest: &DatasetManifest, base: &Path) -> Result<TrainOutcome> {
    spec.train.validate()?;
    let raw = load_raw_corpus(manifest, base)?;
    let pca = fit_pca_whitening(raw.values(), spec.ddm.in_dim)?;
    let whitened = whiten_corpus(&pca, &raw)?;
    let pool = build_distractor_set(manifest, base, spec.train.lambda_mag)?;
    if pool.is_empty() {
        log::warn!("easy-distractor pool is empty; training proceeds without injection");
    }
    let corpus = TrainCorpus::new(manifest, whitened)?;

    let mut rng = seeded_rng(spec.train.seed);
    let mut set = ParamSet::new();
    let pipeline = Pipeline::init(&mut set, spec.clone(), &mut rng)?;
    let mut adam = AdamState::new(spec.train.lr);
    let ctx = TrainContext {
        pipeline: &pipeline,
        corpus: &corpus,
        pool: &pool,
        pca: &pca,
    };

    let mut reports = Vec::with_capacity(spec.train.epochs * spec.train.iters_per_epoch);
    let mut val_history = Vec::with_capacity(spec.train.epochs);
    let mut best: Option<(f64, usize, ParamSnapshot)> = None;
    let mut iteration = 0u64;
    for epoch in 0..spec.train.epochs {
        for _ in 0..spec.train.iters_per_epoch {
            iteration += 1;
            reports.push(train_iteration(
                &ctx, &mut set, &mut adam, &mut rng, iteration,
            )?);
        }
        let store = embed_corpus(&pipeline, &set, &corpus.features, PipelineToggles::all())?;
        let lists = store.rank_all(manifest)?;
        let map = mean_average_precision(&lists, manifest, Tier::Isvr).map;
        val_history.push(map);
        log::info!(
            "epoch {epoch}: total loss {:.4}, validation mAP {map:.4}",
            reports.last().map(|r| r.total).unwrap_or(f64::NAN)
        );
        if best.as_ref().is_none_or(|(b, _, _)| map > *b) {
            best = Some((map, epoch, snapshot(&set)));
        }
    }
    let (best_map, best_epoch, snap) = best.expect("at least one epoch ran");
    restore(&mut set, &snap);
    Ok(TrainOutcome {
        spec: spec.clone(),
        pipeline,
        set,
        pca,
        reports,
        val_history,
        best_epoch,
        best_map,
    })
}

/// Write spec echo, model parameters, and whitening sections into one
/// checkpoint file.
pub fn save_checkpoint(
    path: &Path,
    spec: &PipelineSpec,
    set: &ParamSet,
    pca: &PcaModel,
) -> Result<()> {
    let config = serde_json::to_string(spec)?;
    let mut params = snapshot(set);
    params.extend(pca.to_params());
    crate::io::write_checkpoint(path, &config, &params)
}

/// Rebuild the pipeline from a checkpoint; every model parameter must be
/// present with its original shape.
pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, PcaModel, Pipeline)> {
    let (config, params) = crate::io::read_checkpoint(path)?;
    let spec: PipelineSpec = serde_json::from_str(&config)?;
    let pca = PcaModel::from_params(&params)?;
    let mut set = ParamSet::new();
    for (name, tensor) in params {
        if !name.starts_with("pca.") {
            set.add(name, tensor)?;
        }
    }
    let loaded = set.len();
    let mut rng = seeded_rng(0);
    let pipeline = Pipeline::init(&mut set, spec, &mut rng)?;
    if set.len() != loaded {
        return Err(VvsError::Format {
            format: "VVSC",
            detail: format!(
                "checkpoint holds {loaded} model parameters but the config requires {}",
                set.len()
            ),
        });
    }
    Ok((set, pca, pipeline))
}
