//! Synthetic desk-scale retrieval corpus: topic-structured videos with
//! annotated easy (low-magnitude) and hard (off-topic) distractor segments,
//! written as raw feature files plus a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VvsError};
use crate::features::rmac::GRID_CELLS;
use crate::io::{self, FrameFeatures};
use crate::manifest::{DatasetManifest, Tier, VideoEntry};
use crate::nn::seeded_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    /// Total video count, background included.
    pub videos: usize,
    pub queries: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub channels: usize,
    /// Topic clusters; one query per topic up to `queries`.
    pub topics: usize,
    pub scenes_per_topic: usize,
    /// Share of videos generated as untopical background footage.
    pub background_fraction: f64,
    /// Target share of easy (near-blank) frames inside each core video.
    pub easy_fraction: f64,
    /// Target share of hard (off-topic) frames inside each core video.
    pub hard_fraction: f64,
    /// Magnitude threshold easy frames are kept under.
    pub lambda_mag: f32,
    /// Scene-level deviation from the topic prototype.
    pub scene_spread: f32,
    /// Per-frame deviation from the scene prototype.
    pub frame_noise: f32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            videos: 200,
            queries: 20,
            t_min: 30,
            t_max: 120,
            channels: 32,
            topics: 20,
            scenes_per_topic: 3,
            background_fraction: 0.15,
            easy_fraction: 0.14,
            hard_fraction: 0.10,
            lambda_mag: 40.0,
            scene_spread: 0.6,
            frame_noise: 0.25,
        }
    }
}

impl SynthConfig {
    pub fn background_count(&self) -> usize {
        ((self.videos as f64 * self.background_fraction).round() as usize)
            .clamp(1, self.videos.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.videos == 0 {
            return Err(VvsError::Config("videos must be positive".into()));
        }
        if self.queries == 0 {
            return Err(VvsError::Config("queries must be positive".into()));
        }
        if self.topics < 2 {
            return Err(VvsError::Config(
                "need at least 2 topics for negatives".into(),
            ));
        }
        if self.queries > self.topics {
            return Err(VvsError::Config(format!(
                "queries ({}) cannot exceed topics ({})",
                self.queries, self.topics
            )));
        }
        if self.scenes_per_topic < 2 {
            return Err(VvsError::Config("need at least 2 scenes per topic".into()));
        }
        let core = self.videos - self.background_count();
        if core < self.topics * 2 {
            return Err(VvsError::Config(format!(
                "{} core videos cannot cover {} topics with a query and a positive each",
                core, self.topics
            )));
        }
        if self.t_min < 10 || self.t_min > self.t_max {
            return Err(VvsError::Config(format!(
                "frame-count range [{}, {}] invalid (min 10)",
                self.t_min, self.t_max
            )));
        }
        if self.channels < 8 {
            return Err(VvsError::Config("channels must be at least 8".into()));
        }
        if !(0.0..=0.4).contains(&self.easy_fraction) || !(0.0..=0.4).contains(&self.hard_fraction)
        {
            return Err(VvsError::Config(
                "distractor fractions must lie in [0, 0.4]".into(),
            ));
        }
        if self.lambda_mag <= 0.0 {
            return Err(VvsError::Config("lambda_mag must be positive".into()));
        }
        Ok(())
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    (-2.0 * u1.ln()).sqrt() * u2.cos()
}

/// Unit-norm random direction.
fn unit_vec(rng: &mut ChaCha8Rng, c: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..c).map(|_| gauss(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            return v.iter().map(|x| (x / norm) as f32).collect();
        }
    }
}

/// Unit-norm perturbation of `base` with deviation `spread`.
fn jitter(rng: &mut ChaCha8Rng, base: &[f32], spread: f32) -> Vec<f32> {
    let mut v: Vec<f64> = base
        .iter()
        .map(|&b| b as f64 + spread as f64 * gauss(rng))
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
    for x in v.iter_mut() {
        *x /= norm;
    }
    v.iter().map(|&x| x as f32).collect()
}

/// Per-region prototype of one scene or of the blank background.
type Proto = Vec<Vec<f32>>;

fn make_proto(rng: &mut ChaCha8Rng, c: usize) -> Proto {
    (0..GRID_CELLS).map(|_| unit_vec(rng, c)).collect()
}

fn derive_proto(rng: &mut ChaCha8Rng, base: &Proto, spread: f32) -> Proto {
    base.iter().map(|row| jitter(rng, row, spread)).collect()
}

/// One frame: jittered prototype rows scaled so the whole `[S2, C]` block
/// has Frobenius norm `magnitude`.
fn synth_frame(
    rng: &mut ChaCha8Rng,
    proto: &Proto,
    noise: f32,
    magnitude: f32,
    out: &mut Vec<f32>,
) {
    let scale = magnitude / (GRID_CELLS as f32).sqrt();
    for row in proto {
        let v = jitter(rng, row, noise);
        out.extend(v.iter().map(|&x| x * scale));
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum FrameKind {
    Content,
    /// Index into the scene list of a foreign topic.
    Hard {
        topic: usize,
        scene: usize,
    },
    Easy,
}

#[derive(Debug, Clone, Copy)]
enum Role {
    /// The topic's query; scene 0.
    Query,
    /// Full duplicate of the query's scene.
    Duplicate,
    /// Partial overlap: scene 0 for a leading stretch, then another scene.
    Crop,
    /// Same topic, different scene.
    SameTopic,
}

/// Carve `target` frames of non-content kind into `kinds`, in segments of
/// `seg_min..=seg_max` frames, preferring stretches that are still content.
fn carve<F: FnMut(&mut ChaCha8Rng) -> FrameKind>(
    rng: &mut ChaCha8Rng,
    kinds: &mut [FrameKind],
    target: usize,
    seg_min: usize,
    seg_max: usize,
    mut kind: F,
    segments: &mut Vec<[u32; 2]>,
) {
    let t = kinds.len();
    let mut placed = 0usize;
    let mut attempts = 0usize;
    while placed < target && attempts < 40 * t {
        attempts += 1;
        let want = rng.gen_range(seg_min..=seg_max).min(target - placed).max(1);
        let start = rng.gen_range(0..t);
        let end = (start + want).min(t);
        if kinds[start..end].iter().all(|k| *k == FrameKind::Content) && end > start {
            let k = kind(rng);
            for slot in kinds[start..end].iter_mut() {
                *slot = k;
            }
            segments.push([start as u32, end as u32]);
            placed += end - start;
        }
    }
    segments.sort();
}

/// Generate the corpus under `out_dir`: raw feature files in
/// `features/` plus `manifest.json`. Pure function of (config, seed).
pub fn synth_generate_dataset(
    cfg: &SynthConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<(DatasetManifest, PathBuf)> {
    cfg.validate()?;
    let feat_dir = out_dir.join("features");
    std::fs::create_dir_all(&feat_dir)
        .map_err(|e| VvsError::io(feat_dir.display().to_string(), e))?;

    let mut rng = seeded_rng(seed);
    let c = cfg.channels;

    let blank = make_proto(&mut rng, c);
    let topics: Vec<Proto> = (0..cfg.topics).map(|_| make_proto(&mut rng, c)).collect();
    let scenes: Vec<Vec<Proto>> = topics
        .iter()
        .map(|t| {
            (0..cfg.scenes_per_topic)
                .map(|_| derive_proto(&mut rng, t, cfg.scene_spread))
                .collect()
        })
        .collect();

    let n_bg = cfg.background_count();
    let n_core = cfg.videos - n_bg;
    let mut manifest = DatasetManifest::default();
    let easy_mag = |rng: &mut ChaCha8Rng| rng.gen_range(5.0..cfg.lambda_mag * 0.875);

    // core videos, round-robin over topics
    let mut group_index = vec![0usize; cfg.topics];
    let mut members: Vec<(usize, usize, Role)> = Vec::with_capacity(n_core);
    for v in 0..n_core {
        let topic = v % cfg.topics;
        let within = group_index[topic];
        group_index[topic] += 1;
        let role = match within {
            0 => Role::Query,
            i => match (i - 1) % 4 {
                0 => Role::Duplicate,
                1 => Role::Crop,
                _ => Role::SameTopic,
            },
        };
        members.push((v, topic, role));
    }

    let mut queries: Vec<String> = Vec::new();
    let mut query_of_topic: BTreeMap<usize, String> = BTreeMap::new();
    let mut relevance: BTreeMap<String, BTreeMap<String, Tier>> = BTreeMap::new();

    for &(v, topic, role) in &members {
        let id = format!("v{v:04}");
        let t = rng.gen_range(cfg.t_min..=cfg.t_max);

        let scene_count = cfg.scenes_per_topic;
        let alt_scene = 1 + (v / cfg.topics) % (scene_count - 1);
        let mut kinds = vec![FrameKind::Content; t];
        let mut segments: Vec<[u32; 2]> = Vec::new();
        let easy_target = (cfg.easy_fraction * t as f64).round() as usize;
        let hard_target = (cfg.hard_fraction * t as f64).round() as usize;
        let n_topics = cfg.topics;
        carve(
            &mut rng,
            &mut kinds,
            hard_target,
            3,
            8,
            |r| {
                let mut other = r.gen_range(0..n_topics);
                if other == topic {
                    other = (other + 1) % n_topics;
                }
                FrameKind::Hard {
                    topic: other,
                    scene: r.gen_range(0..scene_count),
                }
            },
            &mut segments,
        );
        carve(
            &mut rng,
            &mut kinds,
            easy_target,
            2,
            5,
            |_| FrameKind::Easy,
            &mut segments,
        );

        // content scene per position: crops switch scene after the overlap
        let crop_split = match role {
            Role::Crop => (t as f64 * rng.gen_range(0.4..0.6)) as usize,
            _ => t,
        };
        let own_scene = match role {
            Role::Query | Role::Duplicate | Role::Crop => 0,
            Role::SameTopic => alt_scene,
        };

        let mut data = Vec::with_capacity(t * GRID_CELLS * c);
        for (fr, kind) in kinds.iter().enumerate() {
            match *kind {
                FrameKind::Content => {
                    let scene = if fr < crop_split {
                        own_scene
                    } else {
                        alt_scene
                    };
                    let m = rng.gen_range(45.0..70.0);
                    synth_frame(
                        &mut rng,
                        &scenes[topic][scene],
                        cfg.frame_noise,
                        m,
                        &mut data,
                    );
                }
                FrameKind::Hard {
                    topic: ft,
                    scene: fs,
                } => {
                    let m = rng.gen_range(45.0..70.0);
                    synth_frame(&mut rng, &scenes[ft][fs], cfg.frame_noise, m, &mut data);
                }
                FrameKind::Easy => {
                    let m = easy_mag(&mut rng);
                    synth_frame(&mut rng, &blank, 0.05, m, &mut data);
                }
            }
        }

        let feats = FrameFeatures::new(Tensor::new(&[t, GRID_CELLS, c], data)?, false)?;
        let rel_path = format!("features/{id}.vvsf");
        io::write_features(&out_dir.join(&rel_path), &feats)?;
        manifest.videos.push(VideoEntry {
            id: id.clone(),
            feature_path: rel_path,
            duration_frames: t as u32,
            topic_id: Some(topic as u32),
        });
        if !segments.is_empty() {
            manifest.distractor_segments.insert(id.clone(), segments);
        }

        match role {
            Role::Query if topic < cfg.queries => {
                queries.push(id.clone());
                query_of_topic.insert(topic, id.clone());
            }
            _ => {}
        }
        if let Some(q) = query_of_topic.get(&topic) {
            if *q != id {
                let tier = match role {
                    Role::Duplicate => Tier::Dsvr,
                    Role::Crop => Tier::Csvr,
                    _ => Tier::Isvr,
                };
                relevance
                    .entry(q.clone())
                    .or_default()
                    .insert(id.clone(), tier);
            }
        }
    }

    for b in 0..n_bg {
        let id = format!("b{b:04}");
        let t = rng.gen_range(cfg.t_min..=cfg.t_max);
        let mut data = Vec::with_capacity(t * GRID_CELLS * c);
        for _ in 0..t {
            if rng.gen_bool(0.7) {
                let m = easy_mag(&mut rng);
                synth_frame(&mut rng, &blank, 0.05, m, &mut data);
            } else {
                let junk = make_proto(&mut rng, c);
                let m = rng.gen_range(cfg.lambda_mag + 5.0..cfg.lambda_mag + 25.0);
                synth_frame(&mut rng, &junk, 0.0, m, &mut data);
            }
        }
        let feats = FrameFeatures::new(Tensor::new(&[t, GRID_CELLS, c], data)?, false)?;
        let rel_path = format!("features/{id}.vvsf");
        io::write_features(&out_dir.join(&rel_path), &feats)?;
        manifest.videos.push(VideoEntry {
            id,
            feature_path: rel_path,
            duration_frames: t as u32,
            topic_id: None,
        });
    }

    manifest.queries = queries;
    manifest.relevance = relevance;
    manifest.validate(out_dir)?;
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok((manifest, out_dir.to_path_buf()))
}
