//! Retrieval evaluation: an embedding store with deterministic cosine
//! search, tiered mean-average-precision, duration-bucket breakdowns,
//! distractor-masking and direct-weight experiments, and a speed
//! benchmark against a frame-level chamfer baseline.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, VvsError};
use crate::manifest::{DatasetManifest, Segment, Tier};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::tsm::{extract_saliency_label, TsmModel};
use crate::video_ops::{chamfer_similarity, embed_video, frame_similarity_map};

/// Unit-norm video embeddings, kept sorted by video id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dim: usize,
    ids: Vec<String>,
    vecs: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedEntry {
    pub video_id: String,
    pub score: f32,
}

/// Scores sorted descending, ties broken by ascending video id.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<RankedEntry>,
}

/// Build a ranked list from externally computed `(video_id, score)` pairs:
/// the query itself is dropped, scores sort descending with ties broken by
/// ascending id, and at most `topk` entries survive.
pub fn rank_scores(query_id: &str, scored: Vec<(String, f32)>, topk: usize) -> RankedList {
    let mut entries: Vec<RankedEntry> = scored
        .into_iter()
        .filter(|(id, _)| id != query_id)
        .map(|(video_id, score)| RankedEntry { video_id, score })
        .collect();
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.video_id.cmp(&b.video_id))
    });
    entries.truncate(topk);
    RankedList { query_id: query_id.to_string(), entries }
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(VvsError::Config(
                "embedding store: dim must be positive".into(),
            ));
        }
        Ok(Self {
            dim,
            ids: Vec::new(),
            vecs: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        let i = self
            .ids
            .binary_search_by(|probe| probe.as_str().cmp(id))
            .ok()?;
        Some(&self.vecs[i * self.dim..(i + 1) * self.dim])
    }

    /// Insert a unit-normalized copy of `v`, keeping ids sorted.
    pub fn index_add(&mut self, id: &str, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(VvsError::Shape {
                op: "index_add",
                detail: format!("vector length {} vs store dim {}", v.len(), self.dim),
            });
        }
        let pos = match self.ids.binary_search_by(|probe| probe.as_str().cmp(id)) {
            Ok(_) => {
                return Err(VvsError::Config(format!(
                    "embedding store: duplicate video id '{id}'"
                )))
            }
            Err(pos) => pos,
        };
        let norm = v
            .iter()
            .map(|&x| (x as f64) * (x as f64))
            .sum::<f64>()
            .sqrt();
        if norm < 1e-12 {
            return Err(VvsError::ZeroNorm {
                op: "index_add",
                norm,
            });
        }
        let unit: Vec<f32> = v.iter().map(|&x| (x as f64 / norm) as f32).collect();
        self.ids.insert(pos, id.to_string());
        let at = pos * self.dim;
        self.vecs.splice(at..at, unit);
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let records = self
            .ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), &self.vecs[i * self.dim..(i + 1) * self.dim]));
        crate::io::write_embeddings(path, self.dim, records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (dim, records) = crate::io::read_embeddings(path)?;
        let mut store = Self::new(dim)?;
        for (id, vec) in &records {
            store.index_add(id, vec)?;
        }
        Ok(store)
    }

    fn rank(&self, query_id: &str, scores: Vec<f32>, topk: usize) -> RankedList {
        let scored = self.ids.iter().cloned().zip(scores).collect();
        rank_scores(query_id, scored, topk)
    }

    fn score_one(&self, i: usize, q: &[f32]) -> f32 {
        let row = &self.vecs[i * self.dim..(i + 1) * self.dim];
        row.iter()
            .zip(q)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum::<f64>() as f32
    }

    /// Rank every record against `q` (the record named `query_id` is
    /// excluded), keeping the best `topk`.
    pub fn search(&self, query_id: &str, q: &[f32], topk: usize) -> Result<RankedList> {
        if q.len() != self.dim {
            return Err(VvsError::Shape {
                op: "search",
                detail: format!("query length {} vs store dim {}", q.len(), self.dim),
            });
        }
        let scores: Vec<f32> = (0..self.ids.len()).map(|i| self.score_one(i, q)).collect();
        Ok(self.rank(query_id, scores, topk))
    }

    /// [`EmbeddingStore::search`] with the scoring pass fanned out across
    /// worker threads; results are identical to the sequential path.
    pub fn search_parallel(&self, query_id: &str, q: &[f32], topk: usize) -> Result<RankedList> {
        if q.len() != self.dim {
            return Err(VvsError::Shape {
                op: "search",
                detail: format!("query length {} vs store dim {}", q.len(), self.dim),
            });
        }
        let scores: Vec<f32> = (0..self.ids.len())
            .into_par_iter()
            .map(|i| self.score_one(i, q))
            .collect();
        Ok(self.rank(query_id, scores, topk))
    }

    /// Full ranked list for every manifest query present in the store.
    pub fn rank_all(&self, manifest: &DatasetManifest) -> Result<Vec<RankedList>> {
        manifest
            .queries
            .iter()
            .map(|qid| {
                let q = self.get(qid).ok_or_else(|| {
                    VvsError::Manifest(format!("query '{qid}' missing from the embedding store"))
                })?;
                self.search(qid, q, usize::MAX)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MapReport {
    pub task: Tier,
    pub map: f64,
    pub per_query: Vec<(String, f64)>,
    /// Queries with no relevant item in the ranked database.
    pub skipped: Vec<String>,
}

/// Average precision of one ranked list: mean of precision-at-hit over
/// the relevant items it contains.
fn average_precision(list: &RankedList, is_relevant: impl Fn(&str) -> bool) -> Option<f64> {
    let relevant = list
        .entries
        .iter()
        .filter(|e| is_relevant(&e.video_id))
        .count();
    if relevant == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut acc = 0.0f64;
    for (rank0, e) in list.entries.iter().enumerate() {
        if is_relevant(&e.video_id) {
            hits += 1;
            acc += hits as f64 / (rank0 + 1) as f64;
        }
    }
    Some(acc / relevant as f64)
}

/// Mean average precision over full ranked lists under `task`'s
/// relevance regime. Queries with zero relevant database items are
/// skipped with a warning.
pub fn mean_average_precision(
    lists: &[RankedList],
    manifest: &DatasetManifest,
    task: Tier,
) -> MapReport {
    let mut per_query = Vec::new();
    let mut skipped = Vec::new();
    for list in lists {
        let qid = &list.query_id;
        match average_precision(list, |vid| manifest.grade(qid, vid).relevant_for(task)) {
            Some(ap) => per_query.push((qid.clone(), ap)),
            None => {
                log::warn!(
                    "query {qid} has no {}-relevant item in the database; skipped",
                    task.name()
                );
                skipped.push(qid.clone());
            }
        }
    }
    let map = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, ap)| ap).sum::<f64>() / per_query.len() as f64
    };
    MapReport {
        task,
        map,
        per_query,
        skipped,
    }
}

/// Embed `x` with annotated distractor segments zero-weighted and all
/// other frames at weight 1.
pub fn oracle_suppress(x: &Tensor, segments: &[Segment]) -> Result<Tensor> {
    let t = x.shape()[0];
    let mut w = vec![1.0f32; t];
    for seg in segments {
        for v in w
            .iter_mut()
            .take((seg[1] as usize).min(t))
            .skip(seg[0] as usize)
        {
            *v = 0.0;
        }
    }
    embed_video(x, &w)
}

/// Row/column saliency patterns of a tuned query-database map, resampled
/// to the two original frame counts.
pub fn direct_weights_from_map(
    d: &Tensor,
    t_q: usize,
    t_db: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let w_q = extract_saliency_label(d, t_q)?.resampled;
    let s = d.shape();
    let (a, b) = (s[0], s[1]);
    let mut tr = vec![0.0f32; a * b];
    for i in 0..a {
        for j in 0..b {
            tr[j * a + i] = d.data()[i * b + j];
        }
    }
    let dt = Tensor::new(&[b, a], tr)?;
    let w_db = extract_saliency_label(&dt, t_db)?.resampled;
    Ok((w_q, w_db))
}

/// Tune the query-database similarity map and read per-frame weights
/// for both sides directly off it.
pub fn direct_weights(
    query_x: &Tensor,
    db_x: &Tensor,
    set: &ParamSet,
    tsm: &TsmModel,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let mut g = crate::graph::Graph::inference();
    let bind = set.bind(&mut g);
    let qn = g.constant_tensor(query_x);
    let dn = g.constant_tensor(db_x);
    let raw = g.frame_sim_map(qn, dn)?;
    let tuned = tsm.tune_map(&mut g, &bind, raw)?;
    let d = Tensor::new(g.shape(tuned), g.value(tuned).to_vec())?;
    direct_weights_from_map(&d, query_x.shape()[0], db_x.shape()[0])
}

fn embed_or_uniform(x: &Tensor, w: &[f32]) -> Result<Tensor> {
    match embed_video(x, w) {
        Err(VvsError::ZeroNorm { .. }) => embed_video(x, &vec![1.0; x.shape()[0]]),
        other => other,
    }
}

/// Rank the database for each query by pairwise direct-weight scores:
/// both sides of every (query, video) pair are re-pooled under weights
/// read off their tuned similarity map before comparison. A side whose
/// weight vector collapses to zero falls back to uniform pooling.
pub fn direct_weight_search(
    features: &BTreeMap<String, Tensor>,
    queries: &[String],
    set: &ParamSet,
    tsm: &TsmModel,
) -> Result<Vec<RankedList>> {
    let mut lists = Vec::with_capacity(queries.len());
    for qid in queries {
        let qx = features
            .get(qid)
            .ok_or_else(|| VvsError::Manifest(format!("query '{qid}' has no features")))?;
        let mut scored = Vec::with_capacity(features.len().saturating_sub(1));
        for (vid, vx) in features {
            if vid == qid {
                continue;
            }
            let (w_q, w_v) = direct_weights(qx, vx, set, tsm)?;
            let eq = embed_or_uniform(qx, &w_q)?;
            let ev = embed_or_uniform(vx, &w_v)?;
            let score: f64 = eq
                .data()
                .iter()
                .zip(ev.data())
                .map(|(&a, &b)| f64::from(a) * f64::from(b))
                .sum();
            scored.push((vid.clone(), score as f32));
        }
        lists.push(rank_scores(qid, scored, usize::MAX));
    }
    Ok(lists)
}

#[derive(Debug, Clone, Serialize)]
pub struct BucketReport {
    /// Closed duration range covered by this bucket.
    pub min_frames: u32,
    pub max_frames: u32,
    pub video_count: usize,
    pub map: f64,
    pub skipped: Vec<String>,
}

/// Split the stored database into `buckets` equal-count groups by
/// duration and evaluate each group as a standalone database.
pub fn eval_by_duration(
    store: &EmbeddingStore,
    manifest: &DatasetManifest,
    task: Tier,
    buckets: usize,
) -> Result<Vec<BucketReport>> {
    if buckets == 0 {
        return Err(VvsError::Config(
            "duration evaluation: buckets must be positive".into(),
        ));
    }
    if store.len() < buckets {
        return Err(VvsError::Config(format!(
            "duration evaluation: {} videos cannot fill {buckets} buckets",
            store.len()
        )));
    }
    let mut by_duration: Vec<(&str, u32)> = store
        .ids()
        .iter()
        .map(|id| manifest.video(id).map(|v| (id.as_str(), v.duration_frames)))
        .collect::<Result<_>>()?;
    by_duration.sort_by(|a, b| a.1.cmp(&b.1).then_with(|| a.0.cmp(b.0)));

    let base = store.len() / buckets;
    let extra = store.len() % buckets;
    let mut reports = Vec::with_capacity(buckets);
    let mut cursor = 0usize;
    for b in 0..buckets {
        let size = base + usize::from(b < extra);
        let slice = &by_duration[cursor..cursor + size];
        cursor += size;
        let mut sub = EmbeddingStore::new(store.dim())?;
        for (id, _) in slice {
            sub.index_add(id, store.get(id).expect("id came from the store"))?;
        }
        let mut lists = Vec::new();
        for qid in &manifest.queries {
            if let Some(q) = store.get(qid) {
                lists.push(sub.search(qid, q, usize::MAX)?);
            }
        }
        let report = mean_average_precision(&lists, manifest, task);
        reports.push(BucketReport {
            min_frames: slice.first().map(|x| x.1).unwrap_or(0),
            max_frames: slice.last().map(|x| x.1).unwrap_or(0),
            video_count: size,
            map: report.map,
            skipped: report.skipped,
        });
    }
    Ok(reports)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub seconds_per_query: f64,
    /// Similarity work issued per query: one op per stored video for the
    /// embedding scan, one per map cell for the chamfer baseline.
    pub similarity_op_count: u64,
    pub stored_feature_count: u64,
}

/// Time the video-level embedding scan against the frame-level chamfer
/// baseline over the same queries. Returns (video_level, frame_level).
pub fn bench_speed(
    store: &EmbeddingStore,
    query_ids: &[String],
    frame_db: &BTreeMap<String, Tensor>,
) -> Result<(BenchReport, BenchReport)> {
    if query_ids.is_empty() {
        return Err(VvsError::Config("bench: no queries".into()));
    }
    for qid in query_ids {
        if store.get(qid).is_none() || !frame_db.contains_key(qid) {
            return Err(VvsError::Manifest(format!(
                "bench query '{qid}' missing features"
            )));
        }
    }

    let t0 = Instant::now();
    let mut sink = 0.0f32;
    for qid in query_ids {
        let q = store.get(qid).expect("checked above").to_vec();
        let list = store.search(qid, &q, usize::MAX)?;
        sink += list.entries.first().map(|e| e.score).unwrap_or(0.0);
    }
    let video_secs = t0.elapsed().as_secs_f64() / query_ids.len() as f64;
    let video_report = BenchReport {
        seconds_per_query: video_secs,
        similarity_op_count: store.len() as u64,
        stored_feature_count: store.len() as u64,
    };

    let total_frames: u64 = frame_db.values().map(|x| x.shape()[0] as u64).sum();
    let mut cell_ops = 0u64;
    let t1 = Instant::now();
    for qid in query_ids {
        let qx = &frame_db[qid];
        let mut scored: Vec<(&str, f32)> = Vec::with_capacity(frame_db.len());
        for (vid, dx) in frame_db {
            if vid == qid {
                continue;
            }
            let map = frame_similarity_map(qx, dx)?;
            cell_ops += (map.shape()[0] * map.shape()[1]) as u64;
            scored.push((vid, chamfer_similarity(&map)?.data()[0]));
        }
        sink += scored.first().map(|e| e.1).unwrap_or(0.0);
    }
    let frame_secs = t1.elapsed().as_secs_f64() / query_ids.len() as f64;
    std::hint::black_box(sink);
    let frame_report = BenchReport {
        seconds_per_query: frame_secs,
        similarity_op_count: cell_ops / query_ids.len() as u64,
        stored_feature_count: total_frames,
    };
    Ok((video_report, frame_report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::VideoEntry;
    use rand::Rng;

    fn unit(v: Vec<f32>) -> Vec<f32> {
        let n = v.iter().map(|&x| x * x).sum::<f32>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn tiny_store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(2).unwrap();
        s.index_add("b", &[0.0, 1.0]).unwrap();
        s.index_add("a", &[1.0, 0.0]).unwrap();
        s.index_add("c", &unit(vec![1.0, 1.0])).unwrap();
        s
    }

    #[test]
    fn store_sorts_normalizes_and_rejects() {
        let mut s = tiny_store();
        assert_eq!(s.ids(), ["a", "b", "c"]);
        assert!((s.get("c").unwrap()[0] - std::f32::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(s.index_add("a", &[1.0, 0.0]).is_err());
        assert!(s.index_add("d", &[1.0]).is_err());
        assert!(s.index_add("d", &[0.0, 0.0]).is_err());
        let mut scaled = EmbeddingStore::new(2).unwrap();
        scaled.index_add("x", &[3.0, 0.0]).unwrap();
        assert_eq!(scaled.get("x").unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn search_ranks_self_first_and_breaks_ties_by_id() {
        let s = tiny_store();
        let hit = s.search("<none>", &[1.0, 0.0], usize::MAX).unwrap();
        assert_eq!(hit.entries[0].video_id, "a");
        assert!((hit.entries[0].score - 1.0).abs() < 1e-6);

        let mut s2 = EmbeddingStore::new(2).unwrap();
        s2.index_add("y", &[0.0, 1.0]).unwrap();
        s2.index_add("x", &[0.0, 1.0]).unwrap();
        let tied = s2.search("<none>", &[1.0, 0.0], usize::MAX).unwrap();
        assert_eq!(tied.entries[0].video_id, "x");
        assert_eq!(tied.entries[1].video_id, "y");
        assert_eq!(tied.entries[0].score, tied.entries[1].score);
    }

    #[test]
    fn search_excludes_query_and_respects_topk() {
        let s = tiny_store();
        let list = s.search("a", &[1.0, 0.0], usize::MAX).unwrap();
        assert!(list.entries.iter().all(|e| e.video_id != "a"));
        assert_eq!(list.entries.len(), 2);
        let top1 = s.search("<none>", &[1.0, 0.0], 1).unwrap();
        assert_eq!(top1.entries.len(), 1);
    }

    #[test]
    fn search_matches_bruteforce_scan() {
        let mut rng = crate::nn::seeded_rng(3);
        let dim = 5;
        let mut s = EmbeddingStore::new(dim).unwrap();
        let mut raw = Vec::new();
        for i in 0..100 {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let id = format!("v{i:03}");
            s.index_add(&id, &v).unwrap();
            raw.push((id, unit(v)));
        }
        let q: Vec<f32> = unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let got = s.search("v005", &q, usize::MAX).unwrap();

        let mut want: Vec<(String, f32)> = raw
            .iter()
            .filter(|(id, _)| id != "v005")
            .map(|(id, v)| {
                let dot = v
                    .iter()
                    .zip(&q)
                    .map(|(&a, &b)| a as f64 * b as f64)
                    .sum::<f64>() as f32;
                (id.clone(), dot)
            })
            .collect();
        want.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        for (entry, (id, score)) in got.entries.iter().zip(&want) {
            assert_eq!(&entry.video_id, id);
            assert!((entry.score - score).abs() < 1e-6);
        }
    }

    #[test]
    fn parallel_search_equals_sequential() {
        let mut rng = crate::nn::seeded_rng(9);
        let dim = 7;
        let mut s = EmbeddingStore::new(dim).unwrap();
        for i in 0..64 {
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            s.index_add(&format!("v{i:03}"), &v).unwrap();
        }
        let q: Vec<f32> = unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let seq = s.search("v010", &q, usize::MAX).unwrap();
        let par = s.search_parallel("v010", &q, usize::MAX).unwrap();
        assert_eq!(seq, par);
    }

    fn eval_manifest() -> DatasetManifest {
        let mut m = DatasetManifest {
            videos: Vec::new(),
            queries: vec!["q".into()],
            relevance: BTreeMap::new(),
            distractor_segments: BTreeMap::new(),
        };
        for (id, dur) in [("q", 10u32), ("d1", 20), ("d2", 30), ("d3", 40), ("d4", 50)] {
            m.videos.push(VideoEntry {
                id: id.into(),
                feature_path: format!("features/{id}.vvsf"),
                duration_frames: dur,
                topic_id: Some(0),
            });
        }
        let rel = m.relevance.entry("q".into()).or_default();
        rel.insert("d1".into(), Tier::Dsvr);
        rel.insert("d2".into(), Tier::Isvr);
        m
    }

    #[test]
    fn map_hand_cases() {
        let manifest = eval_manifest();
        let list = |ids: &[&str]| RankedList {
            query_id: "q".into(),
            entries: ids
                .iter()
                .enumerate()
                .map(|(i, id)| RankedEntry {
                    video_id: id.to_string(),
                    score: 1.0 - i as f32 * 0.1,
                })
                .collect(),
        };

        // both relevant items first
        let r = mean_average_precision(&[list(&["d1", "d2", "d3", "d4"])], &manifest, Tier::Isvr);
        assert!((r.map - 1.0).abs() < 1e-12);

        // single relevant item at rank 2 of 2
        let r = mean_average_precision(&[list(&["d3", "d1"])], &manifest, Tier::Dsvr);
        assert!((r.map - 0.5).abs() < 1e-12);

        // tier filter: only d1 counts for DSVR
        let r = mean_average_precision(&[list(&["d2", "d1", "d3", "d4"])], &manifest, Tier::Dsvr);
        assert!((r.map - 0.5).abs() < 1e-12);
    }

    #[test]
    fn map_skips_queries_without_relevant_items() {
        let mut manifest = eval_manifest();
        manifest.relevance.clear();
        let lists = vec![RankedList {
            query_id: "q".into(),
            entries: vec![RankedEntry {
                video_id: "d1".into(),
                score: 0.5,
            }],
        }];
        let r = mean_average_precision(&lists, &manifest, Tier::Isvr);
        assert_eq!(r.skipped, vec!["q".to_string()]);
        assert!(r.per_query.is_empty());
        assert_eq!(r.map, 0.0);
    }

    #[test]
    fn map_matches_textbook_oracle_on_random_lists() {
        let manifest = eval_manifest();
        let mut rng = crate::nn::seeded_rng(17);
        let ids = ["d1", "d2", "d3", "d4"];
        for _ in 0..200 {
            let mut perm: Vec<&str> = ids.to_vec();
            for i in (1..perm.len()).rev() {
                let j = rng.gen_range(0..=i);
                perm.swap(i, j);
            }
            let list = RankedList {
                query_id: "q".into(),
                entries: perm
                    .iter()
                    .enumerate()
                    .map(|(i, id)| RankedEntry {
                        video_id: id.to_string(),
                        score: 1.0 - i as f32 * 0.01,
                    })
                    .collect(),
            };
            let got = mean_average_precision(&[list], &manifest, Tier::Isvr).map;

            let relevant: Vec<bool> = perm.iter().map(|&id| id == "d1" || id == "d2").collect();
            let total = relevant.iter().filter(|&&r| r).count();
            let mut hits = 0;
            let mut acc = 0.0f64;
            for (k, &r) in relevant.iter().enumerate() {
                if r {
                    hits += 1;
                    acc += hits as f64 / (k + 1) as f64;
                }
            }
            let want = acc / total as f64;
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn duration_buckets_partition_and_single_bucket_matches_global() {
        let manifest = eval_manifest();
        let mut store = EmbeddingStore::new(3).unwrap();
        let vecs = [
            ("q", vec![1.0, 0.0, 0.0]),
            ("d1", vec![0.9, 0.1, 0.0]),
            ("d2", vec![0.5, 0.5, 0.0]),
            ("d3", vec![0.0, 1.0, 0.0]),
            ("d4", vec![0.0, 0.0, 1.0]),
        ];
        for (id, v) in &vecs {
            store.index_add(id, v).unwrap();
        }

        let one = eval_by_duration(&store, &manifest, Tier::Isvr, 1).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].video_count, 5);
        let lists = store.rank_all(&manifest).unwrap();
        let global = mean_average_precision(&lists, &manifest, Tier::Isvr);
        assert!((one[0].map - global.map).abs() < 1e-12);

        let three = eval_by_duration(&store, &manifest, Tier::Isvr, 3).unwrap();
        let total: usize = three.iter().map(|b| b.video_count).sum();
        assert_eq!(total, 5);
        assert_eq!(
            three.iter().map(|b| b.video_count).collect::<Vec<_>>(),
            [2, 2, 1]
        );
        // sorted by duration: [q(10), d1(20)], [d2(30), d3(40)], [d4(50)]
        assert_eq!((three[0].min_frames, three[0].max_frames), (10, 20));
        assert_eq!((three[2].min_frames, three[2].max_frames), (50, 50));

        assert!(eval_by_duration(&store, &manifest, Tier::Isvr, 6).is_err());
        assert!(eval_by_duration(&store, &manifest, Tier::Isvr, 0).is_err());
    }

    #[test]
    fn oracle_suppression_masks_segments() {
        let t = 6;
        let mut data = Vec::new();
        for fr in 0..t {
            let v: f32 = if (2..4).contains(&fr) { -1.0 } else { 1.0 };
            data.extend_from_slice(&[v, v]);
        }
        let x = Tensor::new(&[t, 1, 2], data).unwrap();

        let clean = oracle_suppress(&x, &[]).unwrap();
        let uniform = embed_video(&x, &vec![1.0; t]).unwrap();
        assert_eq!(clean.data(), uniform.data());

        let masked = oracle_suppress(&x, &[[2, 4]]).unwrap();
        let manual = embed_video(&x, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(masked.data(), manual.data());

        assert!(oracle_suppress(&x, &[[0, 6]]).is_err());
    }

    #[test]
    fn direct_weights_worked_example_and_symmetry() {
        let d = Tensor::new(&[2, 2], vec![0.9, 0.1, 0.2, 0.3]).unwrap();
        let (w_q, w_db) = direct_weights_from_map(&d, 2, 2).unwrap();
        assert_eq!(w_q, vec![1.0, 0.0]);
        // columns: maxima [0.9, 0.3], mean 0.6
        assert_eq!(w_db, vec![1.0, 0.0]);

        let sym = Tensor::new(&[3, 3], vec![1.0, 0.2, 0.1, 0.2, 0.9, 0.3, 0.1, 0.3, 0.8]).unwrap();
        let (w_q, w_db) = direct_weights_from_map(&sym, 3, 3).unwrap();
        assert_eq!(w_q, w_db);
    }

    #[test]
    fn direct_weight_search_ranks_every_other_video() {
        let mut rng = crate::nn::seeded_rng(11);
        let t = 12;
        let c = 4;
        let mut features = BTreeMap::new();
        for id in ["d1", "d2", "q"] {
            let data: Vec<f32> = (0..t * 2 * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            features.insert(id.to_string(), Tensor::new(&[t, 2, c], data).unwrap());
        }

        let mut set = ParamSet::new();
        let tsm =
            TsmModel::init(&mut set, crate::tsm::TsmConfig::toy(), &mut rng).unwrap();

        let queries = vec!["q".to_string()];
        let lists = direct_weight_search(&features, &queries, &set, &tsm).unwrap();
        assert_eq!(lists.len(), 1);
        assert_eq!(lists[0].query_id, "q");
        assert_eq!(lists[0].entries.len(), 2);
        assert!(lists[0].entries.iter().all(|e| e.video_id != "q"));
        assert!(lists[0].entries[0].score >= lists[0].entries[1].score);

        let again = direct_weight_search(&features, &queries, &set, &tsm).unwrap();
        assert_eq!(lists, again);

        let missing = direct_weight_search(&features, &["zz".to_string()], &set, &tsm);
        assert!(missing.is_err());
    }

    #[test]
    fn bench_counts_ops_exactly() {
        let mut rng = crate::nn::seeded_rng(5);
        let dim = 4;
        let mut store = EmbeddingStore::new(dim).unwrap();
        let mut frames = BTreeMap::new();
        let lens = [3usize, 5, 4, 6];
        for (i, &t) in lens.iter().enumerate() {
            let id = format!("v{i}");
            let v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            store.index_add(&id, &v).unwrap();
            let fx: Vec<f32> = (0..t * 2 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            frames.insert(id, Tensor::new(&[t, 2, dim], fx).unwrap());
        }
        let queries = vec!["v0".to_string(), "v2".to_string()];
        let (video, frame) = bench_speed(&store, &queries, &frames).unwrap();

        assert_eq!(video.similarity_op_count, 4);
        assert_eq!(video.stored_feature_count, 4);
        // per query: sum of T_q * T_d over the other three videos
        let q0: u64 = 3 * (5 + 4 + 6);
        let q2: u64 = 4 * (3 + 5 + 6);
        assert_eq!(frame.similarity_op_count, (q0 + q2) / 2);
        assert_eq!(frame.stored_feature_count, (3 + 5 + 4 + 6) as u64);
        assert!(video.seconds_per_query >= 0.0 && frame.seconds_per_query >= 0.0);
    }
}
