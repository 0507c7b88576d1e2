//! Easy-distractor pool: low-magnitude frames harvested from background
//! videos, later injected into training anchors.

use std::path::Path;

use crate::error::{Result, VvsError};
use crate::features::rmac::frame_magnitude;
use crate::io;
use crate::manifest::DatasetManifest;
use crate::tensor::Tensor;

/// One harvested frame, kept in raw (pre-whitening) form.
#[derive(Debug, Clone)]
pub struct DistractorEntry {
    pub source_id: String,
    pub frame_index: usize,
    /// `[S2, C]` raw region descriptors.
    pub features: Tensor,
    pub magnitude: f32,
}

#[derive(Debug, Clone)]
pub struct EasyDistractorSet {
    pub entries: Vec<DistractorEntry>,
    pub lambda_mag: f32,
    pub scanned_frames: usize,
}

impl EasyDistractorSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fraction of scanned frames that fell at or below the threshold.
    pub fn kept_fraction(&self) -> f64 {
        if self.scanned_frames == 0 {
            0.0
        } else {
            self.entries.len() as f64 / self.scanned_frames as f64
        }
    }
}

/// Scan the background videos of `manifest` and keep every frame whose
/// raw magnitude is at or below `lambda_mag`. An empty result is allowed
/// (training then cannot inject) and only logged.
pub fn build_distractor_set(
    manifest: &DatasetManifest,
    base: &Path,
    lambda_mag: f32,
) -> Result<EasyDistractorSet> {
    let mut entries = Vec::new();
    let mut scanned = 0usize;
    for id in manifest.background_ids() {
        let path = manifest.feature_path(base, id)?;
        let feats = io::read_features(&path)?;
        if feats.pca_applied {
            return Err(VvsError::Config(format!(
                "distractor pool needs raw features, but '{id}' is already whitened"
            )));
        }
        let (s2, c) = (feats.regions(), feats.channels());
        for (fr, frame) in feats.data.data().chunks_exact(s2 * c).enumerate() {
            scanned += 1;
            let magnitude = frame_magnitude(frame);
            if magnitude <= lambda_mag {
                entries.push(DistractorEntry {
                    source_id: id.to_string(),
                    frame_index: fr,
                    features: Tensor::new(&[s2, c], frame.to_vec())?,
                    magnitude,
                });
            }
        }
    }
    if entries.is_empty() {
        log::warn!(
            "distractor pool is empty: no background frame at or below magnitude {lambda_mag} \
             across {scanned} frames; training cannot inject"
        );
    }
    Ok(EasyDistractorSet {
        entries,
        lambda_mag,
        scanned_frames: scanned,
    })
}
