//! Frame feature assembly and corpus construction: multi-level region
//! pooling over backbone activations, PCA whitening, the low-magnitude
//! distractor pool, and the synthetic desk-scale dataset generator.

pub mod distractor;
pub mod pca;
pub mod rmac;
pub mod synth;

pub use distractor::{build_distractor_set, EasyDistractorSet};
pub use pca::{fit_pca_whitening, PcaModel};
pub use rmac::{
    assemble_imac, frame_magnitude, rmac_pool, ActivationStack, DEFAULT_LEVELS, GRID_CELLS,
};
pub use synth::{synth_generate_dataset, SynthConfig};
