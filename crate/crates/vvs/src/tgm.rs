//! Topic guidance: summarize a video into a rough topic direction,
//! measure every frame against it, and refine that signal into per-frame
//! guidance weights `W_gu` with a small hierarchical conv stack and a
//! tempered sigmoid gate.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, VvsError};
use crate::graph::{Graph, NodeId};
use crate::layers::Pad;
use crate::nn::{kaiming_uniform, ParamSet};

/// Temperature of the guidance gate.
pub const GUIDANCE_TAU: f32 = 512.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TgmConfig {
    /// Channel widths of the three 1x3 refinement convs.
    pub widths: (usize, usize, usize),
    /// Channels after the 1x1 reduction conv.
    pub reduce_dim: usize,
    pub tau: f32,
    /// Concatenate all refinement stages before the fuse conv; `false`
    /// feeds the fuse conv the reduced stage alone.
    pub hierarchical: bool,
}

impl TgmConfig {
    pub fn new() -> Self {
        Self {
            widths: (32, 64, 128),
            reduce_dim: 32,
            tau: GUIDANCE_TAU,
            hierarchical: true,
        }
    }

    /// Narrow stack with a soft temperature for gradient-check suites.
    pub fn toy() -> Self {
        Self {
            widths: (3, 4, 5),
            reduce_dim: 2,
            tau: 4.0,
            hierarchical: true,
        }
    }
}

impl Default for TgmConfig {
    fn default() -> Self {
        Self::new()
    }
}

/// Parameter indices of the refinement stack inside a shared [`ParamSet`].
#[derive(Debug, Clone)]
pub struct TgmModel {
    pub cfg: TgmConfig,
    conv_w: [usize; 3],
    conv_b: [usize; 3],
    reduce_w: usize,
    reduce_b: usize,
    fuse_w: usize,
    fuse_b: usize,
}

impl TgmModel {
    pub fn init(set: &mut ParamSet, cfg: TgmConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.tau <= 0.0 {
            return Err(VvsError::Config(format!(
                "tgm: tau must be positive, got {}",
                cfg.tau
            )));
        }
        let (c1, c2, c3) = cfg.widths;
        let cr = cfg.reduce_dim;
        let chans = [(c1, 1), (c2, c1), (c3, c2)];
        let mut conv_w = [0usize; 3];
        let mut conv_b = [0usize; 3];
        for (i, &(cout, cin)) in chans.iter().enumerate() {
            let fan = cin * 3;
            conv_w[i] =
                set.add_or_init(&format!("tgm.conv{}.w", i + 1), &[cout, cin, 3], || {
                    kaiming_uniform(cout * fan, fan, rng)
                })?;
            conv_b[i] =
                set.add_or_init(&format!("tgm.conv{}.b", i + 1), &[cout], || vec![0.0; cout])?;
        }
        let reduce_w = set.add_or_init("tgm.reduce.w", &[cr, c3, 1], || {
            kaiming_uniform(cr * c3, c3, rng)
        })?;
        let reduce_b = set.add_or_init("tgm.reduce.b", &[cr], || vec![0.0; cr])?;
        let fuse_in = if cfg.hierarchical {
            c1 + c2 + c3 + cr
        } else {
            cr
        };
        let fuse_w = set.add_or_init("tgm.fuse.w", &[1, fuse_in, 3], || {
            kaiming_uniform(fuse_in * 3, fuse_in * 3, rng)
        })?;
        let fuse_b = set.add_or_init("tgm.fuse.b", &[1], || vec![0.0; 1])?;
        Ok(Self {
            cfg,
            conv_w,
            conv_b,
            reduce_w,
            reduce_b,
            fuse_w,
            fuse_b,
        })
    }

    /// Refine the initial topic-match state `i [T']` into guidance
    /// weights `W_gu [T']` in (0,1).
    pub fn tgm_refine(&self, g: &mut Graph, bind: &[NodeId], i: NodeId) -> Result<NodeId> {
        let is = g.shape(i).to_vec();
        if is.len() != 1 || is[0] < 1 {
            return Err(VvsError::Shape {
                op: "tgm_refine",
                detail: format!("expected non-empty [T], got {:?}", is),
            });
        }
        let t = is[0];
        let x = g.reshape(i, &[1, t]);
        let mut h = x;
        let mut stages = Vec::with_capacity(4);
        for k in 0..3 {
            h = g.conv1d(h, bind[self.conv_w[k]], bind[self.conv_b[k]], Pad::Same)?;
            h = g.relu(h);
            stages.push(h);
        }
        let mut r = g.conv1d(h, bind[self.reduce_w], bind[self.reduce_b], Pad::Same)?;
        r = g.relu(r);
        stages.push(r);
        let cat = if self.cfg.hierarchical {
            g.concat0(&stages)
        } else {
            r
        };
        let fused = g.conv1d(cat, bind[self.fuse_w], bind[self.fuse_b], Pad::Same)?;
        let flat = g.reshape(fused, &[t]);
        Ok(g.tempered_sigmoid(flat, 1.0, self.cfg.tau, 0.0))
    }

    /// Full guidance path: topic direction, per-frame match, refinement.
    pub fn tgm_forward(&self, g: &mut Graph, bind: &[NodeId], x: NodeId) -> Result<NodeId> {
        let topic = rough_topic(g, x)?;
        let i = initial_state(g, x, topic)?;
        self.tgm_refine(g, bind, i)
    }
}

/// Unit-norm video-level direction `G [C]` from `x [T, S2, C]`.
pub fn rough_topic(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    g.st_gap(x)
}

/// Per-frame cosine match `I [T']` in [-1, 1] between each pooled frame
/// of `x [T, S2, C]` and the topic direction `topic [C]`.
pub fn initial_state(g: &mut Graph, x: NodeId, topic: NodeId) -> Result<NodeId> {
    let pooled = g.s_gap(x)?;
    g.cosine_rows(pooled, topic)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{grad_check, seeded_rng, GradCheckOptions};
    use crate::tensor::Tensor;

    fn pseudo(n: usize, salt: u32) -> Vec<f32> {
        (0..n)
            .map(|i| {
                let h = (i as u32).wrapping_mul(2654435761) ^ salt.wrapping_mul(0x9E3779B9);
                ((h >> 8) & 0xffff) as f32 / 65536.0 - 0.5
            })
            .collect()
    }

    fn toy_model(seed: u64, hierarchical: bool) -> (ParamSet, TgmModel) {
        let mut set = ParamSet::new();
        let mut rng = seeded_rng(seed);
        let cfg = TgmConfig {
            hierarchical,
            ..TgmConfig::toy()
        };
        let model = TgmModel::init(&mut set, cfg, &mut rng).unwrap();
        (set, model)
    }

    #[test]
    fn default_temperature_is_512() {
        assert_eq!(TgmConfig::new().tau, 512.0);
    }

    #[test]
    fn rough_topic_matches_mean_and_normalize() {
        let mut g = Graph::inference();
        let x = g.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 1, 2]);
        let topic = rough_topic(&mut g, x).unwrap();
        let r = std::f32::consts::FRAC_1_SQRT_2;
        assert!((g.value(topic)[0] - r).abs() < 1e-6);
        assert!((g.value(topic)[1] - r).abs() < 1e-6);
    }

    #[test]
    fn initial_state_known_values() {
        let mut g = Graph::inference();
        let r = std::f32::consts::FRAC_1_SQRT_2;
        let x = g.constant(vec![1.0, 0.0, 0.0, 1.0, r, r], &[3, 1, 2]);
        let topic = rough_topic(&mut g, x).unwrap();
        let i = initial_state(&mut g, x, topic).unwrap();
        let got = g.value(i);
        assert!((got[0] - r).abs() < 1e-5);
        assert!((got[1] - r).abs() < 1e-5);
        assert!((got[2] - 1.0).abs() < 1e-5);

        let same = g.constant(vec![0.3, 0.4, 0.3, 0.4], &[2, 1, 2]);
        let topic = rough_topic(&mut g, same).unwrap();
        let i = initial_state(&mut g, same, topic).unwrap();
        assert!(g.value(i).iter().all(|&v| (v - 1.0).abs() < 1e-5));

        let ortho = g.constant(vec![1.0, 0.0], &[1, 1, 2]);
        let perp = g.constant(vec![0.0, 1.0], &[2]);
        let i = initial_state(&mut g, ortho, perp).unwrap();
        assert!(g.value(i)[0].abs() < 1e-6);
    }

    #[test]
    fn zero_fuse_outputs_exactly_half() {
        let (mut set, model) = toy_model(2, true);
        for name in ["tgm.fuse.w", "tgm.fuse.b"] {
            let pi = set.find(name).unwrap();
            set.get_mut(pi).tensor.data_mut().fill(0.0);
        }
        let mut g = Graph::inference();
        let bind = set.bind(&mut g);
        let i = g.constant(pseudo(7, 3), &[7]);
        let w = model.tgm_refine(&mut g, &bind, i).unwrap();
        assert_eq!(g.shape(w), &[7]);
        assert!(g.value(w).iter().all(|&v| v == 0.5));
    }

    #[test]
    fn refine_shape_range_and_edge_lengths() {
        let (set, model) = toy_model(4, true);
        let mut g = Graph::inference();
        let bind = set.bind(&mut g);
        for t in [1usize, 2, 9] {
            let i = g.constant(pseudo(t, 5), &[t]);
            let w = model.tgm_refine(&mut g, &bind, i).unwrap();
            assert_eq!(g.shape(w), &[t]);
            assert!(g.value(w).iter().all(|&v| v > 0.0 && v < 1.0));
        }
        let bad = g.constant(vec![0.5; 4], &[2, 2]);
        assert!(model.tgm_refine(&mut g, &bind, bad).is_err());
    }

    #[test]
    fn hierarchical_flag_changes_output() {
        let (set_h, model_h) = toy_model(6, true);
        let (set_r, model_r) = toy_model(6, false);
        let i_data = pseudo(8, 9);
        let run = |set: &ParamSet, model: &TgmModel| {
            let mut g = Graph::inference();
            let bind = set.bind(&mut g);
            let i = g.constant(i_data.clone(), &[8]);
            let w = model.tgm_refine(&mut g, &bind, i).unwrap();
            g.value(w).to_vec()
        };
        let wh = run(&set_h, &model_h);
        let wr = run(&set_r, &model_r);
        assert!(
            wh.iter().zip(&wr).any(|(a, b)| (a - b).abs() > 1e-6),
            "ablation produced identical weights"
        );
    }

    #[test]
    fn gradients_reach_all_five_conv_sets() {
        let (mut set, model) = toy_model(8, true);
        for pi in 0..set.len() {
            let p = set.get_mut(pi);
            let n = p.tensor.numel();
            for (v, d) in p
                .tensor
                .data_mut()
                .iter_mut()
                .zip(pseudo(n, 700 + pi as u32))
            {
                *v += 0.05 * d;
            }
        }
        let x = Tensor::new(&[6, 2, 4], pseudo(48, 13)).unwrap();
        let run = |set: &ParamSet| -> Result<(Graph, NodeId)> {
            let mut g = Graph::new();
            let bind = set.bind(&mut g);
            let xn = g.constant_tensor(&x);
            let w = model.tgm_forward(&mut g, &bind, xn)?;
            let target = g.constant(vec![1.0, 0.0, 1.0, 1.0, 0.0, 1.0], &[6]);
            let loss = g.bce(w, target);
            Ok((g, loss))
        };

        set.zero_grads();
        let (mut g, loss) = run(&set).unwrap();
        g.backward(loss).unwrap();
        set.accumulate_from(&g);
        for name in [
            "tgm.conv1.w",
            "tgm.conv2.w",
            "tgm.conv3.w",
            "tgm.reduce.w",
            "tgm.fuse.w",
        ] {
            let pi = set.find(name).unwrap();
            assert!(
                set.get(pi).grad.iter().any(|&v| v != 0.0),
                "{name} received no gradient"
            );
        }

        let report = grad_check(
            &mut set,
            |s| run(s).map(|(g, l)| g.scalar_value(l) as f64),
            &GradCheckOptions {
                max_per_param: 6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-2, "{report:?}");
    }
}
