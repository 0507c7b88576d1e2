//! Trainable-parameter plumbing: the named parameter store shared by all
//! model heads, Kaiming-style initialization, the Adam optimizer, and a
//! central-finite-difference gradient checker.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, VvsError};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// One named trainable tensor plus its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub grad: Vec<f32>,
}

/// Ordered collection of parameters addressed by name or index. Model
/// structs hold indices into one shared set so a single optimizer and a
/// single checkpoint cover every module.
#[derive(Debug, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter {
        &mut self.params[i]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    /// Insert a parameter; the name must be unique.
    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(VvsError::Config(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        tensor.requires_grad = true;
        let grad = vec![0.0; tensor.numel()];
        let idx = self.params.len();
        self.index.insert(name.clone(), idx);
        self.params.push(Parameter { name, tensor, grad });
        Ok(idx)
    }

    /// Existing parameter of this name (shape-checked), or a fresh one
    /// built by `init`. Model constructors use this so they bind to
    /// checkpoint-loaded weights instead of re-initializing them.
    pub fn add_or_init(
        &mut self,
        name: &str,
        shape: &[usize],
        init: impl FnOnce() -> Vec<f32>,
    ) -> Result<usize> {
        if let Some(&idx) = self.index.get(name) {
            if self.params[idx].tensor.shape() != shape {
                return Err(VvsError::Config(format!(
                    "parameter {name:?} exists with shape {:?}, expected {:?}",
                    self.params[idx].tensor.shape(),
                    shape
                )));
            }
            return Ok(idx);
        }
        self.add(name, Tensor::new(shape, init())?)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Register every parameter as a leaf in `g`; returns node ids aligned
    /// with parameter indices.
    pub fn bind(&self, g: &mut Graph) -> Vec<crate::graph::NodeId> {
        self.params
            .iter()
            .enumerate()
            .map(|(i, p)| g.param_leaf(p.tensor.data(), p.tensor.shape(), i))
            .collect()
    }

    /// Sum the graph's parameter-leaf gradients into `self.grad`.
    pub fn accumulate_from(&mut self, g: &Graph) {
        for (idx, grad) in g.param_grads() {
            let dst = &mut self.params[idx].grad;
            for (d, &s) in dst.iter_mut().zip(grad) {
                *d += s;
            }
        }
    }
}

/// Uniform Kaiming-style init: bound `sqrt(6 / fan_in)`.
pub fn kaiming_uniform(numel: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let bound = (6.0 / fan_in.max(1) as f32).sqrt();
    (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// Deterministic RNG for weight init and data sampling.
pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Adam with bias correction; one moment pair per parameter tensor.
#[derive(Debug)]
pub struct AdamState {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f32) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update from the accumulated gradients, then clear them.
    /// A non-finite gradient aborts with the offending parameter's name.
    pub fn step(&mut self, set: &mut ParamSet) -> Result<()> {
        while self.m.len() < set.len() {
            let n = set.get(self.m.len()).tensor.numel();
            self.m.push(vec![0.0; n]);
            self.v.push(vec![0.0; n]);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..set.len() {
            let p = set.get_mut(i);
            if let Some(bad) = p.grad.iter().find(|g| !g.is_finite()) {
                return Err(VvsError::Diverged {
                    iteration: self.step,
                    detail: format!("non-finite gradient ({bad}) in parameter {:?}", p.name),
                });
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let data = p.tensor.data_mut();
            for k in 0..data.len() {
                let g = p.grad[k];
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                data[k] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }
}

/// Options for [`grad_check`]. `max_per_param == 0` checks every element;
/// otherwise a deterministic subsample per tensor.
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub h: f32,
    pub max_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            h: 1e-3,
            max_per_param: 0,
            seed: 0,
        }
    }
}

#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

/// Compare the analytic gradients already accumulated in `set` against
/// central finite differences of `loss_fn`. Relative error is
/// `|a - n| / max(1, |a|, |n|)`, reported as the max over checked elements.
/// `loss_fn` must be deterministic; parameters are restored after probing.
pub fn grad_check(
    set: &mut ParamSet,
    mut loss_fn: impl FnMut(&ParamSet) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = seeded_rng(opts.seed);
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        checked: 0,
    };
    for pi in 0..set.len() {
        let n = set.get(pi).tensor.numel();
        let picks: Vec<usize> = if opts.max_per_param == 0 || n <= opts.max_per_param {
            (0..n).collect()
        } else {
            (0..opts.max_per_param)
                .map(|_| rng.gen_range(0..n))
                .collect()
        };
        for k in picks {
            let orig = set.get(pi).tensor.data()[k];
            let hi = orig + opts.h;
            let lo = orig - opts.h;
            set.get_mut(pi).tensor.data_mut()[k] = hi;
            let f_hi = loss_fn(set)?;
            set.get_mut(pi).tensor.data_mut()[k] = lo;
            let f_lo = loss_fn(set)?;
            set.get_mut(pi).tensor.data_mut()[k] = orig;
            // use the realized f32 step, not the nominal one
            let denom = (hi as f64) - (lo as f64);
            let numeric = (f_hi - f_lo) / denom;
            let analytic = set.get(pi).grad[k] as f64;
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{}[{}]", set.get(pi).name, k);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_weight_by_lr() {
        let mut set = ParamSet::new();
        let i = set.add("w", Tensor::new(&[1], vec![0.0]).unwrap()).unwrap();
        set.get_mut(i).grad[0] = 1.0;
        let mut adam = AdamState::new(0.01);
        adam.step(&mut set).unwrap();
        // m_hat = v_hat = 1, so the update is lr / (1 + eps)
        assert!((set.get(i).tensor.data()[0] + 0.01).abs() < 1e-7);
        assert_eq!(set.get(i).grad[0], 0.0);
    }

    #[test]
    fn adam_rejects_nan_gradient_with_name() {
        let mut set = ParamSet::new();
        let i = set
            .add("ddm.fc1.w", Tensor::new(&[2], vec![0.0; 2]).unwrap())
            .unwrap();
        set.get_mut(i).grad[1] = f32::NAN;
        let mut adam = AdamState::new(0.01);
        let err = adam.step(&mut set).unwrap_err();
        assert!(err.to_string().contains("ddm.fc1.w"), "{err}");
    }

    #[test]
    fn kaiming_bound_scales_with_fan_in() {
        let mut rng = seeded_rng(7);
        let w = kaiming_uniform(10_000, 24, &mut rng);
        let bound = (6.0f32 / 24.0).sqrt();
        assert!(w.iter().all(|v| v.abs() < bound));
        let max = w.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
        assert!(
            max > bound * 0.98,
            "samples should fill the range, max {max}"
        );
    }

    #[test]
    fn duplicate_parameter_names_rejected() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::zeros(&[1])).unwrap();
        assert!(set.add("w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn add_or_init_reuses_loaded_weights() {
        let mut set = ParamSet::new();
        set.add("w", Tensor::new(&[2], vec![5.0, 6.0]).unwrap())
            .unwrap();
        let idx = set.add_or_init("w", &[2], || vec![0.0; 2]).unwrap();
        assert_eq!(set.get(idx).tensor.data(), &[5.0, 6.0]);
        assert!(set.add_or_init("w", &[3], || vec![0.0; 3]).is_err());
    }

    #[test]
    fn grad_check_accepts_correct_and_flags_wrong_gradients() {
        // loss = sigmoid(w·x) summed; gradient via the graph
        let x = [0.4f32, -0.7, 0.9];
        let mut set = ParamSet::new();
        set.add("w", Tensor::new(&[3], vec![0.3, 0.1, -0.2]).unwrap())
            .unwrap();

        let loss = |set: &ParamSet| -> Result<f64> {
            let mut g = Graph::new();
            let ids = set.bind(&mut g);
            let xs = g.constant(x.to_vec(), &[3]);
            let p = g.mul(ids[0], xs);
            let s = g.sum_all(p);
            let o = g.sigmoid(s);
            let l = g.sum_all(o);
            Ok(g.scalar_value(l) as f64)
        };

        let mut g = Graph::new();
        let ids = set.bind(&mut g);
        let xs = g.constant(x.to_vec(), &[3]);
        let p = g.mul(ids[0], xs);
        let s = g.sum_all(p);
        let o = g.sigmoid(s);
        let l = g.sum_all(o);
        g.backward(l).unwrap();
        set.accumulate_from(&g);

        let report = grad_check(&mut set, loss, &GradCheckOptions::default()).unwrap();
        assert_eq!(report.checked, 3);
        assert!(report.max_rel_err < 1e-3, "rel err {}", report.max_rel_err);

        // corrupt one gradient entry; the check must notice
        set.get_mut(0).grad[1] += 0.5;
        let report = grad_check(&mut set, loss, &GradCheckOptions::default()).unwrap();
        assert!(report.max_rel_err > 0.1);
        assert_eq!(report.worst_param, "w[1]");
    }
}
