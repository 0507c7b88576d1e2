//! Reverse-mode automatic differentiation over flat f32 buffers.
//!
//! A [`Graph`] is a single-use tape: ops evaluate eagerly as they are
//! recorded, each pushing a backward closure that knows how to route the
//! output gradient to its inputs. [`Graph::backward`] replays the closures
//! in reverse. Buffers are plain `Vec<f32>` with row-major shapes; there is
//! no broadcasting beyond what individual ops implement.
//!
//! Layer ops (linear, conv, attention) live in [`crate::layers`] and
//! video-specific fused ops in [`crate::video_graph`]; both extend this
//! type with further `impl Graph` blocks.

use crate::error::{Result, VvsError};
use crate::tensor::Tensor;

pub type NodeId = usize;

pub(crate) struct Buf {
    pub data: Vec<f32>,
    pub shape: Vec<usize>,
}

/// Per-node gradient buffers, allocated lazily during the backward pass.
pub struct GradStore {
    g: Vec<Option<Vec<f32>>>,
}

impl GradStore {
    fn new(n: usize) -> Self {
        GradStore {
            g: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.g.get(id).and_then(|o| o.as_deref())
    }

    /// Gradient buffer for `id`, zero-filled on first touch.
    pub fn accum(&mut self, id: NodeId, len: usize) -> &mut [f32] {
        let slot = &mut self.g[id];
        if slot.is_none() {
            *slot = Some(vec![0.0; len]);
        }
        slot.as_mut().unwrap()
    }

    /// Run `f` with the finished gradient of `out`, if any. The buffer is
    /// temporarily moved out so `f` can mutate other entries freely.
    fn propagate(&mut self, out: NodeId, f: impl FnOnce(&[f32], &mut GradStore)) {
        if let Some(go) = self.g[out].take() {
            f(&go, self);
            self.g[out] = Some(go);
        }
    }
}

/// Backward closure: (forward buffers, this op's output node, gradient of
/// the output, gradient store to accumulate input gradients into).
type BackFn = Box<dyn Fn(&[Buf], NodeId, &[f32], &mut GradStore)>;

pub struct Graph {
    pub(crate) bufs: Vec<Buf>,
    needs: Vec<bool>,
    steps: Vec<(NodeId, BackFn)>,
    grads: Option<GradStore>,
    /// (caller-side parameter index, leaf node) pairs, in registration order.
    params: Vec<(usize, NodeId)>,
    track: bool,
}

impl Graph {
    /// Graph that records backward closures (training).
    pub fn new() -> Self {
        Graph {
            bufs: Vec::new(),
            needs: Vec::new(),
            steps: Vec::new(),
            grads: None,
            params: Vec::new(),
            track: true,
        }
    }

    /// Graph that evaluates forward only (embedding / evaluation).
    pub fn inference() -> Self {
        let mut g = Graph::new();
        g.track = false;
        g
    }

    pub fn is_tracking(&self) -> bool {
        self.track
    }

    // ── node plumbing ──────────────────────────────────────────────────

    fn push(&mut self, data: Vec<f32>, shape: Vec<usize>, needs: bool) -> NodeId {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced at node {} (shape {:?})",
            self.bufs.len(),
            shape
        );
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.bufs.push(Buf { data, shape });
        self.needs.push(needs);
        self.bufs.len() - 1
    }

    /// Record an op result plus its backward closure.
    pub(crate) fn push_op(
        &mut self,
        data: Vec<f32>,
        shape: Vec<usize>,
        inputs: &[NodeId],
        back: impl Fn(&[Buf], NodeId, &[f32], &mut GradStore) + 'static,
    ) -> NodeId {
        let needs = self.track && inputs.iter().any(|&i| self.needs[i]);
        let id = self.push(data, shape, needs);
        if needs {
            self.steps.push((id, Box::new(back)));
        }
        id
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> NodeId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "constant: data/shape mismatch"
        );
        self.push(data, shape.to_vec(), false)
    }

    pub fn constant_tensor(&mut self, t: &Tensor) -> NodeId {
        self.push(t.data().to_vec(), t.shape().to_vec(), false)
    }

    /// Differentiable leaf (gradient retrievable after backward).
    pub fn leaf(&mut self, data: Vec<f32>, shape: &[usize]) -> NodeId {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "leaf: data/shape mismatch"
        );
        let track = self.track;
        self.push(data, shape.to_vec(), track)
    }

    /// Leaf tied to an external parameter slot; see [`Graph::param_grads`].
    pub fn param_leaf(&mut self, data: &[f32], shape: &[usize], param_index: usize) -> NodeId {
        let id = self.leaf(data.to_vec(), shape);
        if self.track {
            self.params.push((param_index, id));
        }
        id
    }

    pub fn value(&self, id: NodeId) -> &[f32] {
        &self.bufs[id].data
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.bufs[id].shape
    }

    pub fn scalar_value(&self, id: NodeId) -> f32 {
        debug_assert_eq!(self.bufs[id].data.len(), 1);
        self.bufs[id].data[0]
    }

    pub fn numel(&self, id: NodeId) -> usize {
        self.bufs[id].data.len()
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients are then available via
    /// [`Graph::grad`] / [`Graph::param_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.bufs[loss].data.len() != 1 {
            return Err(VvsError::Shape {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.bufs[loss].shape),
            });
        }
        if !self.track {
            return Err(VvsError::Config("backward on an inference graph".into()));
        }
        let mut grads = GradStore::new(self.bufs.len());
        grads.accum(loss, 1)[0] = 1.0;
        for (out, back) in self.steps.iter().rev() {
            grads.propagate(*out, |go, gs| back(&self.bufs, *out, go, gs));
        }
        self.grads = Some(grads);
        Ok(())
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f32]> {
        self.grads.as_ref().and_then(|g| g.get(id))
    }

    /// Accumulated gradients of registered parameter leaves, in
    /// registration order. A parameter registered more than once appears
    /// once per registration; callers sum contributions.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f32])> {
        let grads = self.grads.as_ref();
        self.params
            .iter()
            .filter_map(move |&(pi, node)| grads.and_then(|g| g.get(node)).map(|gr| (pi, gr)))
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the
/// cross-entropy so exact 0/1 inputs stay finite.
pub const BCE_EPS: f32 = 1e-7;

// ── elementwise and reduction ops ──────────────────────────────────────
//
// Shape requirements here are internal invariants of the calling code, so
// violations panic; the public layer and pipeline ops validate user-facing
// shapes and return errors instead.

impl Graph {
    fn assert_same_shape(&self, op: &str, a: NodeId, b: NodeId) {
        assert_eq!(
            self.bufs[a].shape, self.bufs[b].shape,
            "{op}: operand shapes differ: {:?} vs {:?}",
            self.bufs[a].shape, self.bufs[b].shape
        );
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape("add", a, b);
        let data: Vec<f32> = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        self.push_op(data, shape, &[a, b], move |_, _, go, gs| {
            for (g, &v) in gs.accum(a, go.len()).iter_mut().zip(go) {
                *g += v;
            }
            for (g, &v) in gs.accum(b, go.len()).iter_mut().zip(go) {
                *g += v;
            }
        })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape("sub", a, b);
        let data: Vec<f32> = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        self.push_op(data, shape, &[a, b], move |_, _, go, gs| {
            for (g, &v) in gs.accum(a, go.len()).iter_mut().zip(go) {
                *g += v;
            }
            for (g, &v) in gs.accum(b, go.len()).iter_mut().zip(go) {
                *g -= v;
            }
        })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape("mul", a, b);
        let data: Vec<f32> = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.bufs[a].shape.clone();
        self.push_op(data, shape, &[a, b], move |bufs, _, go, gs| {
            {
                let bd = &bufs[b].data;
                let ga = gs.accum(a, go.len());
                for i in 0..go.len() {
                    ga[i] += go[i] * bd[i];
                }
            }
            let ad = &bufs[a].data;
            let gb = gs.accum(b, go.len());
            for i in 0..go.len() {
                gb[i] += go[i] * ad[i];
            }
        })
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let data: Vec<f32> = self.bufs[a].data.iter().map(|x| x * c).collect();
        let shape = self.bufs[a].shape.clone();
        self.push_op(data, shape, &[a], move |_, _, go, gs| {
            for (g, &v) in gs.accum(a, go.len()).iter_mut().zip(go) {
                *g += c * v;
            }
        })
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f32) -> NodeId {
        let data: Vec<f32> = self.bufs[a].data.iter().map(|x| x + c).collect();
        let shape = self.bufs[a].shape.clone();
        self.push_op(data, shape, &[a], move |_, _, go, gs| {
            for (g, &v) in gs.accum(a, go.len()).iter_mut().zip(go) {
                *g += v;
            }
        })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f32> = self.bufs[a].data.iter().map(|&x| x.max(0.0)).collect();
        let shape = self.bufs[a].shape.clone();
        self.push_op(data, shape, &[a], move |bufs, _, go, gs| {
            let ga = gs.accum(a, go.len());
            for i in 0..go.len() {
                if bufs[a].data[i] > 0.0 {
                    ga[i] += go[i];
                }
            }
        })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f32> = self.bufs[a].data.iter().map(|&x| logistic(x)).collect();
        let shape = self.bufs[a].shape.clone();
        self.push_op(data, shape, &[a], move |bufs, out, go, gs| {
            let ga = gs.accum(a, go.len());
            for i in 0..go.len() {
                let s = bufs[out].data[i];
                ga[i] += go[i] * s * (1.0 - s);
            }
        })
    }

    /// Gate `sigma * logistic(h / tau) - offset`; with a large `tau` this is
    /// a near-linear soft gate centered at 0.5.
    pub fn tempered_sigmoid(&mut self, a: NodeId, sigma: f32, tau: f32, offset: f32) -> NodeId {
        assert!(
            tau > 0.0,
            "tempered_sigmoid: tau must be positive, got {tau}"
        );
        let s: Vec<f32> = self.bufs[a]
            .data
            .iter()
            .map(|&x| logistic(x / tau))
            .collect();
        let data: Vec<f32> = s.iter().map(|&v| sigma * v - offset).collect();
        let shape = self.bufs[a].shape.clone();
        self.push_op(data, shape, &[a], move |_, _, go, gs| {
            let ga = gs.accum(a, go.len());
            for i in 0..go.len() {
                ga[i] += go[i] * sigma * s[i] * (1.0 - s[i]) / tau;
            }
        })
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total = self.bufs[a].data.iter().map(|&x| x as f64).sum::<f64>() as f32;
        let n = self.bufs[a].data.len();
        self.push_op(vec![total], vec![], &[a], move |_, _, go, gs| {
            let ga = gs.accum(a, n);
            for g in ga.iter_mut() {
                *g += go[0];
            }
        })
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.bufs[a].data.len();
        assert!(n > 0, "mean_all: empty input");
        let total = self.bufs[a].data.iter().map(|&x| x as f64).sum::<f64>();
        let mean = (total / n as f64) as f32;
        self.push_op(vec![mean], vec![], &[a], move |_, _, go, gs| {
            let ga = gs.accum(a, n);
            let w = go[0] / n as f32;
            for g in ga.iter_mut() {
                *g += w;
            }
        })
    }

    /// Inner product of two equal-length vectors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.assert_same_shape("dot", a, b);
        let v = self.bufs[a]
            .data
            .iter()
            .zip(&self.bufs[b].data)
            .map(|(&x, &y)| x as f64 * y as f64)
            .sum::<f64>() as f32;
        let n = self.bufs[a].data.len();
        self.push_op(vec![v], vec![], &[a, b], move |bufs, _, go, gs| {
            {
                let bd = &bufs[b].data;
                let ga = gs.accum(a, n);
                for i in 0..n {
                    ga[i] += go[0] * bd[i];
                }
            }
            let ad = &bufs[a].data;
            let gb = gs.accum(b, n);
            for i in 0..n {
                gb[i] += go[0] * ad[i];
            }
        })
    }

    /// Mean binary cross-entropy of predictions `p` against constant
    /// targets `y`, both flat and equal-length.
    pub fn bce(&mut self, p: NodeId, y: NodeId) -> NodeId {
        self.assert_same_shape("bce", p, y);
        let n = self.bufs[p].data.len();
        assert!(n > 0, "bce: empty input");
        let mut total = 0.0f64;
        for (&pv, &yv) in self.bufs[p].data.iter().zip(&self.bufs[y].data) {
            let ph = pv.clamp(BCE_EPS, 1.0 - BCE_EPS) as f64;
            let yv = yv as f64;
            total -= yv * ph.ln() + (1.0 - yv) * (1.0 - ph).ln();
        }
        let loss = (total / n as f64) as f32;
        self.push_op(vec![loss], vec![], &[p], move |bufs, _, go, gs| {
            let gp = gs.accum(p, n);
            let pd = &bufs[p].data;
            let yd = &bufs[y].data;
            for ((g, &pv), &yv) in gp.iter_mut().zip(pd).zip(yd) {
                if pv <= BCE_EPS || pv >= 1.0 - BCE_EPS {
                    continue;
                }
                *g += go[0] * (pv - yv) / (pv * (1.0 - pv)) / n as f32;
            }
        })
    }

    /// Same data under a new shape; gradient passes through unchanged.
    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            self.bufs[a].data.len(),
            "reshape: {:?} incompatible with {:?}",
            self.bufs[a].shape,
            shape
        );
        let data = self.bufs[a].data.clone();
        self.push_op(data, shape.to_vec(), &[a], move |_, _, go, gs| {
            let g = gs.accum(a, go.len());
            for (gi, &v) in g.iter_mut().zip(go) {
                *gi += v;
            }
        })
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat0(&mut self, ids: &[NodeId]) -> NodeId {
        assert!(!ids.is_empty(), "concat0: no inputs");
        let rest = self.bufs[ids[0]].shape[1..].to_vec();
        let mut rows = 0usize;
        let mut data = Vec::new();
        for &id in ids {
            assert_eq!(
                &self.bufs[id].shape[1..],
                rest.as_slice(),
                "concat0: trailing dims differ"
            );
            rows += self.bufs[id].shape[0];
            data.extend_from_slice(&self.bufs[id].data);
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&rest);
        let ids_owned: Vec<NodeId> = ids.to_vec();
        let sizes: Vec<usize> = ids.iter().map(|&id| self.bufs[id].data.len()).collect();
        self.push_op(data, shape, ids, move |_, _, go, gs| {
            let mut off = 0;
            for (&id, &len) in ids_owned.iter().zip(&sizes) {
                let g = gs.accum(id, len);
                for i in 0..len {
                    g[i] += go[off + i];
                }
                off += len;
            }
        })
    }
}

#[inline]
pub(crate) fn logistic(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
