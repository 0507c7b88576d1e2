//! Differentiable neural layers on [`Graph`]: linear, 1-d/2-d convolution,
//! layer norm, and a pre-norm transformer encoder layer.
//!
//! Weight layouts:
//! - linear: `w [Din, Dout]`, `b [Dout]`, input `[N, Din]` or `[Din]`
//! - conv1d: `w [Cout, Cin, k]`, input `[Cin, L]`
//! - conv2d: `w [Cout, Cin, kh, kw]`, input `[Cin, H, W]`
//!
//! Convolutions are cross-correlations (no kernel flip), matching the usual
//! deep-learning convention.

use crate::error::{Result, VvsError};
use crate::gemm::{mm_nn, mm_nt, mm_tn};
use crate::graph::{Graph, NodeId};

/// Spatial padding mode for convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pad {
    /// Output length equals input length; kernel must be odd.
    Same,
    /// No padding; output shrinks by `k - 1`.
    Valid,
}

impl Pad {
    fn out_len(self, op: &'static str, input: usize, k: usize) -> Result<(usize, usize)> {
        match self {
            Pad::Same => {
                if k.is_multiple_of(2) {
                    return Err(VvsError::Shape {
                        op,
                        detail: format!("same padding requires odd kernel, got {k}"),
                    });
                }
                Ok((input, (k - 1) / 2))
            }
            Pad::Valid => {
                if input < k {
                    return Err(VvsError::Shape {
                        op,
                        detail: format!("input length {input} shorter than kernel {k}"),
                    });
                }
                Ok((input - k + 1, 0))
            }
        }
    }
}

impl Graph {
    /// `x [N, Din] (or [Din]) -> x·w + b [N, Dout]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let (n, din, vec_in) = match xs.as_slice() {
            [din] => (1usize, *din, true),
            [n, din] => (*n, *din, false),
            _ => {
                return Err(VvsError::Shape {
                    op: "linear",
                    detail: format!("input must be 1-d or 2-d, got {:?}", xs),
                })
            }
        };
        if ws.len() != 2 || ws[0] != din || bs != [ws[1]] {
            return Err(VvsError::Shape {
                op: "linear",
                detail: format!("x {:?} incompatible with w {:?}, b {:?}", xs, ws, bs),
            });
        }
        let dout = ws[1];
        let mut out = vec![0.0f32; n * dout];
        for row in out.chunks_exact_mut(dout) {
            row.copy_from_slice(self.value(b));
        }
        mm_nn(&mut out, self.value(x), self.value(w), n, din, dout);
        let out_shape = if vec_in { vec![dout] } else { vec![n, dout] };
        Ok(
            self.push_op(out, out_shape, &[x, w, b], move |bufs, _, go, gs| {
                {
                    let wd = &bufs[w].data;
                    let gx = gs.accum(x, n * din);
                    mm_nt(gx, go, wd, n, dout, din);
                }
                {
                    let xd = &bufs[x].data;
                    let gw = gs.accum(w, din * dout);
                    mm_tn(gw, xd, go, n, din, dout);
                }
                let gb = gs.accum(b, dout);
                for row in go.chunks_exact(dout) {
                    for (g, &v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }),
        )
    }

    /// `x [Cin, L] -> [Cout, Lout]`.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: Pad) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 3 || ws[1] != xs[0] || self.shape(b) != [ws[0]] {
            return Err(VvsError::Shape {
                op: "conv1d",
                detail: format!("x {:?}, w {:?}, b {:?}", xs, ws, self.shape(b)),
            });
        }
        let (cin, l) = (xs[0], xs[1]);
        let (cout, k) = (ws[0], ws[2]);
        let (lout, p) = pad.out_len("conv1d", l, k)?;
        let xd = self.value(x);
        let wd = self.value(w);
        let bd = self.value(b);
        let mut out = vec![0.0f32; cout * lout];
        for co in 0..cout {
            for t in 0..lout {
                let mut acc = bd[co];
                for ci in 0..cin {
                    for dk in 0..k {
                        let src = t + dk;
                        if src < p || src - p >= l {
                            continue;
                        }
                        acc += wd[(co * cin + ci) * k + dk] * xd[ci * l + (src - p)];
                    }
                }
                out[co * lout + t] = acc;
            }
        }
        Ok(
            self.push_op(out, vec![cout, lout], &[x, w, b], move |bufs, _, go, gs| {
                {
                    let wd = &bufs[w].data;
                    let gx = gs.accum(x, cin * l);
                    for co in 0..cout {
                        for t in 0..lout {
                            let g = go[co * lout + t];
                            if g == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                for dk in 0..k {
                                    let src = t + dk;
                                    if src < p || src - p >= l {
                                        continue;
                                    }
                                    gx[ci * l + (src - p)] += g * wd[(co * cin + ci) * k + dk];
                                }
                            }
                        }
                    }
                }
                {
                    let xd = &bufs[x].data;
                    let gw = gs.accum(w, cout * cin * k);
                    for co in 0..cout {
                        for t in 0..lout {
                            let g = go[co * lout + t];
                            if g == 0.0 {
                                continue;
                            }
                            for ci in 0..cin {
                                for dk in 0..k {
                                    let src = t + dk;
                                    if src < p || src - p >= l {
                                        continue;
                                    }
                                    gw[(co * cin + ci) * k + dk] += g * xd[ci * l + (src - p)];
                                }
                            }
                        }
                    }
                }
                let gb = gs.accum(b, cout);
                for co in 0..cout {
                    for t in 0..lout {
                        gb[co] += go[co * lout + t];
                    }
                }
            }),
        )
    }

    /// `x [Cin, H, W] -> [Cout, Ho, Wo]` via im2col + GEMM.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, pad: Pad) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 || ws[1] != xs[0] || self.shape(b) != [ws[0]] {
            return Err(VvsError::Shape {
                op: "conv2d",
                detail: format!("x {:?}, w {:?}, b {:?}", xs, ws, self.shape(b)),
            });
        }
        let (cin, h, wdt) = (xs[0], xs[1], xs[2]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let (ho, ph) = pad.out_len("conv2d", h, kh)?;
        let (wo, pw) = pad.out_len("conv2d", wdt, kw)?;
        let kk = cin * kh * kw;
        let ncol = ho * wo;

        // gather: cols[(ci*kh+di)*kw+dj, y*wo+xo] = x[ci, y+di-ph, xo+dj-pw]
        let xd = self.value(x);
        let mut cols = vec![0.0f32; kk * ncol];
        for ci in 0..cin {
            for di in 0..kh {
                for dj in 0..kw {
                    let krow = (ci * kh + di) * kw + dj;
                    let dst = &mut cols[krow * ncol..(krow + 1) * ncol];
                    for y in 0..ho {
                        let sy = y + di;
                        if sy < ph || sy - ph >= h {
                            continue;
                        }
                        let src_row = ci * h * wdt + (sy - ph) * wdt;
                        for xo in 0..wo {
                            let sx = xo + dj;
                            if sx < pw || sx - pw >= wdt {
                                continue;
                            }
                            dst[y * wo + xo] = xd[src_row + (sx - pw)];
                        }
                    }
                }
            }
        }

        let mut out = vec![0.0f32; cout * ncol];
        for (co, chunk) in out.chunks_exact_mut(ncol).enumerate() {
            chunk.fill(self.value(b)[co]);
        }
        mm_nn(&mut out, self.value(w), &cols, cout, kk, ncol);

        Ok(self.push_op(
            out,
            vec![cout, ho, wo],
            &[x, w, b],
            move |bufs, _, go, gs| {
                {
                    let gw = gs.accum(w, cout * kk);
                    mm_nt(gw, go, &cols, cout, ncol, kk);
                }
                {
                    let gb = gs.accum(b, cout);
                    for co in 0..cout {
                        for v in &go[co * ncol..(co + 1) * ncol] {
                            gb[co] += v;
                        }
                    }
                }
                let mut gcols = vec![0.0f32; kk * ncol];
                mm_tn(&mut gcols, &bufs[w].data, go, cout, kk, ncol);
                let gx = gs.accum(x, cin * h * wdt);
                for ci in 0..cin {
                    for di in 0..kh {
                        for dj in 0..kw {
                            let krow = (ci * kh + di) * kw + dj;
                            let src = &gcols[krow * ncol..(krow + 1) * ncol];
                            for y in 0..ho {
                                let sy = y + di;
                                if sy < ph || sy - ph >= h {
                                    continue;
                                }
                                let dst_row = ci * h * wdt + (sy - ph) * wdt;
                                for xo in 0..wo {
                                    let sx = xo + dj;
                                    if sx < pw || sx - pw >= wdt {
                                        continue;
                                    }
                                    gx[dst_row + (sx - pw)] += src[y * wo + xo];
                                }
                            }
                        }
                    }
                }
            },
        ))
    }

    /// Per-row layer normalization over the last axis of `x [L, d]`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || self.shape(gamma) != [xs[1]] || self.shape(beta) != [xs[1]] {
            return Err(VvsError::Shape {
                op: "layer_norm",
                detail: format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    xs,
                    self.shape(gamma),
                    self.shape(beta)
                ),
            });
        }
        let (l, d) = (xs[0], xs[1]);
        let xd = self.value(x);
        let mut xhat = vec![0.0f32; l * d];
        let mut inv_std = vec![0.0f32; l];
        for r in 0..l {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            inv_std[r] = inv as f32;
            for c in 0..d {
                xhat[r * d + c] = ((row[c] as f64 - mean) * inv) as f32;
            }
        }
        let gd = self.value(gamma);
        let bd = self.value(beta);
        let mut out = vec![0.0f32; l * d];
        for r in 0..l {
            for c in 0..d {
                out[r * d + c] = xhat[r * d + c] * gd[c] + bd[c];
            }
        }
        Ok(self.push_op(
            out,
            vec![l, d],
            &[x, gamma, beta],
            move |bufs, _, go, gs| {
                {
                    let gg = gs.accum(gamma, d);
                    for r in 0..l {
                        for c in 0..d {
                            gg[c] += go[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                {
                    let gb = gs.accum(beta, d);
                    for r in 0..l {
                        for c in 0..d {
                            gb[c] += go[r * d + c];
                        }
                    }
                }
                let gd = &bufs[gamma].data;
                let gx = gs.accum(x, l * d);
                for r in 0..l {
                    let mut mean_gy = 0.0f64;
                    let mut mean_gy_xhat = 0.0f64;
                    for c in 0..d {
                        let gy = (go[r * d + c] * gd[c]) as f64;
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat[r * d + c] as f64;
                    }
                    mean_gy /= d as f64;
                    mean_gy_xhat /= d as f64;
                    for c in 0..d {
                        let gy = (go[r * d + c] * gd[c]) as f64;
                        let xh = xhat[r * d + c] as f64;
                        gx[r * d + c] +=
                            (inv_std[r] as f64 * (gy - mean_gy - xh * mean_gy_xhat)) as f32;
                    }
                }
            },
        ))
    }

    /// Scaled dot-product self-attention over `heads` column groups of
    /// `q, k, v [L, d]`. Returns `[L, d]` (pre output-projection).
    pub fn attention_core(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    ) -> Result<NodeId> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 2 || self.shape(k) != qs.as_slice() || self.shape(v) != qs.as_slice() {
            return Err(VvsError::Shape {
                op: "attention",
                detail: format!(
                    "q {:?}, k {:?}, v {:?} must agree",
                    qs,
                    self.shape(k),
                    self.shape(v)
                ),
            });
        }
        let (l, d) = (qs[0], qs[1]);
        if heads == 0 || d % heads != 0 {
            return Err(VvsError::Shape {
                op: "attention",
                detail: format!("model dim {d} not divisible by heads {heads}"),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let gather = |src: &[f32], hh: usize| -> Vec<f32> {
            let mut out = vec![0.0f32; l * dh];
            for r in 0..l {
                out[r * dh..(r + 1) * dh]
                    .copy_from_slice(&src[r * d + hh * dh..r * d + (hh + 1) * dh]);
            }
            out
        };

        let mut out = vec![0.0f32; l * d];
        let mut probs = vec![0.0f32; heads * l * l];
        for hh in 0..heads {
            let qh = gather(self.value(q), hh);
            let kh = gather(self.value(k), hh);
            let vh = gather(self.value(v), hh);
            let mut s = vec![0.0f32; l * l];
            mm_nt(&mut s, &qh, &kh, l, dh, l);
            for row in s.chunks_exact_mut(l) {
                let mx = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v * scale));
                let mut z = 0.0f64;
                for v in row.iter_mut() {
                    *v = (*v * scale - mx).exp();
                    z += *v as f64;
                }
                for v in row.iter_mut() {
                    *v = (*v as f64 / z) as f32;
                }
            }
            let mut oh = vec![0.0f32; l * dh];
            mm_nn(&mut oh, &s, &vh, l, l, dh);
            for r in 0..l {
                out[r * d + hh * dh..r * d + (hh + 1) * dh]
                    .copy_from_slice(&oh[r * dh..(r + 1) * dh]);
            }
            probs[hh * l * l..(hh + 1) * l * l].copy_from_slice(&s);
        }

        Ok(
            self.push_op(out, vec![l, d], &[q, k, v], move |bufs, _, go, gs| {
                let gather_b = |src: &[f32], hh: usize| -> Vec<f32> {
                    let mut out = vec![0.0f32; l * dh];
                    for r in 0..l {
                        out[r * dh..(r + 1) * dh]
                            .copy_from_slice(&src[r * d + hh * dh..r * d + (hh + 1) * dh]);
                    }
                    out
                };
                for hh in 0..heads {
                    let p = &probs[hh * l * l..(hh + 1) * l * l];
                    let qh = gather_b(&bufs[q].data, hh);
                    let kh = gather_b(&bufs[k].data, hh);
                    let vh = gather_b(&bufs[v].data, hh);
                    let goh = gather_b(go, hh);

                    // dP = dO·V^T, then the softmax VJP row by row
                    let mut dp = vec![0.0f32; l * l];
                    mm_nt(&mut dp, &goh, &vh, l, dh, l);
                    let mut ds = vec![0.0f32; l * l];
                    for r in 0..l {
                        let prow = &p[r * l..(r + 1) * l];
                        let dprow = &dp[r * l..(r + 1) * l];
                        let inner: f64 = prow
                            .iter()
                            .zip(dprow)
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum();
                        for c in 0..l {
                            ds[r * l + c] = (prow[c] as f64 * (dprow[c] as f64 - inner)) as f32;
                        }
                    }
                    for v in ds.iter_mut() {
                        *v *= scale;
                    }

                    let mut dqh = vec![0.0f32; l * dh];
                    mm_nn(&mut dqh, &ds, &kh, l, l, dh);
                    let mut dkh = vec![0.0f32; l * dh];
                    mm_tn(&mut dkh, &ds, &qh, l, l, dh);
                    let mut dvh = vec![0.0f32; l * dh];
                    mm_tn(&mut dvh, p, &goh, l, l, dh);

                    let scatter = |gs: &mut crate::graph::GradStore, id: NodeId, src: &[f32]| {
                        let g = gs.accum(id, l * d);
                        for r in 0..l {
                            for c in 0..dh {
                                g[r * d + hh * dh + c] += src[r * dh + c];
                            }
                        }
                    };
                    scatter(gs, q, &dqh);
                    scatter(gs, k, &dkh);
                    scatter(gs, v, &dvh);
                }
            }),
        )
    }
}
