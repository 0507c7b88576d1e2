//! Differentiable video ops on [`Graph`]: region-correlation frame maps,
//! gap pooling, frame weighting, and the small fused reductions used by the
//! training losses.
//!
//! Frame features are `[T, S2, C]`: `T` frames, `S2` spatial grid cells,
//! `C` channels. A frame-to-frame similarity map is `[Ta, Tb]`.

use crate::error::{Result, VvsError};
use crate::gemm::{mm_nn, mm_nt, mm_tn};
use crate::graph::{Graph, NodeId};

/// Norms below this are treated as zero (directionless input).
pub const NORM_EPS: f64 = 1e-12;

impl Graph {
    /// Pairwise frame similarity of `a [Ta, S2, C]` vs `b [Tb, S2, C]`:
    /// the region dot-product tensor reduced over cells by max-then-mean
    /// (for each cell of `a`, the best-matching cell of `b`, averaged).
    /// Fuses the `[Ta, S2, S2, Tb]` intermediate with its reduction.
    pub fn frame_sim_map(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != 3 || sb.len() != 3 || sa[1] != sb[1] || sa[2] != sb[2] {
            return Err(VvsError::Shape {
                op: "frame_sim_map",
                detail: format!("a {:?} vs b {:?}", sa, sb),
            });
        }
        let (ta, s2, c) = (sa[0], sa[1], sa[2]);
        let tb = sb[0];
        let (ra, rb) = (ta * s2, tb * s2);

        // m[i*s2+p, j*s2+q] = sum_c a[i,p,c] * b[j,q,c]
        let mut m = vec![0.0f32; ra * rb];
        mm_nt(&mut m, self.value(a), self.value(b), ra, c, rb);

        let mut out = vec![0.0f32; ta * tb];
        let mut arg = vec![0u32; ta * s2 * tb];
        for i in 0..ta {
            for j in 0..tb {
                let mut acc = 0.0f64;
                for p in 0..s2 {
                    let row = &m[(i * s2 + p) * rb + j * s2..(i * s2 + p) * rb + (j + 1) * s2];
                    let mut best = row[0];
                    let mut bq = 0u32;
                    for (q, &v) in row.iter().enumerate().skip(1) {
                        if v > best {
                            best = v;
                            bq = q as u32;
                        }
                    }
                    arg[(i * s2 + p) * tb + j] = bq;
                    acc += best as f64;
                }
                out[i * tb + j] = (acc / s2 as f64) as f32;
            }
        }

        Ok(
            self.push_op(out, vec![ta, tb], &[a, b], move |bufs, _, go, gs| {
                // densify the map gradient (one live cell per (i, p, j) triple),
                // then route it through the two GEMM transposes
                let mut gm = vec![0.0f32; ra * rb];
                let inv = 1.0 / s2 as f32;
                for i in 0..ta {
                    for p in 0..s2 {
                        for j in 0..tb {
                            let q = arg[(i * s2 + p) * tb + j] as usize;
                            gm[(i * s2 + p) * rb + j * s2 + q] += go[i * tb + j] * inv;
                        }
                    }
                }
                {
                    let bd = &bufs[b].data;
                    let ga = gs.accum(a, ra * c);
                    mm_nn(ga, &gm, bd, ra, rb, c);
                }
                let ad = &bufs[a].data;
                let gb = gs.accum(b, rb * c);
                mm_tn(gb, &gm, ad, ra, rb, c);
            }),
        )
    }

    /// Spatio-temporal average pool of `x [T, S2, C]` to a unit vector `[C]`.
    pub fn st_gap(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(VvsError::Shape {
                op: "st_gap",
                detail: format!("expected [T, S2, C], got {:?}", xs),
            });
        }
        let (t, s2, c) = (xs[0], xs[1], xs[2]);
        let rows = t * s2;
        let xd = self.value(x);
        let mut mean = vec![0.0f64; c];
        for r in 0..rows {
            for k in 0..c {
                mean[k] += xd[r * c + k] as f64;
            }
        }
        for v in mean.iter_mut() {
            *v /= rows as f64;
        }
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_EPS {
            return Err(VvsError::ZeroNorm { op: "st_gap", norm });
        }
        let out: Vec<f32> = mean.iter().map(|v| (v / norm) as f32).collect();
        Ok(
            self.push_op(out, vec![c], &[x], move |bufs, out_id, go, gs| {
                // out = mean/|mean|, so d(mean) = (go - out·(out⋅go)) / |mean|
                // and the mean spreads uniformly over the pooled rows.
                let od = &bufs[out_id].data;
                let inner: f64 = od.iter().zip(go).map(|(&o, &g)| o as f64 * g as f64).sum();
                let gx = gs.accum(x, rows * c);
                for k in 0..c {
                    let dmean = ((go[k] as f64 - od[k] as f64 * inner) / norm) as f32 / rows as f32;
                    for r in 0..rows {
                        gx[r * c + k] += dmean;
                    }
                }
            }),
        )
    }

    /// Per-frame spatial average pool of `x [T, S2, C]` to unit rows `[T, C]`.
    pub fn s_gap(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(VvsError::Shape {
                op: "s_gap",
                detail: format!("expected [T, S2, C], got {:?}", xs),
            });
        }
        let (t, s2, c) = (xs[0], xs[1], xs[2]);
        let xd = self.value(x);
        let mut out = vec![0.0f32; t * c];
        let mut norms = vec![0.0f64; t];
        for fr in 0..t {
            let mut mean = vec![0.0f64; c];
            for s in 0..s2 {
                for k in 0..c {
                    mean[k] += xd[(fr * s2 + s) * c + k] as f64;
                }
            }
            for v in mean.iter_mut() {
                *v /= s2 as f64;
            }
            let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_EPS {
                return Err(VvsError::ZeroNorm { op: "s_gap", norm });
            }
            norms[fr] = norm;
            for k in 0..c {
                out[fr * c + k] = (mean[k] / norm) as f32;
            }
        }
        Ok(
            self.push_op(out, vec![t, c], &[x], move |bufs, out_id, go, gs| {
                let od = &bufs[out_id].data;
                let gx = gs.accum(x, t * s2 * c);
                for fr in 0..t {
                    let orow = &od[fr * c..(fr + 1) * c];
                    let grow = &go[fr * c..(fr + 1) * c];
                    let inner: f64 = orow
                        .iter()
                        .zip(grow)
                        .map(|(&o, &g)| o as f64 * g as f64)
                        .sum();
                    for k in 0..c {
                        let dmean = ((grow[k] as f64 - orow[k] as f64 * inner) / norms[fr]) as f32
                            / s2 as f32;
                        for s in 0..s2 {
                            gx[(fr * s2 + s) * c + k] += dmean;
                        }
                    }
                }
            }),
        )
    }

    /// Scale every region of frame `t` by `w[t]`: `x [T, S2, C] * w [T]`.
    pub fn hadamard_frames(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let wsh = self.shape(w).to_vec();
        if xs.len() != 3 || wsh != [xs[0]] {
            return Err(VvsError::Shape {
                op: "hadamard_frames",
                detail: format!("x {:?} vs w {:?}", xs, wsh),
            });
        }
        let (t, s2, c) = (xs[0], xs[1], xs[2]);
        let per = s2 * c;
        let xd = self.value(x);
        let wd = self.value(w);
        let mut out = vec![0.0f32; t * per];
        for fr in 0..t {
            let wv = wd[fr];
            for k in 0..per {
                out[fr * per + k] = xd[fr * per + k] * wv;
            }
        }
        Ok(self.push_op(out, xs, &[x, w], move |bufs, _, go, gs| {
            {
                let wd = &bufs[w].data;
                let gx = gs.accum(x, t * per);
                for fr in 0..t {
                    let wv = wd[fr];
                    for k in 0..per {
                        gx[fr * per + k] += go[fr * per + k] * wv;
                    }
                }
            }
            let xd = &bufs[x].data;
            let gw = gs.accum(w, t);
            for fr in 0..t {
                let mut acc = 0.0f64;
                for k in 0..per {
                    acc += go[fr * per + k] as f64 * xd[fr * per + k] as f64;
                }
                gw[fr] += acc as f32;
            }
        }))
    }

    /// Main-diagonal slice of a channel-first square map stack:
    /// `x [C, T, T] -> [T, C]` with `out[t, c] = x[c, t, t]`.
    pub fn diag_chw(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != xs[2] {
            return Err(VvsError::Shape {
                op: "diagonal_sampling",
                detail: format!("expected [C, T, T], got {:?}", xs),
            });
        }
        let (c, t) = (xs[0], xs[1]);
        let xd = self.value(x);
        let mut out = vec![0.0f32; t * c];
        for k in 0..c {
            for fr in 0..t {
                out[fr * c + k] = xd[k * t * t + fr * t + fr];
            }
        }
        Ok(self.push_op(out, vec![t, c], &[x], move |_, _, go, gs| {
            let gx = gs.accum(x, c * t * t);
            for k in 0..c {
                for fr in 0..t {
                    gx[k * t * t + fr * t + fr] += go[fr * c + k];
                }
            }
        }))
    }

    /// Cosine similarity of every row of `a [T, C]` against `g [C]`.
    pub fn cosine_rows(&mut self, a: NodeId, gvec: NodeId) -> Result<NodeId> {
        let sa = self.shape(a).to_vec();
        let sg = self.shape(gvec).to_vec();
        if sa.len() != 2 || sg != [sa[1]] {
            return Err(VvsError::Shape {
                op: "cosine_rows",
                detail: format!("a {:?} vs g {:?}", sa, sg),
            });
        }
        let (t, c) = (sa[0], sa[1]);
        let ad = self.value(a);
        let gd = self.value(gvec);
        let gnorm = gd
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if gnorm < NORM_EPS {
            return Err(VvsError::ZeroNorm {
                op: "cosine_rows",
                norm: gnorm,
            });
        }
        let mut out = vec![0.0f32; t];
        let mut anorms = vec![0.0f64; t];
        for fr in 0..t {
            let row = &ad[fr * c..(fr + 1) * c];
            let an = row
                .iter()
                .map(|&v| (v as f64) * (v as f64))
                .sum::<f64>()
                .sqrt();
            if an < NORM_EPS {
                return Err(VvsError::ZeroNorm {
                    op: "cosine_rows",
                    norm: an,
                });
            }
            anorms[fr] = an;
            let dot: f64 = row.iter().zip(gd).map(|(&x, &y)| x as f64 * y as f64).sum();
            out[fr] = (dot / (an * gnorm)) as f32;
        }
        Ok(
            self.push_op(out, vec![t], &[a, gvec], move |bufs, out_id, go, gs| {
                let cos = bufs[out_id].data.clone();
                {
                    let gd = &bufs[gvec].data;
                    let ad = &bufs[a].data;
                    let ga = gs.accum(a, t * c);
                    for fr in 0..t {
                        let an = anorms[fr];
                        let g = go[fr] as f64;
                        for k in 0..c {
                            let av = ad[fr * c + k] as f64;
                            let gv = gd[k] as f64;
                            ga[fr * c + k] +=
                                (g * (gv / (an * gnorm) - cos[fr] as f64 * av / (an * an))) as f32;
                        }
                    }
                }
                let ad = &bufs[a].data;
                let gd = &bufs[gvec].data;
                let gg = gs.accum(gvec, c);
                for fr in 0..t {
                    let an = anorms[fr];
                    let g = go[fr] as f64;
                    for k in 0..c {
                        let av = ad[fr * c + k] as f64;
                        let gv = gd[k] as f64;
                        gg[k] += (g * (av / (an * gnorm) - cos[fr] as f64 * gv / (gnorm * gnorm)))
                            as f32;
                    }
                }
            }),
        )
    }

    /// Mean over rows of the per-row maximum of `d [N, M]` (scalar).
    pub fn chamfer_matrix(&mut self, d: NodeId) -> Result<NodeId> {
        let ds = self.shape(d).to_vec();
        if ds.len() != 2 || ds[0] == 0 || ds[1] == 0 {
            return Err(VvsError::Shape {
                op: "chamfer_similarity",
                detail: format!("expected non-empty [N, M], got {:?}", ds),
            });
        }
        let (n, m) = (ds[0], ds[1]);
        let dd = self.value(d);
        let mut arg = vec![0u32; n];
        let mut acc = 0.0f64;
        for i in 0..n {
            let row = &dd[i * m..(i + 1) * m];
            let mut best = row[0];
            let mut bj = 0u32;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    bj = j as u32;
                }
            }
            arg[i] = bj;
            acc += best as f64;
        }
        let out = (acc / n as f64) as f32;
        Ok(self.push_op(vec![out], vec![], &[d], move |_, _, go, gs| {
            let gd = gs.accum(d, n * m);
            let w = go[0] / n as f32;
            for i in 0..n {
                gd[i * m + arg[i] as usize] += w;
            }
        }))
    }

    /// Total mass of `d` outside the `[-1, 1]` band:
    /// `sum(relu(d - 1) + relu(-d - 1))` (scalar).
    pub fn band_penalty(&mut self, d: NodeId) -> NodeId {
        let dd = &self.bufs[d].data;
        let n = dd.len();
        let total = dd
            .iter()
            .map(|&v| ((v - 1.0).max(0.0) + (-v - 1.0).max(0.0)) as f64)
            .sum::<f64>() as f32;
        self.push_op(vec![total], vec![], &[d], move |bufs, _, go, gs| {
            let dd = &bufs[d].data;
            let gd = gs.accum(d, n);
            for i in 0..n {
                if dd[i] > 1.0 {
                    gd[i] += go[0];
                } else if dd[i] < -1.0 {
                    gd[i] -= go[0];
                }
            }
        })
    }
}
