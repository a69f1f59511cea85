//! Selective-scan recurrence kernels.
//!
//! For every sequence, channel `d` and state `n`:
//!
//! ```text
//! h[t] = exp(delta[t,d] * A[d,n]) * h[t-1] + delta[t,d] * B[t,n] * u[t,d]
//! y[t,d] = sum_n C[t,n] * h[t][d,n] + D[d] * u[t,d]
//! ```
//!
//! with `h[-1] = 0`. Work is `O(len * inner * state)` per sequence.

use crate::compute::{par, Graph, Real, Tensor, Var};
use crate::error::{Error, Result};

/// Extents of a batched scan: `seqs` independent sequences of `len` steps,
/// `inner` channels and `state` state entries per channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanDims {
    pub seqs: usize,
    pub len: usize,
    pub inner: usize,
    pub state: usize,
}

/// Borrowed operands of a scan.
///
/// Layouts: `u`, `delta`: `[seqs, len, inner]`; `a`: `[inner, state]`;
/// `b`, `c`: `[seqs, len, state]`; `d`: `[inner]`.
#[derive(Clone, Copy)]
pub struct ScanInputs<'a, T> {
    pub dims: ScanDims,
    pub u: &'a [T],
    pub delta: &'a [T],
    pub a: &'a [T],
    pub b: &'a [T],
    pub c: &'a [T],
    pub d: &'a [T],
}

/// Gradients of a scan with respect to each operand.
#[derive(Clone, Debug)]
pub struct ScanGrads<T> {
    pub u: Vec<T>,
    pub delta: Vec<T>,
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Vec<T>,
    pub d: Vec<T>,
}

impl<'a, T: Real> ScanInputs<'a, T> {
    pub fn validate(&self) -> Result<()> {
        let ScanDims { seqs, len, inner, state } = self.dims;
        if seqs == 0 || len == 0 || inner == 0 || state == 0 {
            return Err(Error::Shape(format!("selective_scan: empty extent {:?}", self.dims)));
        }
        let checks = [
            ("u", self.u.len(), seqs * len * inner),
            ("delta", self.delta.len(), seqs * len * inner),
            ("A", self.a.len(), inner * state),
            ("B", self.b.len(), seqs * len * state),
            ("C", self.c.len(), seqs * len * state),
            ("D", self.d.len(), inner),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Shape(format!(
                    "selective_scan: {name} has {got} values, expected {want}"
                )));
            }
        }
        Ok(())
    }

    fn seq(&self, s: usize) -> SeqView<'a, T> {
        let ScanDims { len, inner, state, .. } = self.dims;
        SeqView {
            u: &self.u[s * len * inner..(s + 1) * len * inner],
            delta: &self.delta[s * len * inner..(s + 1) * len * inner],
            b: &self.b[s * len * state..(s + 1) * len * state],
            c: &self.c[s * len * state..(s + 1) * len * state],
        }
    }
}

struct SeqView<'a, T> {
    u: &'a [T],
    delta: &'a [T],
    b: &'a [T],
    c: &'a [T],
}

fn seq_chunk(seqs: usize) -> usize {
    (seqs / 64).max(8)
}

/// Runs one sequence, writing `y` (`[len, inner]`) and, when given, every
/// state `h[t]` into `states` (`[len, inner, state]`). Returns the first
/// step whose output is not finite.
fn scan_one<T: Real>(
    x: &ScanInputs<'_, T>,
    s: &SeqView<'_, T>,
    y: &mut [T],
    h: &mut [T],
    da: &mut [T],
    mut states: Option<&mut [T]>,
) -> std::result::Result<(), usize> {
    let ScanDims { len, inner, state, .. } = x.dims;
    let hs = inner * state;
    h.iter_mut().for_each(|v| *v = T::zero());
    for t in 0..len {
        let bt = &s.b[t * state..(t + 1) * state];
        let ct = &s.c[t * state..(t + 1) * state];
        let dts = &s.delta[t * inner..(t + 1) * inner];
        decays(x.a, dts, state, da);
        for di in 0..inner {
            let dt = dts[di];
            let ut = s.u[t * inner + di];
            let du = dt * ut;
            let hrow = &mut h[di * state..(di + 1) * state];
            let dar = &da[di * state..(di + 1) * state];
            let mut acc = T::zero();
            for n in 0..state {
                let hv = dar[n] * hrow[n] + du * bt[n];
                hrow[n] = hv;
                acc += ct[n] * hv;
            }
            let out = acc + x.d[di] * ut;
            if !out.is_finite() {
                return Err(t);
            }
            y[t * inner + di] = out;
        }
        if let Some(st) = states.as_deref_mut() {
            st[t * hs..(t + 1) * hs].copy_from_slice(h);
        }
    }
    Ok(())
}

/// `out[d, n] = exp(delta[d] * a[d, n])`
#[inline]
fn decays<T: Real>(a: &[T], delta: &[T], state: usize, out: &mut [T]) {
    for ((o, ar), &dt) in out.chunks_exact_mut(state).zip(a.chunks_exact(state)).zip(delta) {
        for (ov, &av) in o.iter_mut().zip(ar) {
            *ov = (dt * av).fast_exp();
        }
    }
}

fn scan_impl<T: Real>(x: &ScanInputs<'_, T>, states: Option<&mut [T]>) -> Result<Vec<T>> {
    x.validate()?;
    let ScanDims { seqs, len, inner, state } = x.dims;
    let hs = inner * state;
    let chunk = seq_chunk(seqs);
    let mut y = vec![T::zero(); seqs * len * inner];
    let n_chunks = seqs.div_ceil(chunk);
    let mut first_fail: Vec<Option<usize>> = vec![None; n_chunks];
    let mut empty: Vec<T> = Vec::new();
    let (st_buf, st_len) = match states {
        Some(st) => (st, chunk * len * hs),
        None => (&mut empty[..], 0),
    };
    let mut parts: Vec<(&mut [T], &mut Option<usize>, &mut [T])> = y
        .chunks_mut(chunk * len * inner)
        .zip(first_fail.iter_mut())
        .zip(chunks_or_empty(st_buf, st_len, n_chunks))
        .map(|((a, b), c)| (a, b, c))
        .collect();
    par::for_each_chunk_mut(&mut parts, 1, |ci, part| {
        let (yc, fail, st) = &mut part[0];
        let mut h = vec![T::zero(); hs];
        let mut da = vec![T::zero(); hs];
        for (k, ys) in yc.chunks_mut(len * inner).enumerate() {
            let trace = (!st.is_empty()).then(|| &mut st[k * len * hs..(k + 1) * len * hs]);
            if let Err(step) = scan_one(x, &x.seq(ci * chunk + k), ys, &mut h, &mut da, trace) {
                **fail = Some(step);
                return;
            }
        }
    });
    drop(parts);
    if let Some(step) = first_fail.into_iter().flatten().min() {
        return Err(Error::Numeric {
            step,
            reason: "selective scan produced a non-finite state".into(),
        });
    }
    Ok(y)
}

fn chunks_or_empty<T>(buf: &mut [T], len: usize, n: usize) -> Vec<&mut [T]> {
    if len == 0 {
        (0..n).map(|_| &mut [][..]).collect()
    } else {
        buf.chunks_mut(len).collect()
    }
}

/// Sequential-in-time scan, data-parallel across sequences.
pub fn selective_scan<T: Real>(x: &ScanInputs<'_, T>) -> Result<Vec<T>> {
    scan_impl(x, None)
}

/// [`selective_scan`] that also returns every state, `[seqs, len, inner,
/// state]`, for a later [`selective_scan_backward_with_states`].
pub fn selective_scan_with_states<T: Real>(x: &ScanInputs<'_, T>) -> Result<(Vec<T>, Vec<T>)> {
    let ScanDims { seqs, len, inner, state } = x.dims;
    let mut states = vec![T::zero(); seqs * len * inner * state];
    let y = scan_impl(x, Some(&mut states))?;
    Ok((y, states))
}

/// Gradients of `sum(gy * scan(x))`. States are recomputed per sequence so
/// memory stays `O(len * inner * state)` per worker.
pub fn selective_scan_backward<T: Real>(x: &ScanInputs<'_, T>, gy: &[T]) -> ScanGrads<T> {
    backward_impl(x, gy, None)
}

/// Gradients of `sum(gy * scan(x))` reusing states recorded by
/// [`selective_scan_with_states`].
pub fn selective_scan_backward_with_states<T: Real>(x: &ScanInputs<'_, T>, gy: &[T], states: &[T]) -> ScanGrads<T> {
    backward_impl(x, gy, Some(states))
}

fn backward_impl<T: Real>(x: &ScanInputs<'_, T>, gy: &[T], saved: Option<&[T]>) -> ScanGrads<T> {
    let ScanDims { seqs, len, inner, state } = x.dims;
    let hs = inner * state;
    let chunk = seq_chunk(seqs);
    let parts = par::map_indices(seqs.div_ceil(chunk), |ci| {
        let s0 = ci * chunk;
        let ns = (s0 + chunk).min(seqs) - s0;
        let mut g_u = vec![T::zero(); ns * len * inner];
        let mut g_delta = vec![T::zero(); ns * len * inner];
        let mut g_b = vec![T::zero(); ns * len * state];
        let mut g_c = vec![T::zero(); ns * len * state];
        let mut g_a = vec![T::zero(); hs];
        let mut g_d = vec![T::zero(); inner];
        let mut h = vec![T::zero(); hs];
        let mut da = vec![T::zero(); hs];
        let mut y = Vec::new();
        let mut local = Vec::new();
        if saved.is_none() {
            y = vec![T::zero(); len * inner];
            local = vec![T::zero(); len * hs];
        }
        let mut dh = vec![T::zero(); hs];
        let zero_state = vec![T::zero(); hs];
        for k in 0..ns {
            let s = s0 + k;
            let sv = x.seq(s);
            let states: &[T] = match saved {
                Some(all) => &all[s * len * hs..(s + 1) * len * hs],
                None => {
                    // non-finite forwards never reach backward
                    let _ = scan_one(x, &sv, &mut y, &mut h, &mut da, Some(&mut local));
                    &local
                }
            };
            let gys = &gy[s * len * inner..(s + 1) * len * inner];
            dh.iter_mut().for_each(|v| *v = T::zero());
            for t in (0..len).rev() {
                let bt = &sv.b[t * state..(t + 1) * state];
                let ct = &sv.c[t * state..(t + 1) * state];
                let dts = &sv.delta[t * inner..(t + 1) * inner];
                let ht = &states[t * hs..(t + 1) * hs];
                let hprev = if t > 0 { &states[(t - 1) * hs..t * hs] } else { &zero_state[..] };
                decays(x.a, dts, state, &mut da);
                let off_bc = (k * len + t) * state;
                let gb = &mut g_b[off_bc..off_bc + state];
                let gc = &mut g_c[off_bc..off_bc + state];
                for di in 0..inner {
                    let gyv = gys[t * inner + di];
                    let ut = sv.u[t * inner + di];
                    let dt = dts[di];
                    let mut du = gyv * x.d[di];
                    let mut ddelta = T::zero();
                    g_d[di] += gyv * ut;
                    let row = di * state..(di + 1) * state;
                    let (ar, dar, hr, hpr) = (&x.a[row.clone()], &da[row.clone()], &ht[row.clone()], &hprev[row.clone()]);
                    let (dhr, gar) = (&mut dh[row.clone()], &mut g_a[row]);
                    for n in 0..state {
                        gc[n] += gyv * hr[n];
                        let gh = dhr[n] + gyv * ct[n];
                        let decay = dar[n];
                        let hp = hpr[n];
                        ddelta += gh * (ar[n] * decay * hp + bt[n] * ut);
                        gar[n] += gh * dt * decay * hp;
                        gb[n] += gh * dt * ut;
                        du += gh * dt * bt[n];
                        dhr[n] = gh * decay;
                    }
                    g_u[(k * len + t) * inner + di] = du;
                    g_delta[(k * len + t) * inner + di] = ddelta;
                }
            }
        }
        ScanGrads { u: g_u, delta: g_delta, a: g_a, b: g_b, c: g_c, d: g_d }
    });
    let mut out = ScanGrads {
        u: Vec::with_capacity(seqs * len * inner),
        delta: Vec::with_capacity(seqs * len * inner),
        a: vec![T::zero(); hs],
        b: Vec::with_capacity(seqs * len * state),
        c: Vec::with_capacity(seqs * len * state),
        d: vec![T::zero(); inner],
    };
    for p in parts {
        out.u.extend(p.u);
        out.delta.extend(p.delta);
        out.b.extend(p.b);
        out.c.extend(p.c);
        out.a.iter_mut().zip(p.a).for_each(|(o, v)| *o += v);
        out.d.iter_mut().zip(p.d).for_each(|(o, v)| *o += v);
    }
    out
}

/// Blocked two-level scan. Time is cut into blocks of `block` steps that
/// are scanned independently from a zero state; block carries are combined
/// by a short sequential pass and each block is then corrected by the carry
/// propagated through its decays. Parallel across time blocks.
pub fn selective_scan_blocked<T: Real>(x: &ScanInputs<'_, T>, block: usize) -> Result<Vec<T>> {
    x.validate()?;
    let ScanDims { seqs, len, inner, state } = x.dims;
    let block = block.clamp(1, len);
    let n_blocks = len.div_ceil(block);
    let hs = inner * state;
    let mut y = vec![T::zero(); seqs * len * inner];
    for s in 0..seqs {
        let sv = x.seq(s);
        // zero-start outputs, final local state and total decay per block
        let local = par::map_indices(n_blocks, |bi| {
            let t0 = bi * block;
            let t1 = (t0 + block).min(len);
            let mut h = vec![T::zero(); hs];
            let mut decay = vec![T::one(); hs];
            let mut yl = vec![T::zero(); (t1 - t0) * inner];
            for t in t0..t1 {
                let bt = &sv.b[t * state..(t + 1) * state];
                let ct = &sv.c[t * state..(t + 1) * state];
                for di in 0..inner {
                    let dt = sv.delta[t * inner + di];
                    let ut = sv.u[t * inner + di];
                    let mut acc = T::zero();
                    for n in 0..state {
                        let idx = di * state + n;
                        let a = (dt * x.a[idx]).fast_exp();
                        h[idx] = a * h[idx] + dt * bt[n] * ut;
                        decay[idx] *= a;
                        acc += ct[n] * h[idx];
                    }
                    yl[(t - t0) * inner + di] = acc + x.d[di] * ut;
                }
            }
            (yl, h, decay)
        });
        let mut carries = Vec::with_capacity(n_blocks);
        let mut carry = vec![T::zero(); hs];
        for (_, h_end, decay) in &local {
            carries.push(carry.clone());
            for idx in 0..hs {
                carry[idx] = h_end[idx] + decay[idx] * carry[idx];
            }
        }
        let corrected = par::map_indices(n_blocks, |bi| {
            let t0 = bi * block;
            let t1 = (t0 + block).min(len);
            let mut yl = local[bi].0.clone();
            let mut prop = carries[bi].clone();
            if prop.iter().all(|v| *v == T::zero()) {
                return yl;
            }
            for t in t0..t1 {
                let ct = &sv.c[t * state..(t + 1) * state];
                for di in 0..inner {
                    let dt = sv.delta[t * inner + di];
                    let mut acc = T::zero();
                    for n in 0..state {
                        let idx = di * state + n;
                        prop[idx] *= (dt * x.a[idx]).fast_exp();
                        acc += ct[n] * prop[idx];
                    }
                    yl[(t - t0) * inner + di] += acc;
                }
            }
            yl
        });
        let ys = &mut y[s * len * inner..(s + 1) * len * inner];
        for (bi, yl) in corrected.into_iter().enumerate() {
            ys[bi * block * inner..][..yl.len()].copy_from_slice(&yl);
        }
    }
    if let Some(pos) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            step: (pos / inner) % len,
            reason: "blocked selective scan produced a non-finite output".into(),
        });
    }
    Ok(y)
}

impl<T: Real> Graph<T> {
    /// Differentiable batched selective scan.
    ///
    /// `u`, `delta`: `[seqs, len, inner]`; `a`: `[inner, state]` (already
    /// negative); `b`, `c`: `[seqs, len, state]`; `d`: `[inner]`.
    pub fn selective_scan(&mut self, u: Var, delta: Var, a: Var, b: Var, c: Var, d: Var) -> Result<Var> {
        let shape = self.shape(u).to_vec();
        let &[seqs, len, inner] = shape.as_slice() else {
            return Err(Error::Shape(format!("selective_scan: u must be [s,l,d], got {shape:?}")));
        };
        let state = match self.shape(a) {
            &[di, n] if di == inner => n,
            s => return Err(Error::Shape(format!("selective_scan: A {s:?} vs inner {inner}"))),
        };
        let expect_bc = [seqs, len, state];
        for (name, v) in [("B", b), ("C", c)] {
            if self.shape(v) != expect_bc {
                return Err(Error::Shape(format!(
                    "selective_scan: {name} {:?}, expected {expect_bc:?}",
                    self.shape(v)
                )));
            }
        }
        if self.shape(delta) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "selective_scan: delta {:?} vs u {shape:?}",
                self.shape(delta)
            )));
        }
        if self.shape(d) != [inner] {
            return Err(Error::Shape(format!("selective_scan: D {:?} vs inner {inner}", self.shape(d))));
        }
        let dims = ScanDims { seqs, len, inner, state };
        let ops: Vec<Tensor<T>> = [u, delta, a, b, c, d].iter().map(|&v| self.value(v).clone()).collect();
        let inputs = ScanInputs {
            dims,
            u: ops[0].data(),
            delta: ops[1].data(),
            a: ops[2].data(),
            b: ops[3].data(),
            c: ops[4].data(),
            d: ops[5].data(),
        };
        let needs_grad = [u, delta, a, b, c, d].iter().any(|&v| self.requires_grad(v));
        let (y, states) = if needs_grad {
            selective_scan_with_states(&inputs)?
        } else {
            (selective_scan(&inputs)?, Vec::new())
        };
        Ok(self.record(
            Tensor::from_vec(&shape, y),
            &[u, delta, a, b, c, d],
            Box::new(move |g, mask| {
                let inputs = ScanInputs {
                    dims,
                    u: ops[0].data(),
                    delta: ops[1].data(),
                    a: ops[2].data(),
                    b: ops[3].data(),
                    c: ops[4].data(),
                    d: ops[5].data(),
                };
                let gr = selective_scan_backward_with_states(&inputs, g.data(), &states);
                [gr.u, gr.delta, gr.a, gr.b, gr.c, gr.d]
                    .into_iter()
                    .zip(&ops)
                    .zip(mask)
                    .map(|((v, t), &m)| m.then(|| Tensor::from_vec(t.shape(), v)))
                    .collect()
            }),
        ))
    }
}
