//! Affine, convolution and normalization layers of the compute graph.

use super::gemm;
use super::graph::{Graph, Var};
use super::par;
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Rows per work item for row-parallel kernels; depends only on the shape.
fn row_chunk(rows: usize) -> usize {
    (rows / 64).max(512)
}

fn ordered_sum<T: Real>(partials: Vec<Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in partials {
        for (a, v) in acc.iter_mut().zip(p) {
            *a += v;
        }
    }
    acc
}

/// Normalization mode for [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with the batch's own statistics.
    Train,
    /// Normalize with the supplied running statistics.
    Eval,
}

/// Batch statistics observed by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Unbiased variance.
    pub var: Tensor<T>,
}

/// Column sums of `[rows, width]` data, chunked like the row kernels.
fn column_sums<T: Real>(data: &[T], rows: usize, width: usize) -> Vec<T> {
    let chunk = row_chunk(rows);
    let n_chunks = rows.div_ceil(chunk);
    let partials = par::map_indices(n_chunks, |c| {
        let mut acc = vec![T::zero(); width];
        let r1 = ((c + 1) * chunk).min(rows);
        for r in c * chunk..r1 {
            for (a, &v) in acc.iter_mut().zip(&data[r * width..(r + 1) * width]) {
                *a += v;
            }
        }
        acc
    });
    ordered_sum(partials, width)
}

impl<T: Real> Graph<T> {
    /// `x[..., in] * w[in, out] (+ b[out])`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xt = self.value(x).clone();
        let wt = self.value(w).clone();
        let (fan_in, fan_out) = match wt.shape() {
            &[i, o] => (i, o),
            s => return Err(Error::Shape(format!("linear weight must be 2-D, got {s:?}"))),
        };
        if xt.last_dim() != fan_in {
            return Err(Error::Shape(format!(
                "linear: input width {} vs weight {:?}",
                xt.last_dim(),
                wt.shape()
            )));
        }
        let bt = match b {
            Some(b) => {
                let bt = self.value(b).clone();
                if bt.shape() != [fan_out] {
                    return Err(Error::Shape(format!("linear bias {:?} vs out {fan_out}", bt.shape())));
                }
                Some(bt)
            }
            None => None,
        };
        let rows = xt.rows();
        let chunk = row_chunk(rows);
        let mut out = vec![T::zero(); rows * fan_out];
        par::for_each_chunk_mut(&mut out, chunk * fan_out, |c, o| {
            let r = o.len() / fan_out;
            if let Some(bt) = &bt {
                for row in o.chunks_mut(fan_out) {
                    row.copy_from_slice(bt.data());
                }
            }
            gemm::nn(r, fan_in, fan_out, &xt.data()[c * chunk * fan_in..], wt.data(), o, bt.is_some());
        });
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = fan_out;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.record(
            Tensor::from_vec(&shape, out),
            &parents,
            Box::new(move |g, mask| {
                let gd = g.data();
                let gx = mask[0].then(|| {
                    let mut dx = vec![T::zero(); rows * fan_in];
                    par::for_each_chunk_mut(&mut dx, chunk * fan_in, |c, d| {
                        let r = d.len() / fan_in;
                        gemm::nt(r, fan_out, fan_in, &gd[c * chunk * fan_out..], wt.data(), d, false);
                    });
                    Tensor::from_vec(xt.shape(), dx)
                });
                let gw = mask[1].then(|| {
                    let n_chunks = rows.div_ceil(chunk);
                    let partials = par::map_indices(n_chunks, |c| {
                        let r0 = c * chunk;
                        let r = (rows - r0).min(chunk);
                        let mut p = vec![T::zero(); fan_in * fan_out];
                        gemm::tn(
                            fan_in,
                            r,
                            fan_out,
                            &xt.data()[r0 * fan_in..],
                            &gd[r0 * fan_out..],
                            &mut p,
                            false,
                        );
                        p
                    });
                    Tensor::from_vec(wt.shape(), ordered_sum(partials, fan_in * fan_out))
                });
                let mut grads = vec![gx, gw];
                if mask.len() > 2 {
                    grads.push(mask[2].then(|| Tensor::from_vec(&[fan_out], column_sums(gd, rows, fan_out))));
                }
                grads
            }),
        ))
    }

    /// Same-padded 2-D convolution over `[batch, h, w, c_in]` with weights
    /// `[k, k, c_in, c_out]` and optional bias `[c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, kernel: usize) -> Result<Var> {
        let xt = self.value(x).clone();
        let wt = self.value(w).clone();
        if kernel.is_multiple_of(2) {
            return Err(Error::Shape(format!("conv2d kernel must be odd, got {kernel}")));
        }
        let &[batch, h, wd, cin] = xt.shape() else {
            return Err(Error::Shape(format!("conv2d input must be [b,h,w,c], got {:?}", xt.shape())));
        };
        let cout = match wt.shape() {
            &[k0, k1, ci, co] if k0 == kernel && k1 == kernel && ci == cin => co,
            s => {
                return Err(Error::Shape(format!(
                    "conv2d weight {s:?} does not match kernel {kernel} and {cin} input channels"
                )))
            }
        };
        let bt = match b {
            Some(b) => {
                let bt = self.value(b).clone();
                if bt.shape() != [cout] {
                    return Err(Error::Shape(format!("conv2d bias {:?} vs {cout} channels", bt.shape())));
                }
                Some(bt)
            }
            None => None,
        };
        let geom = ConvGeom { h, w: wd, cin, k: kernel };
        let patch = kernel * kernel * cin;
        let pix = h * wd;
        let mut out = vec![T::zero(); batch * pix * cout];
        par::for_each_chunk_mut(&mut out, pix * cout, |item, o| {
            if let Some(bt) = &bt {
                for row in o.chunks_mut(cout) {
                    row.copy_from_slice(bt.data());
                }
            }
            let src = &xt.data()[item * pix * cin..(item + 1) * pix * cin];
            if kernel == 1 {
                gemm::nn(pix, cin, cout, src, wt.data(), o, bt.is_some());
            } else {
                let col = geom.im2col(src);
                gemm::nn(pix, patch, cout, &col, wt.data(), o, bt.is_some());
            }
        });
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.record(
            Tensor::from_vec(&[batch, h, wd, cout], out),
            &parents,
            Box::new(move |g, mask| {
                let gd = g.data();
                let gx = mask[0].then(|| {
                    let mut dx = vec![T::zero(); batch * pix * cin];
                    par::for_each_chunk_mut(&mut dx, pix * cin, |item, d| {
                        let gy = &gd[item * pix * cout..(item + 1) * pix * cout];
                        if kernel == 1 {
                            gemm::nt(pix, cout, cin, gy, wt.data(), d, false);
                        } else {
                            let mut dcol = vec![T::zero(); pix * patch];
                            gemm::nt(pix, cout, patch, gy, wt.data(), &mut dcol, false);
                            geom.col2im_add(&dcol, d);
                        }
                    });
                    Tensor::from_vec(xt.shape(), dx)
                });
                let gw = mask[1].then(|| {
                    let partials = par::map_indices(batch, |item| {
                        let src = &xt.data()[item * pix * cin..(item + 1) * pix * cin];
                        let gy = &gd[item * pix * cout..(item + 1) * pix * cout];
                        let mut p = vec![T::zero(); patch * cout];
                        if kernel == 1 {
                            gemm::tn(cin, pix, cout, src, gy, &mut p, false);
                        } else {
                            let col = geom.im2col(src);
                            gemm::tn(patch, pix, cout, &col, gy, &mut p, false);
                        }
                        p
                    });
                    Tensor::from_vec(wt.shape(), ordered_sum(partials, patch * cout))
                });
                let mut grads = vec![gx, gw];
                if mask.len() > 2 {
                    grads.push(mask[2].then(|| Tensor::from_vec(&[cout], column_sums(gd, batch * pix, cout))));
                }
                grads
            }),
        ))
    }

    /// Causal depthwise convolution along the sequence axis of
    /// `[seqs, len, d]` with weights `[k, d]` and bias `[d]`. Output step `t`
    /// sees inputs `t-k+1 ..= t`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xt = self.value(x).clone();
        let wt = self.value(w).clone();
        let bt = self.value(b).clone();
        let &[seqs, len, d] = xt.shape() else {
            return Err(Error::Shape(format!("causal_conv1d input must be [s,l,d], got {:?}", xt.shape())));
        };
        let k = match wt.shape() {
            &[k, dd] if dd == d => k,
            s => return Err(Error::Shape(format!("causal_conv1d weight {s:?} vs width {d}"))),
        };
        if bt.shape() != [d] {
            return Err(Error::Shape(format!("causal_conv1d bias {:?} vs width {d}", bt.shape())));
        }
        let seq_chunk = (seqs / 64).max(16);
        let mut out = vec![T::zero(); seqs * len * d];
        par::for_each_chunk_mut(&mut out, seq_chunk * len * d, |c, o| {
            let base = c * seq_chunk * len * d;
            for (s, oseq) in o.chunks_mut(len * d).enumerate() {
                let xs = &xt.data()[base + s * len * d..][..len * d];
                for t in 0..len {
                    let orow = &mut oseq[t * d..(t + 1) * d];
                    orow.copy_from_slice(bt.data());
                    for j in 0..k {
                        let Some(src_t) = (t + j + 1).checked_sub(k) else { continue };
                        let xrow = &xs[src_t * d..(src_t + 1) * d];
                        let wrow = &wt.data()[j * d..(j + 1) * d];
                        for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        });
        Ok(self.record(
            Tensor::from_vec(xt.shape(), out),
            &[x, w, b],
            Box::new(move |g, mask| {
                let gd = g.data();
                let gx = mask[0].then(|| {
                    let mut dx = vec![T::zero(); seqs * len * d];
                    par::for_each_chunk_mut(&mut dx, seq_chunk * len * d, |c, dxc| {
                        let base = c * seq_chunk * len * d;
                        for (s, dseq) in dxc.chunks_mut(len * d).enumerate() {
                            let gs = &gd[base + s * len * d..][..len * d];
                            for t in 0..len {
                                let grow = &gs[t * d..(t + 1) * d];
                                for j in 0..k {
                                    let Some(src_t) = (t + j + 1).checked_sub(k) else { continue };
                                    let wrow = &wt.data()[j * d..(j + 1) * d];
                                    let drow = &mut dseq[src_t * d..(src_t + 1) * d];
                                    for ((dv, &gv), &wv) in drow.iter_mut().zip(grow).zip(wrow) {
                                        *dv += gv * wv;
                                    }
                                }
                            }
                        }
                    });
                    Tensor::from_vec(xt.shape(), dx)
                });
                let gw = mask[1].then(|| {
                    let n_chunks = seqs.div_ceil(seq_chunk);
                    let partials = par::map_indices(n_chunks, |c| {
                        let mut p = vec![T::zero(); k * d];
                        let s1 = ((c + 1) * seq_chunk).min(seqs);
                        for s in c * seq_chunk..s1 {
                            let xs = &xt.data()[s * len * d..][..len * d];
                            let gs = &gd[s * len * d..][..len * d];
                            for t in 0..len {
                                let grow = &gs[t * d..(t + 1) * d];
                                for j in 0..k {
                                    let Some(src_t) = (t + j + 1).checked_sub(k) else { continue };
                                    let xrow = &xs[src_t * d..(src_t + 1) * d];
                                    let prow = &mut p[j * d..(j + 1) * d];
                                    for ((pv, &gv), &xv) in prow.iter_mut().zip(grow).zip(xrow) {
                                        *pv += gv * xv;
                                    }
                                }
                            }
                        }
                        p
                    });
                    Tensor::from_vec(wt.shape(), ordered_sum(partials, k * d))
                });
                let gb = mask[2].then(|| Tensor::from_vec(&[d], column_sums(gd, seqs * len, d)));
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Per-channel batch normalization over every leading position of
    /// `[..., c]`. In [`NormMode::Train`] the batch statistics are used and
    /// returned; in [`NormMode::Eval`] `running` supplies mean and variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: (&Tensor<T>, &Tensor<T>),
        eps: f64,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xt = self.value(x).clone();
        let c = xt.last_dim();
        let rows = xt.rows();
        if rows == 0 {
            return Err(Error::Shape("batch_norm on an empty batch".into()));
        }
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(Error::Shape(format!("batch_norm {name} {:?} vs {c} channels", self.shape(v))));
            }
        }
        if running.0.shape() != [c] || running.1.shape() != [c] {
            return Err(Error::Shape("batch_norm running statistics shape".into()));
        }
        let eps = T::lit(eps);
        let n = T::from_usize(rows).unwrap();
        let (mean, var_biased, stats) = match mode {
            NormMode::Train => {
                let sums = column_sums(xt.data(), rows, c);
                let mean: Vec<T> = sums.iter().map(|&s| s / n).collect();
                let centered_sq: Vec<T> = xt
                    .data()
                    .chunks(c)
                    .flat_map(|row| row.iter().zip(&mean).map(|(&v, &m)| (v - m) * (v - m)))
                    .collect();
                let var: Vec<T> = column_sums(&centered_sq, rows, c).iter().map(|&s| s / n).collect();
                let unbiased = if rows > 1 {
                    var.iter().map(|&v| v * n / (n - T::one())).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: Tensor::from_vec(&[c], mean.clone()),
                    var: Tensor::from_vec(&[c], unbiased),
                };
                (mean, var, Some(stats))
            }
            NormMode::Eval => (running.0.data().to_vec(), running.1.data().to_vec(), None),
        };
        let inv_std: Vec<T> = var_biased.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gt = self.value(gamma).clone();
        let bt = self.value(beta).clone();
        let xhat: Vec<T> = xt
            .data()
            .chunks(c)
            .flat_map(|row| {
                row.iter()
                    .zip(&mean)
                    .zip(&inv_std)
                    .map(|((&v, &m), &s)| (v - m) * s)
                    .collect::<Vec<_>>()
            })
            .collect();
        let out: Vec<T> = xhat
            .chunks(c)
            .flat_map(|row| {
                row.iter()
                    .zip(gt.data())
                    .zip(bt.data())
                    .map(|((&v, &gm), &bb)| v * gm + bb)
                    .collect::<Vec<_>>()
            })
            .collect();
        let train = mode == NormMode::Train;
        let var_out = self.record(
            Tensor::from_vec(xt.shape(), out),
            &[x, gamma, beta],
            Box::new(move |g, mask| {
                let gd = g.data();
                let gxhat: Vec<T> = gd
                    .chunks(c)
                    .flat_map(|row| row.iter().zip(gt.data()).map(|(&a, &b)| a * b).collect::<Vec<_>>())
                    .collect();
                let gx = mask[0].then(|| {
                    if train {
                        let sum_g = column_sums(&gxhat, rows, c);
                        let prod: Vec<T> = gxhat.iter().zip(&xhat).map(|(&a, &b)| a * b).collect();
                        let sum_gx = column_sums(&prod, rows, c);
                        let dx: Vec<T> = (0..rows * c)
                            .map(|i| {
                                let ch = i % c;
                                inv_std[ch] / n * (n * gxhat[i] - sum_g[ch] - xhat[i] * sum_gx[ch])
                            })
                            .collect();
                        Tensor::from_vec(xt.shape(), dx)
                    } else {
                        let dx: Vec<T> = (0..rows * c).map(|i| gxhat[i] * inv_std[i % c]).collect();
                        Tensor::from_vec(xt.shape(), dx)
                    }
                });
                let ggamma = mask[1].then(|| {
                    let prod: Vec<T> = gd.iter().zip(&xhat).map(|(&a, &b)| a * b).collect();
                    Tensor::from_vec(&[c], column_sums(&prod, rows, c))
                });
                let gbeta = mask[2].then(|| Tensor::from_vec(&[c], column_sums(gd, rows, c)));
                vec![gx, ggamma, gbeta]
            }),
        );
        Ok((var_out, stats))
    }

    /// Root-mean-square normalization over the last axis, scaled by
    /// `weight[d]`.
    pub fn rms_norm(&mut self, x: Var, weight: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x).clone();
        let wt = self.value(weight).clone();
        let d = xt.last_dim();
        if wt.shape() != [d] {
            return Err(Error::Shape(format!("rms_norm weight {:?} vs width {d}", wt.shape())));
        }
        let rows = xt.rows();
        let eps = T::lit(eps);
        let dn = T::from_usize(d).unwrap();
        let inv: Vec<T> = xt
            .data()
            .chunks(d)
            .map(|row| {
                let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
                T::one() / (ms + eps).sqrt()
            })
            .collect();
        let mut out = vec![T::zero(); rows * d];
        for (r, orow) in out.chunks_mut(d).enumerate() {
            let xrow = &xt.data()[r * d..(r + 1) * d];
            for ((o, &xv), &wv) in orow.iter_mut().zip(xrow).zip(wt.data()) {
                *o = xv * inv[r] * wv;
            }
        }
        Ok(self.record(
            Tensor::from_vec(xt.shape(), out),
            &[x, weight],
            Box::new(move |g, mask| {
                let gd = g.data();
                let gx = mask[0].then(|| {
                    let mut dx = vec![T::zero(); rows * d];
                    for (r, drow) in dx.chunks_mut(d).enumerate() {
                        let xrow = &xt.data()[r * d..(r + 1) * d];
                        let grow = &gd[r * d..(r + 1) * d];
                        let s = inv[r];
                        let dot = (0..d).map(|j| grow[j] * wt.data()[j] * xrow[j] * s).sum::<T>() / dn;
                        for j in 0..d {
                            drow[j] = s * (grow[j] * wt.data()[j] - xrow[j] * s * dot);
                        }
                    }
                    Tensor::from_vec(xt.shape(), dx)
                });
                let gw = mask[1].then(|| {
                    let prod: Vec<T> = (0..rows * d).map(|i| gd[i] * xt.data()[i] * inv[i / d]).collect();
                    Tensor::from_vec(&[d], column_sums(&prod, rows, d))
                });
                vec![gx, gw]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xt = self.value(x).clone();
        let d = xt.last_dim();
        for v in [gamma, beta] {
            if self.shape(v) != [d] {
                return Err(Error::Shape(format!("layer_norm affine {:?} vs width {d}", self.shape(v))));
            }
        }
        let gt = self.value(gamma).clone();
        let bt = self.value(beta).clone();
        let rows = xt.rows();
        let eps = T::lit(eps);
        let dn = T::from_usize(d).unwrap();
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let m = row.iter().copied().sum::<T>() / dn;
            let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / dn;
            inv[r] = T::one() / (v + eps).sqrt();
            for j in 0..d {
                xhat[r * d + j] = (row[j] - m) * inv[r];
            }
        }
        let out: Vec<T> = (0..rows * d).map(|i| xhat[i] * gt.data()[i % d] + bt.data()[i % d]).collect();
        Ok(self.record(
            Tensor::from_vec(xt.shape(), out),
            &[x, gamma, beta],
            Box::new(move |g, mask| {
                let gd = g.data();
                let gx = mask[0].then(|| {
                    let mut dx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let gh: Vec<T> = (0..d).map(|j| gd[r * d + j] * gt.data()[j]).collect();
                        let xh = &xhat[r * d..(r + 1) * d];
                        let sg = gh.iter().copied().sum::<T>();
                        let sgx = gh.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>();
                        for j in 0..d {
                            dx[r * d + j] = inv[r] / dn * (dn * gh[j] - sg - xh[j] * sgx);
                        }
                    }
                    Tensor::from_vec(xt.shape(), dx)
                });
                let gg = mask[1].then(|| {
                    let prod: Vec<T> = gd.iter().zip(&xhat).map(|(&a, &b)| a * b).collect();
                    Tensor::from_vec(&[d], column_sums(&prod, rows, d))
                });
                let gb = mask[2].then(|| Tensor::from_vec(&[d], column_sums(gd, rows, d)));
                vec![gx, gg, gb]
            }),
        ))
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
}

impl ConvGeom {
    /// `[h*w, k*k*cin]` patch matrix with zero padding.
    fn im2col<T: Real>(&self, src: &[T]) -> Vec<T> {
        let ConvGeom { h, w, cin, k } = *self;
        let r = (k / 2) as isize;
        let patch = k * k * cin;
        let mut col = vec![T::zero(); h * w * patch];
        for y in 0..h {
            for x in 0..w {
                let dst = &mut col[(y * w + x) * patch..][..patch];
                for dy in 0..k {
                    let sy = y as isize + dy as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = x as isize + dx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = (sy as usize * w + sx as usize) * cin;
                        dst[(dy * k + dx) * cin..][..cin].copy_from_slice(&src[s..s + cin]);
                    }
                }
            }
        }
        col
    }

    fn col2im_add<T: Real>(&self, col: &[T], dst: &mut [T]) {
        let ConvGeom { h, w, cin, k } = *self;
        let r = (k / 2) as isize;
        let patch = k * k * cin;
        for y in 0..h {
            for x in 0..w {
                let src = &col[(y * w + x) * patch..][..patch];
                for dy in 0..k {
                    let sy = y as isize + dy as isize - r;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = x as isize + dx as isize - r;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = (sy as usize * w + sx as usize) * cin;
                        for (d, &v) in dst[s..s + cin].iter_mut().zip(&src[(dy * k + dx) * cin..][..cin]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}
