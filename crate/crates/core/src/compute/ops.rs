//! Elementwise, broadcast, reduction and shape ops.

use std::sync::Arc;

use super::graph::{Graph, Var};
use super::par;
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAP_CHUNK: usize = 1 << 14;

fn par_map<T: Real>(x: &[T], f: impl Fn(T) -> T + Sync + Send) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, MAP_CHUNK, |i, chunk| {
        let src = &x[i * MAP_CHUNK..i * MAP_CHUNK + chunk.len()];
        for (o, &v) in chunk.iter_mut().zip(src) {
            *o = f(v);
        }
    });
    out
}

fn par_zip<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T + Sync + Send) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    par::for_each_chunk_mut(&mut out, MAP_CHUNK, |i, chunk| {
        let off = i * MAP_CHUNK;
        for (j, o) in chunk.iter_mut().enumerate() {
            *o = f(a[off + j], b[off + j]);
        }
    });
    out
}

pub fn sigmoid<T: Real>(x: T) -> T {
    let e = (-x.abs()).fast_exp();
    let r = T::one() / (T::one() + e);
    if x >= T::zero() {
        r
    } else {
        e * r
    }
}

pub fn softplus<T: Real>(x: T) -> T {
    if x > T::lit(20.0) {
        x
    } else {
        x.fast_exp().ln_1p()
    }
}

pub fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

pub fn gelu<T: Real>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (T::lit(-0.5) * x * x).exp() * T::lit(0.398_942_280_401_432_7);
    cdf + x * pdf
}

/// Monotone interpolation `a + t (b - a)` that is exact at `t = 0`, `t = 1`
/// and when `a == b`, and never leaves `[min(a,b), max(a,b)]` for `t` in
/// `[0, 1]`.
pub fn lerp<T: Real>(a: T, b: T, t: T) -> T {
    if (a <= T::zero() && b >= T::zero()) || (a >= T::zero() && b <= T::zero()) {
        return t * b + (T::one() - t) * a;
    }
    if t == T::one() {
        return b;
    }
    let x = a + t * (b - a);
    if (t > T::one()) == (b > a) {
        x.max(b)
    } else {
        x.min(b)
    }
}

fn check_same(op: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{op}: {a:?} vs {b:?}")));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(T) -> T + Sync + Send,
        df: impl Fn(T) -> T + Sync + Send + 'static,
    ) -> Var {
        let xt = self.value(x).clone();
        let out = Tensor::from_vec(xt.shape(), par_map(xt.data(), f));
        self.record(
            out,
            &[x],
            Box::new(move |g, _| {
                let gx = par_zip(g.data(), xt.data(), |gv, xv| gv * df(xv));
                vec![Some(Tensor::from_vec(xt.shape(), gx))]
            }),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, |v| {
            let s = sigmoid(v);
            s * (T::one() - s)
        })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, silu, |v| {
            let s = sigmoid(v);
            s * (T::one() + v * (T::one() - s))
        })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, gelu_grad)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, T::exp, T::exp)
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        self.unary(x, move |v| v * s, move |_| s)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.shape(a), self.shape(b))?;
        let out = par_zip(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.record(
            Tensor::from_vec(&shape, out),
            &[a, b],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.shape(a), self.shape(b))?;
        let out = par_zip(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.record(
            Tensor::from_vec(&shape, out),
            &[a, b],
            Box::new(|g, mask| {
                vec![Some(g.clone()), mask[1].then(|| g.map(|v| -v))]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.shape(a), self.shape(b))?;
        let at = self.value(a).clone();
        let bt = self.value(b).clone();
        let out = Tensor::from_vec(at.shape(), par_zip(at.data(), bt.data(), |x, y| x * y));
        Ok(self.record(
            out,
            &[a, b],
            Box::new(move |g, mask| {
                vec![
                    mask[0].then(|| Tensor::from_vec(g.shape(), par_zip(g.data(), bt.data(), |x, y| x * y))),
                    mask[1].then(|| Tensor::from_vec(g.shape(), par_zip(g.data(), at.data(), |x, y| x * y))),
                ]
            }),
        ))
    }

    fn check_suffix(&self, op: &str, a: Var, b: Var) -> Result<usize> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape(format!("{op}: {sb:?} is not a trailing sub-shape of {sa:?}")));
        }
        Ok(self.value(b).len())
    }

    /// `a + b` where `b`'s shape is a trailing sub-shape of `a`'s.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_suffix("add_bcast", a, b)?;
        let at = self.value(a).clone();
        let bt = self.value(b).clone();
        let mut out = at.data().to_vec();
        for row in out.chunks_mut(inner) {
            for (o, &v) in row.iter_mut().zip(bt.data()) {
                *o += v;
            }
        }
        let bshape = bt.shape().to_vec();
        Ok(self.record(
            Tensor::from_vec(at.shape(), out),
            &[a, b],
            Box::new(move |g, mask| {
                let gb = mask[1].then(|| {
                    let mut acc = vec![T::zero(); inner];
                    for row in g.data().chunks(inner) {
                        for (s, &v) in acc.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    Tensor::from_vec(&bshape, acc)
                });
                vec![Some(g.clone()), gb]
            }),
        ))
    }

    /// `a * b` where `b`'s shape is a trailing sub-shape of `a`'s.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let inner = self.check_suffix("mul_bcast", a, b)?;
        let at = self.value(a).clone();
        let bt = self.value(b).clone();
        let mut out = at.data().to_vec();
        for row in out.chunks_mut(inner) {
            for (o, &v) in row.iter_mut().zip(bt.data()) {
                *o *= v;
            }
        }
        Ok(self.record(
            Tensor::from_vec(at.shape(), out),
            &[a, b],
            Box::new(move |g, mask| {
                let ga = mask[0].then(|| {
                    let mut d = g.data().to_vec();
                    for row in d.chunks_mut(inner) {
                        for (o, &v) in row.iter_mut().zip(bt.data()) {
                            *o *= v;
                        }
                    }
                    Tensor::from_vec(g.shape(), d)
                });
                let gb = mask[1].then(|| {
                    let mut acc = vec![T::zero(); inner];
                    for (grow, arow) in g.data().chunks(inner).zip(at.data().chunks(inner)) {
                        for ((s, &gv), &av) in acc.iter_mut().zip(grow).zip(arow) {
                            *s += gv * av;
                        }
                    }
                    Tensor::from_vec(bt.shape(), acc)
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Gated blend `lerp(low, high, gate)`: equals `high` where the gate is
    /// one and `low` where it is zero.
    pub fn blend(&mut self, low: Var, high: Var, gate: Var) -> Result<Var> {
        check_same("blend", self.shape(low), self.shape(high))?;
        check_same("blend", self.shape(low), self.shape(gate))?;
        let lt = self.value(low).clone();
        let ht = self.value(high).clone();
        let gt = self.value(gate).clone();
        let out: Vec<T> = (0..lt.len())
            .map(|i| lerp(lt.data()[i], ht.data()[i], gt.data()[i]))
            .collect();
        Ok(self.record(
            Tensor::from_vec(lt.shape(), out),
            &[low, high, gate],
            Box::new(move |g, mask| {
                let gd = g.data();
                let shape = g.shape();
                vec![
                    mask[0].then(|| {
                        Tensor::from_vec(shape, gd.iter().zip(gt.data()).map(|(&a, &t)| a * (T::one() - t)).collect())
                    }),
                    mask[1].then(|| Tensor::from_vec(shape, gd.iter().zip(gt.data()).map(|(&a, &t)| a * t).collect())),
                    mask[2].then(|| {
                        Tensor::from_vec(
                            shape,
                            (0..gd.len()).map(|i| gd[i] * (ht.data()[i] - lt.data()[i])).collect(),
                        )
                    }),
                ]
            }),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let shape = xt.shape().to_vec();
        let s = xt.sum();
        self.record(
            Tensor::scalar(s),
            &[x],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// `sum(x * w)` against a constant weight tensor.
    pub fn weighted_sum(&mut self, x: Var, w: &Tensor<T>) -> Result<Var> {
        check_same("weighted_sum", self.shape(x), w.shape())?;
        let w = w.clone();
        let s = self.value(x).data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        Ok(self.record(Tensor::scalar(s), &[x], Box::new(move |g, _| vec![Some(w.map(|v| v * g.data()[0]))])))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        check_same("mse", self.shape(pred), target.shape())?;
        let p = self.value(pred).clone();
        let t = target.clone();
        let n = T::from_usize(p.len()).unwrap();
        let loss = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        Ok(self.record(
            Tensor::scalar(loss),
            &[pred],
            Box::new(move |g, _| {
                let k = T::lit(2.0) * g.data()[0] / n;
                vec![Some(p.zip_map(&t, |a, b| k * (a - b)))]
            }),
        ))
    }

    /// Mean over the middle axis of an `[outer, mid, inner]` view.
    pub fn mean_mid(&mut self, x: Var, outer: usize, mid: usize, inner: usize) -> Result<Var> {
        if outer * mid * inner != self.value(x).len() {
            return Err(Error::Shape(format!(
                "mean_mid: [{outer},{mid},{inner}] does not cover {:?}",
                self.shape(x)
            )));
        }
        let xt = self.value(x).clone();
        let inv = T::one() / T::from_usize(mid).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for (o, orow) in out.chunks_mut(inner).enumerate() {
            for m in 0..mid {
                let src = &xt.data()[(o * mid + m) * inner..][..inner];
                for (a, &v) in orow.iter_mut().zip(src) {
                    *a += v;
                }
            }
            orow.iter_mut().for_each(|a| *a *= inv);
        }
        let in_shape = xt.shape().to_vec();
        Ok(self.record(
            Tensor::from_vec(&[outer, inner], out),
            &[x],
            Box::new(move |g, _| {
                let mut gx = vec![T::zero(); outer * mid * inner];
                for o in 0..outer {
                    let grow = &g.data()[o * inner..][..inner];
                    for m in 0..mid {
                        let dst = &mut gx[(o * mid + m) * inner..][..inner];
                        for (d, &v) in dst.iter_mut().zip(grow) {
                            *d = v * inv;
                        }
                    }
                }
                vec![Some(Tensor::from_vec(&in_shape, gx))]
            }),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xt = self.value(x);
        let out = xt.reshape(shape)?;
        let in_shape = xt.shape().to_vec();
        Ok(self.record(
            out,
            &[x],
            Box::new(move |g, _| vec![Some(g.reshape(&in_shape).expect("same size"))]),
        ))
    }

    /// Concatenation along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!("concat_last: {s:?} vs {first:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows = self.value(parts[0]).rows();
        let mut out = vec![T::zero(); rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + off..r * total + off + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            off += w;
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let part_shapes: Vec<Vec<usize>> = parts.iter().map(|&p| self.shape(p).to_vec()).collect();
        Ok(self.record(
            Tensor::from_vec(&shape, out),
            parts,
            Box::new(move |g, mask| {
                let mut off = 0;
                let mut grads = Vec::with_capacity(widths.len());
                for ((&w, ps), &m) in widths.iter().zip(&part_shapes).zip(mask) {
                    if m {
                        let mut d = vec![T::zero(); rows * w];
                        for r in 0..rows {
                            d[r * w..(r + 1) * w].copy_from_slice(&g.data()[r * total + off..r * total + off + w]);
                        }
                        grads.push(Some(Tensor::from_vec(ps, d)));
                    } else {
                        grads.push(None);
                    }
                    off += w;
                }
                grads
            }),
        ))
    }

    /// Columns `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.value(x).clone();
        let width = xt.last_dim();
        if len == 0 || start + len > width {
            return Err(Error::Shape(format!("slice_last: [{start}, {}) of width {width}", start + len)));
        }
        let rows = xt.rows();
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&xt.data()[r * width + start..r * width + start + len]);
        }
        let mut shape = xt.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(self.record(
            Tensor::from_vec(&shape, out),
            &[x],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); rows * width];
                for r in 0..rows {
                    d[r * width + start..r * width + start + len].copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                }
                vec![Some(Tensor::from_vec(xt.shape(), d))]
            }),
        ))
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`; gradients scatter-add.
    pub fn gather(&mut self, x: Var, index: Arc<Vec<usize>>, shape: &[usize]) -> Result<Var> {
        let xt = self.value(x).clone();
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::Shape(format!("gather: {} indices for shape {shape:?}", index.len())));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xt.len()) {
            return Err(Error::Shape(format!("gather: index {bad} out of {}", xt.len())));
        }
        let src = xt.data();
        let out: Vec<T> = index.iter().map(|&i| src[i]).collect();
        let in_shape = xt.shape().to_vec();
        let n = xt.len();
        Ok(self.record(
            Tensor::from_vec(shape, out),
            &[x],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); n];
                for (&i, &v) in index.iter().zip(g.data()) {
                    d[i] += v;
                }
                vec![Some(Tensor::from_vec(&in_shape, d))]
            }),
        ))
    }
}
