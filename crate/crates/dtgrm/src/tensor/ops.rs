//! Differentiable operations.
//!
//! Forward kernels run on flat row-major slices. Each backward closure
//! first reads whatever parent values it needs, then adds contributions
//! into the gradient store, so aliased operands (e.g. `mul(x, x)`) are
//! handled by plain accumulation.

use super::Tensor;
use crate::scalar::Scalar;

// C = A (m x n) . B (n x p)
fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, p: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * p];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * p..(k + 1) * p];
            for (cj, &bj) in crow.iter_mut().zip(brow.iter()) {
                *cj += aik * bj;
            }
        }
    }
    c
}

// GA += G (m x p) . B^T (p x n via b: n x p)
fn gemm_nt_acc<T: Scalar>(g: &[T], b: &[T], ga: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let grow = &g[i * p..(i + 1) * p];
        let garow = &mut ga[i * n..(i + 1) * n];
        for (k, gak) in garow.iter_mut().enumerate() {
            let brow = &b[k * p..(k + 1) * p];
            let mut acc = T::zero();
            for (gj, bj) in grow.iter().zip(brow.iter()) {
                acc += *gj * *bj;
            }
            *gak += acc;
        }
    }
}

// GB += A^T (n x m via a: m x n) . G (m x p)
fn gemm_tn_acc<T: Scalar>(a: &[T], g: &[T], gb: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let grow = &g[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let gbrow = &mut gb[k * p..(k + 1) * p];
            for (gbj, &gj) in gbrow.iter_mut().zip(grow.iter()) {
                *gbj += aik * gj;
            }
        }
    }
}

/// Slice decomposition of a 1-D or 2-D tensor along `axis`.
fn axis_slices(shape: &[usize], axis: usize) -> (usize, usize, usize, usize) {
    // (count, len, base_stride, elem_stride)
    match shape.len() {
        1 => {
            assert_eq!(axis, 0, "softmax axis {axis} on 1-d tensor");
            (1, shape[0], 0, 1)
        }
        2 => match axis {
            0 => (shape[1], shape[0], 1, shape[1]),
            1 => (shape[0], shape[1], shape[1], 1),
            _ => panic!("softmax axis {axis} on 2-d tensor"),
        },
        _ => panic!("softmax supports 1-d and 2-d tensors, got {shape:?}"),
    }
}

fn softmax_forward<T: Scalar>(
    vals: &[T],
    shape: &[usize],
    axis: usize,
    mask: Option<&[bool]>,
    allow_empty: bool,
) -> Vec<T> {
    if let Some(m) = mask {
        assert_eq!(m.len(), vals.len(), "softmax mask length mismatch");
    }
    let (count, len, base_stride, elem_stride) = axis_slices(shape, axis);
    let mut out = vec![T::zero(); vals.len()];
    for s in 0..count {
        let at = |e: usize| s * base_stride + e * elem_stride;
        let live = |e: usize| mask.map_or(true, |m| m[at(e)]);
        let mut hi = T::neg_infinity();
        let mut any = false;
        for e in 0..len {
            if live(e) {
                any = true;
                if vals[at(e)] > hi {
                    hi = vals[at(e)];
                }
            }
        }
        if !any {
            assert!(allow_empty, "softmax: fully masked slice {s}");
            continue; // row stays zero
        }
        let mut denom = T::zero();
        for e in 0..len {
            if live(e) {
                let x = (vals[at(e)] - hi).exp();
                out[at(e)] = x;
                denom += x;
            }
        }
        for e in 0..len {
            if live(e) {
                out[at(e)] = out[at(e)] / denom;
            }
        }
    }
    out
}

fn softmax_op<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    mask: Option<&[bool]>,
    allow_empty: bool,
) -> Tensor<T> {
    let shape = x.shape();
    let probs = softmax_forward(&x.values(), &shape, axis, mask, allow_empty);
    let saved = probs.clone();
    let mask_owned: Option<Vec<bool>> = mask.map(|m| m.to_vec());
    let xin = x.clone();
    let (count, len, base_stride, elem_stride) = axis_slices(&shape, axis);
    Tensor::from_op(
        shape,
        probs,
        vec![x.clone()],
        Box::new(move |g, store| {
            store.accum(&xin, |gx| {
                for s in 0..count {
                    let at = |e: usize| s * base_stride + e * elem_stride;
                    let live =
                        |e: usize| mask_owned.as_ref().map_or(true, |m| m[at(e)]);
                    let mut dot = T::zero();
                    for e in 0..len {
                        if live(e) {
                            dot += g[at(e)] * saved[at(e)];
                        }
                    }
                    for e in 0..len {
                        if live(e) {
                            gx[at(e)] += saved[at(e)] * (g[at(e)] - dot);
                        }
                    }
                }
            });
        }),
    )
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "add shape mismatch");
        let out: Vec<T> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(a, b)| *a + *b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, store| {
                store.accum(&a, |ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += *s;
                    }
                });
                store.accum(&b, |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d += *s;
                    }
                });
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "sub shape mismatch");
        let out: Vec<T> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(a, b)| *a - *b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, store| {
                store.accum(&a, |ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += *s;
                    }
                });
                store.accum(&b, |gb| {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= *s;
                    }
                });
            }),
        )
    }

    /// Elementwise product.
    pub fn mul(&self, other: &Tensor<T>) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "mul shape mismatch");
        let out: Vec<T> = self
            .values()
            .iter()
            .zip(other.values().iter())
            .map(|(a, b)| *a * *b)
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, store| {
                let bv = b.values_vec();
                store.accum(&a, |ga| {
                    for ((d, s), bv) in ga.iter_mut().zip(g).zip(bv.iter()) {
                        *d += *s * *bv;
                    }
                });
                let av = a.values_vec();
                store.accum(&b, |gb| {
                    for ((d, s), av) in gb.iter_mut().zip(g).zip(av.iter()) {
                        *d += *s * *av;
                    }
                });
            }),
        )
    }

    /// Multiply by a compile-time-known constant.
    pub fn scale(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.values().iter().map(|a| *a * c).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                store.accum(&a, |ga| {
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += *s * c;
                    }
                });
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.scale(-T::one())
    }

    pub fn relu(&self) -> Tensor<T> {
        let out: Vec<T> = self
            .values()
            .iter()
            .map(|a| if *a > T::zero() { *a } else { T::zero() })
            .collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let av = a.values_vec();
                store.accum(&a, |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        if *x > T::zero() {
                            *d += *s;
                        }
                    }
                });
            }),
        )
    }

    pub fn abs(&self) -> Tensor<T> {
        let out: Vec<T> = self.values().iter().map(|a| a.abs()).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let av = a.values_vec();
                store.accum(&a, |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        if *x > T::zero() {
                            *d += *s;
                        } else if *x < T::zero() {
                            *d -= *s;
                        }
                    }
                });
            }),
        )
    }

    /// Natural log. Inputs must be strictly positive; likelihood callers
    /// clamp to 1e-12 first.
    pub fn log(&self) -> Tensor<T> {
        assert!(
            self.values().iter().all(|v| *v > T::zero()),
            "log requires strictly positive inputs"
        );
        let out: Vec<T> = self.values().iter().map(|a| a.ln()).collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let av = a.values_vec();
                store.accum(&a, |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        *d += *s / *x;
                    }
                });
            }),
        )
    }

    /// Clamp into [min, max]. Gradient passes where the input already lay
    /// inside the interval (inclusive) and is zero where clamping bit.
    pub fn clamp(&self, min: Option<T>, max: Option<T>) -> Tensor<T> {
        if let (Some(lo), Some(hi)) = (min, max) {
            assert!(lo <= hi, "clamp: min {lo} > max {hi}");
        }
        let out: Vec<T> = self
            .values()
            .iter()
            .map(|a| {
                let mut v = *a;
                if let Some(lo) = min {
                    if v < lo {
                        v = lo;
                    }
                }
                if let Some(hi) = max {
                    if v > hi {
                        v = hi;
                    }
                }
                v
            })
            .collect();
        let a = self.clone();
        Tensor::from_op(
            self.shape(),
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                let av = a.values_vec();
                store.accum(&a, |ga| {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(av.iter()) {
                        let above = min.map_or(true, |lo| *x >= lo);
                        let below = max.map_or(true, |hi| *x <= hi);
                        if above && below {
                            *d += *s;
                        }
                    }
                });
            }),
        )
    }

    pub fn sum(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for v in self.values().iter() {
            acc += *v;
        }
        let a = self.clone();
        Tensor::from_op(
            vec![],
            vec![acc],
            vec![self.clone()],
            Box::new(move |g, store| {
                let g0 = g[0];
                store.accum(&a, |ga| {
                    for d in ga.iter_mut() {
                        *d += g0;
                    }
                });
            }),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        let n = self.numel();
        assert!(n > 0, "mean of empty tensor");
        let inv = T::one() / T::of(n as f64);
        let mut acc = T::zero();
        for v in self.values().iter() {
            acc += *v;
        }
        let a = self.clone();
        Tensor::from_op(
            vec![],
            vec![acc * inv],
            vec![self.clone()],
            Box::new(move |g, store| {
                let g0 = g[0] * inv;
                store.accum(&a, |ga| {
                    for d in ga.iter_mut() {
                        *d += g0;
                    }
                });
            }),
        )
    }

    /// Matrix product of 2-D tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Tensor<T> {
        let (m, n) = self.dims2("matmul lhs");
        let (n2, p) = other.dims2("matmul rhs");
        assert_eq!(n, n2, "matmul: inner dimensions {n} and {n2} disagree");
        let out = gemm(&self.values(), &other.values(), m, n, p);
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            vec![m, p],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, store| {
                let bv = b.values_vec();
                store.accum(&a, |ga| gemm_nt_acc(g, &bv, ga, m, n, p));
                let av = a.values_vec();
                store.accum(&b, |gb| gemm_tn_acc(&av, g, gb, m, n, p));
            }),
        )
    }

    /// 1-D convolution over the time axis with symmetric zero padding.
    ///
    /// `self` is frames x d_in, `filter` is ks x d_in x d_out with odd ks,
    /// `bias` (if any) is d_out. Output frame t mixes input frames
    /// t + (m - ks/2) * dilation.
    pub fn conv1d(
        &self,
        filter: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        dilation: usize,
    ) -> Tensor<T> {
        let (tlen, d_in) = self.dims2("conv1d input");
        let fshape = filter.shape();
        assert_eq!(fshape.len(), 3, "conv1d filter must be ks x d_in x d_out");
        let (ks, fd_in, d_out) = (fshape[0], fshape[1], fshape[2]);
        assert_eq!(fd_in, d_in, "conv1d: input width {d_in} vs filter {fd_in}");
        assert!(ks % 2 == 1, "conv1d kernel size must be odd, got {ks}");
        assert!(dilation >= 1, "conv1d dilation must be >= 1");
        if let Some(b) = bias {
            assert_eq!(b.shape(), vec![d_out], "conv1d bias shape");
        }
        let center = ks / 2;

        let src = move |t: usize, m: usize| -> Option<usize> {
            let off = (m as isize - center as isize) * dilation as isize;
            let s = t as isize + off;
            (s >= 0 && (s as usize) < tlen).then_some(s as usize)
        };

        let mut out = vec![T::zero(); tlen * d_out];
        {
            let xv = self.values();
            let fv = filter.values();
            if let Some(b) = bias {
                let bv = b.values();
                for t in 0..tlen {
                    out[t * d_out..(t + 1) * d_out].copy_from_slice(&bv);
                }
            }
            for t in 0..tlen {
                let orow = &mut out[t * d_out..(t + 1) * d_out];
                for m in 0..ks {
                    let Some(s) = src(t, m) else { continue };
                    let xrow = &xv[s * d_in..(s + 1) * d_in];
                    for (i, &xi) in xrow.iter().enumerate() {
                        let frow = &fv[(m * d_in + i) * d_out..(m * d_in + i + 1) * d_out];
                        for (oj, &fj) in orow.iter_mut().zip(frow.iter()) {
                            *oj += xi * fj;
                        }
                    }
                }
            }
        }

        let xin = self.clone();
        let fin = filter.clone();
        let bin = bias.cloned();
        let mut parents = vec![self.clone(), filter.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        Tensor::from_op(
            vec![tlen, d_out],
            out,
            parents,
            Box::new(move |g, store| {
                let fv = fin.values_vec();
                store.accum(&xin, |gx| {
                    for t in 0..tlen {
                        let grow = &g[t * d_out..(t + 1) * d_out];
                        for m in 0..ks {
                            let Some(s) = src(t, m) else { continue };
                            let gxrow = &mut gx[s * d_in..(s + 1) * d_in];
                            for (i, gxi) in gxrow.iter_mut().enumerate() {
                                let frow =
                                    &fv[(m * d_in + i) * d_out..(m * d_in + i + 1) * d_out];
                                let mut acc = T::zero();
                                for (gj, fj) in grow.iter().zip(frow.iter()) {
                                    acc += *gj * *fj;
                                }
                                *gxi += acc;
                            }
                        }
                    }
                });
                let xv = xin.values_vec();
                store.accum(&fin, |gf| {
                    for t in 0..tlen {
                        let grow = &g[t * d_out..(t + 1) * d_out];
                        for m in 0..ks {
                            let Some(s) = src(t, m) else { continue };
                            let xrow = &xv[s * d_in..(s + 1) * d_in];
                            for (i, &xi) in xrow.iter().enumerate() {
                                let gfrow =
                                    &mut gf[(m * d_in + i) * d_out..(m * d_in + i + 1) * d_out];
                                for (gfj, &gj) in gfrow.iter_mut().zip(grow.iter()) {
                                    *gfj += xi * gj;
                                }
                            }
                        }
                    }
                });
                if let Some(b) = &bin {
                    store.accum(b, |gb| {
                        for t in 0..tlen {
                            let grow = &g[t * d_out..(t + 1) * d_out];
                            for (gbj, &gj) in gb.iter_mut().zip(grow.iter()) {
                                *gbj += gj;
                            }
                        }
                    });
                }
            }),
        )
    }

    /// Softmax along `axis`. Masked entries are exactly zero in the output
    /// and receive no gradient; every slice must keep at least one live
    /// entry.
    pub fn softmax(&self, axis: usize, mask: Option<&[bool]>) -> Tensor<T> {
        softmax_op(self, axis, mask, false)
    }

    /// Row softmax of a 2-D tensor.
    pub fn softmax_rows(&self) -> Tensor<T> {
        softmax_op(self, 1, None, false)
    }

    /// Row softmax where fully masked rows collapse to all-zero instead of
    /// erroring. Used for adjacency rows whose source node is invalid.
    pub(crate) fn softmax_rows_permissive(&self, mask: &[bool]) -> Tensor<T> {
        softmax_op(self, 1, Some(mask), true)
    }

    /// Cosine similarity with a floored denominator:
    /// dot(a, b) / max(|a| |b|, eps).
    ///
    /// 1-D inputs give a scalar; matching 2-D inputs give one similarity
    /// per row pair.
    pub fn cosine_rows(&self, other: &Tensor<T>, eps: T) -> Tensor<T> {
        assert_eq!(self.shape(), other.shape(), "cosine_rows shape mismatch");
        assert!(eps > T::zero(), "cosine_rows eps must be positive");
        let shape = self.shape();
        let (rows, d, out_shape) = match shape.len() {
            1 => (1, shape[0], vec![]),
            2 => (shape[0], shape[1], vec![shape[0]]),
            _ => panic!("cosine_rows supports 1-d and 2-d tensors, got {shape:?}"),
        };
        let mut out = vec![T::zero(); rows];
        let mut saved = Vec::with_capacity(rows); // (dot, na, nb)
        {
            let av = self.values();
            let bv = other.values();
            for r in 0..rows {
                let ar = &av[r * d..(r + 1) * d];
                let br = &bv[r * d..(r + 1) * d];
                let mut dot = T::zero();
                let mut na2 = T::zero();
                let mut nb2 = T::zero();
                for (x, y) in ar.iter().zip(br.iter()) {
                    dot += *x * *y;
                    na2 += *x * *x;
                    nb2 += *y * *y;
                }
                let (na, nb) = (na2.sqrt(), nb2.sqrt());
                let denom = if na * nb > eps { na * nb } else { eps };
                out[r] = dot / denom;
                saved.push((dot, na, nb));
            }
        }
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, store| {
                let av = a.values_vec();
                let bv = b.values_vec();
                let mut ga_all = vec![T::zero(); av.len()];
                let mut gb_all = vec![T::zero(); bv.len()];
                for r in 0..rows {
                    let gc = g[r];
                    if gc == T::zero() {
                        continue;
                    }
                    let (dot, na, nb) = saved[r];
                    let ar = &av[r * d..(r + 1) * d];
                    let br = &bv[r * d..(r + 1) * d];
                    let gar = &mut ga_all[r * d..(r + 1) * d];
                    let gbr = &mut gb_all[r * d..(r + 1) * d];
                    if na * nb > eps {
                        let denom = na * nb;
                        let c = dot / denom;
                        let ascale = c / (na * na);
                        let bscale = c / (nb * nb);
                        for i in 0..d {
                            gar[i] += gc * (br[i] / denom - ascale * ar[i]);
                            gbr[i] += gc * (ar[i] / denom - bscale * br[i]);
                        }
                    } else {
                        // Denominator pinned at eps: linear in both args.
                        for i in 0..d {
                            gar[i] += gc * br[i] / eps;
                            gbr[i] += gc * ar[i] / eps;
                        }
                    }
                }
                store.accum(&a, |ga| {
                    for (dst, src) in ga.iter_mut().zip(ga_all.iter()) {
                        *dst += *src;
                    }
                });
                store.accum(&b, |gb| {
                    for (dst, src) in gb.iter_mut().zip(gb_all.iter()) {
                        *dst += *src;
                    }
                });
            }),
        )
    }

    /// Gather rows of a 2-D tensor; `None` produces an all-zero row.
    pub fn index_rows(&self, rows: &[Option<usize>]) -> Tensor<T> {
        let (n, d) = self.dims2("index_rows input");
        let mut out = vec![T::zero(); rows.len() * d];
        {
            let xv = self.values();
            for (t, r) in rows.iter().enumerate() {
                if let Some(r) = r {
                    assert!(*r < n, "index_rows: row {r} out of {n}");
                    out[t * d..(t + 1) * d].copy_from_slice(&xv[r * d..(r + 1) * d]);
                }
            }
        }
        let a = self.clone();
        let rows_owned = rows.to_vec();
        Tensor::from_op(
            vec![rows.len(), d],
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                store.accum(&a, |ga| {
                    for (t, r) in rows_owned.iter().enumerate() {
                        if let Some(r) = r {
                            let grow = &g[t * d..(t + 1) * d];
                            let garow = &mut ga[r * d..(r + 1) * d];
                            for (dst, src) in garow.iter_mut().zip(grow.iter()) {
                                *dst += *src;
                            }
                        }
                    }
                });
            }),
        )
    }

    /// One element per row of a 2-D tensor: out[t] = self[t, index[t]].
    pub fn gather_per_row(&self, index: &[usize]) -> Tensor<T> {
        let (n, m) = self.dims2("gather_per_row input");
        assert_eq!(index.len(), n, "gather_per_row needs one index per row");
        let mut out = vec![T::zero(); n];
        {
            let xv = self.values();
            for (t, &c) in index.iter().enumerate() {
                assert!(c < m, "gather_per_row: column {c} out of {m} at row {t}");
                out[t] = xv[t * m + c];
            }
        }
        let a = self.clone();
        let idx = index.to_vec();
        Tensor::from_op(
            vec![n],
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                store.accum(&a, |ga| {
                    for (t, &c) in idx.iter().enumerate() {
                        ga[t * m + c] += g[t];
                    }
                });
            }),
        )
    }

    /// Columns [lo, hi) of a 2-D tensor.
    pub fn slice_cols(&self, lo: usize, hi: usize) -> Tensor<T> {
        let (n, m) = self.dims2("slice_cols input");
        assert!(lo < hi && hi <= m, "slice_cols [{lo}, {hi}) out of {m}");
        let w = hi - lo;
        let mut out = vec![T::zero(); n * w];
        {
            let xv = self.values();
            for t in 0..n {
                out[t * w..(t + 1) * w].copy_from_slice(&xv[t * m + lo..t * m + hi]);
            }
        }
        let a = self.clone();
        Tensor::from_op(
            vec![n, w],
            out,
            vec![self.clone()],
            Box::new(move |g, store| {
                store.accum(&a, |ga| {
                    for t in 0..n {
                        let grow = &g[t * w..(t + 1) * w];
                        let garow = &mut ga[t * m + lo..t * m + hi];
                        for (dst, src) in garow.iter_mut().zip(grow.iter()) {
                            *dst += *src;
                        }
                    }
                });
            }),
        )
    }

    /// Single column of a 2-D tensor as a 1-D tensor.
    pub fn col(&self, j: usize) -> Tensor<T> {
        let (n, _) = self.dims2("col input");
        self.slice_cols(j, j + 1).reshape(vec![n])
    }

    pub fn reshape(&self, new_shape: Vec<usize>) -> Tensor<T> {
        check_reshape(&self.shape(), &new_shape, self.numel());
        let a = self.clone();
        Tensor::from_op(
            new_shape,
            self.values_vec(),
            vec![self.clone()],
            Box::new(move |g, store| {
                store.accum(&a, |ga| {
                    for (dst, src) in ga.iter_mut().zip(g) {
                        *dst += *src;
                    }
                });
            }),
        )
    }

    /// Add a length-d row vector to every row of an n x d tensor.
    pub fn add_row_broadcast(&self, row: &Tensor<T>) -> Tensor<T> {
        let (n, d) = self.dims2("add_row_broadcast input");
        assert_eq!(row.shape(), vec![d], "add_row_broadcast row shape");
        let mut out = self.values_vec();
        {
            let rv = row.values();
            for t in 0..n {
                for (o, r) in out[t * d..(t + 1) * d].iter_mut().zip(rv.iter()) {
                    *o += *r;
                }
            }
        }
        let (a, b) = (self.clone(), row.clone());
        Tensor::from_op(
            vec![n, d],
            out,
            vec![self.clone(), row.clone()],
            Box::new(move |g, store| {
                store.accum(&a, |ga| {
                    for (dst, src) in ga.iter_mut().zip(g) {
                        *dst += *src;
                    }
                });
                store.accum(&b, |gb| {
                    for t in 0..n {
                        for (dst, src) in gb.iter_mut().zip(&g[t * d..(t + 1) * d]) {
                            *dst += *src;
                        }
                    }
                });
            }),
        )
    }

    /// Scale row t of an n x d tensor by col[t].
    pub fn mul_col_broadcast(&self, col: &Tensor<T>) -> Tensor<T> {
        let (n, d) = self.dims2("mul_col_broadcast input");
        assert_eq!(col.shape(), vec![n], "mul_col_broadcast column shape");
        let mut out = self.values_vec();
        {
            let cv = col.values();
            for t in 0..n {
                for o in out[t * d..(t + 1) * d].iter_mut() {
                    *o = *o * cv[t];
                }
            }
        }
        let (a, b) = (self.clone(), col.clone());
        Tensor::from_op(
            vec![n, d],
            out,
            vec![self.clone(), col.clone()],
            Box::new(move |g, store| {
                let cv = b.values_vec();
                store.accum(&a, |ga| {
                    for t in 0..n {
                        let grow = &g[t * d..(t + 1) * d];
                        let garow = &mut ga[t * d..(t + 1) * d];
                        for (dst, src) in garow.iter_mut().zip(grow.iter()) {
                            *dst += *src * cv[t];
                        }
                    }
                });
                let av = a.values_vec();
                store.accum(&b, |gb| {
                    for t in 0..n {
                        let grow = &g[t * d..(t + 1) * d];
                        let arow = &av[t * d..(t + 1) * d];
                        let mut acc = T::zero();
                        for (gj, xj) in grow.iter().zip(arow.iter()) {
                            acc += *gj * *xj;
                        }
                        gb[t] += acc;
                    }
                });
            }),
        )
    }

    /// Copy with the graph cut: same values, no gradient flow.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::leaf(self.shape(), self.values_vec(), false)
    }
}

fn check_reshape(old: &[usize], new: &[usize], numel: usize) {
    let n: usize = new.iter().product();
    assert_eq!(n, numel, "reshape {old:?} -> {new:?} changes element count");
}

/// Stack equal-length 1-D tensors as the columns of a 2-D tensor.
pub fn stack_cols<T: Scalar>(cols: &[&Tensor<T>]) -> Tensor<T> {
    assert!(!cols.is_empty(), "stack_cols of nothing");
    let n = cols[0].numel();
    for c in cols {
        assert_eq!(c.shape(), vec![n], "stack_cols: all columns must be 1-d len {n}");
    }
    let k = cols.len();
    let mut out = vec![T::zero(); n * k];
    for (j, c) in cols.iter().enumerate() {
        let cv = c.values();
        for t in 0..n {
            out[t * k + j] = cv[t];
        }
    }
    let parents: Vec<Tensor<T>> = cols.iter().map(|c| (*c).clone()).collect();
    let handles = parents.clone();
    Tensor::from_op(
        vec![n, k],
        out,
        parents,
        Box::new(move |g, store| {
            for (j, c) in handles.iter().enumerate() {
                store.accum(c, |gc| {
                    for t in 0..n {
                        gc[t] += g[t * k + j];
                    }
                });
            }
        }),
    )
}

/// A constant template with scalar tensors written at given flat indices.
/// Placements at repeated indices are rejected; the same scalar may appear
/// at several indices and its gradient accumulates over all of them.
pub fn compose_scalars<T: Scalar>(
    shape: Vec<usize>,
    base: Vec<T>,
    placements: &[(usize, Tensor<T>)],
) -> Tensor<T> {
    let numel: usize = shape.iter().product();
    assert_eq!(base.len(), numel, "compose_scalars base length");
    let mut seen = vec![false; numel];
    let mut out = base;
    for (idx, t) in placements {
        assert!(*idx < numel, "compose_scalars index {idx} out of {numel}");
        assert!(!seen[*idx], "compose_scalars: duplicate index {idx}");
        seen[*idx] = true;
        out[*idx] = t.item();
    }
    let parents: Vec<Tensor<T>> = placements.iter().map(|(_, t)| t.clone()).collect();
    let owned: Vec<(usize, Tensor<T>)> = placements.to_vec();
    Tensor::from_op(
        shape,
        out,
        parents,
        Box::new(move |g, store| {
            for (idx, t) in &owned {
                let gi = g[*idx];
                store.accum(t, |gt| {
                    gt[0] += gi;
                });
            }
        }),
    )
}
