//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is an immutable value; operators build a dataflow graph by
//! keeping `Arc` handles to their inputs together with a backward closure.
//! [`backward`] walks the graph from a scalar root in reverse creation order
//! (ids are monotone, so descending id order is a topological order) and
//! returns the gradients of every reachable leaf.
//!
//! Storage is 32-bit by default; every operator is generic over [`Scalar`] so
//! the same graph can be built in 64-bit mode for gradient checking.
//!
//! Only per-channel/broadcast-mask forms of broadcasting are provided; all
//! other shape mismatches are errors.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::sync::atomic::{AtomicU64, Ordering};

use num_traits::{Float, NumAssignOps};
use rand::Rng;

use crate::kernels;
use crate::{Error, Result};

/// Element type of a tensor: IEEE float with the usual operator set.
pub trait Scalar:
    Float + NumAssignOps + Debug + Display + Default + Send + Sync + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

type BackFn<S> = Box<dyn Fn(&[S], &mut GradSink<'_, S>) + Send + Sync>;

enum Provenance<S: Scalar> {
    /// Untracked value; gradients never flow into it.
    Constant,
    /// Tracked leaf (a trainable parameter or a checked input).
    Leaf,
    /// Result of a differentiable operation.
    Op(OpRecord<S>),
}

struct OpRecord<S: Scalar> {
    parents: Vec<Tensor<S>>,
    back: BackFn<S>,
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<S>>,
    prov: Provenance<S>,
}

/// Immutable dense tensor, shareable across threads.
#[derive(Clone)]
pub struct Tensor<S: Scalar>(Arc<Inner<S>>);

impl<S: Scalar> Debug for Tensor<S> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "Tensor(id={}, shape={:?})", self.0.id, self.0.shape)
    }
}

fn check_same_shape<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    fn new(shape: Vec<usize>, data: Arc<Vec<S>>, prov: Provenance<S>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor(Arc::new(Inner {
            id: fresh_id(),
            shape,
            data,
            prov,
        }))
    }

    /// Untracked tensor from raw data.
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "from_vec: shape {:?} holds {} elements, got {}",
                shape,
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Self::new(shape.to_vec(), Arc::new(data), Provenance::Constant))
    }

    /// Tracked leaf; gradients are collected for it by [`backward`].
    pub fn leaf(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(Self::new(
            t.0.shape.clone(),
            Arc::clone(&t.0.data),
            Provenance::Leaf,
        ))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), Arc::new(vec![S::zero(); n]), Provenance::Constant)
    }

    pub fn full(shape: &[usize], value: S) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), Arc::new(vec![value; n]), Provenance::Constant)
    }

    pub fn scalar(value: S) -> Self {
        Self::new(vec![1], Arc::new(vec![value]), Provenance::Constant)
    }

    /// Untracked tensor with elements drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Self {
        let n = shape.iter().product();
        let data: Vec<S> = (0..n)
            .map(|_| S::from_f64(rng.gen_range(lo..hi)))
            .collect();
        Self::new(shape.to_vec(), Arc::new(data), Provenance::Constant)
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        back: BackFn<S>,
    ) -> Self {
        if parents.iter().any(|p| p.is_tracked()) {
            Self::new(
                shape,
                Arc::new(data),
                Provenance::Op(OpRecord { parents, back }),
            )
        } else {
            Self::new(shape, Arc::new(data), Provenance::Constant)
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.0.data
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    /// True when gradients flow through or into this tensor.
    pub fn is_tracked(&self) -> bool {
        !matches!(self.0.prov, Provenance::Constant)
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self.0.prov, Provenance::Leaf)
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    /// Same data, no history: shares storage, never tracked.
    pub fn detach(&self) -> Tensor<S> {
        Self::new(
            self.0.shape.clone(),
            Arc::clone(&self.0.data),
            Provenance::Constant,
        )
    }

    /// A tracked-leaf view of the same storage.
    pub fn as_leaf(&self) -> Tensor<S> {
        Self::new(
            self.0.shape.clone(),
            Arc::clone(&self.0.data),
            Provenance::Leaf,
        )
    }

    pub fn validate_finite(&self, what: &str) -> Result<()> {
        if self.0.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NumericFailure(format!("{what}: non-finite value")))
        }
    }

    pub(crate) fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match *self.0.shape.as_slice() {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::ShapeMismatch(format!(
                "expected rank-4 (N,C,H,W) tensor, got {:?}",
                self.0.shape
            ))),
        }
    }

    // ── Elementwise ─────────────────────────────────────────────────

    fn zip_elementwise(
        &self,
        other: &Tensor<S>,
        op: &str,
        f: impl Fn(S, S) -> S,
        back: BackFn<S>,
    ) -> Result<Tensor<S>> {
        check_same_shape(self, other, op)?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor::from_op(
            self.0.shape.clone(),
            data,
            vec![self.clone(), other.clone()],
            back,
        ))
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.clone(), other.clone());
        self.zip_elementwise(
            other,
            "add",
            |x, y| x + y,
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = sink.entry(&b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }),
        )
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.clone(), other.clone());
        self.zip_elementwise(
            other,
            "sub",
            |x, y| x - y,
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = sink.entry(&b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }),
        )
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (a, b) = (self.clone(), other.clone());
        let (ad, bd) = (Arc::clone(&self.0.data), Arc::clone(&other.0.data));
        self.zip_elementwise(
            other,
            "mul",
            |x, y| x * y,
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(bd.iter()) {
                        *d += gv * bv;
                    }
                }
                if let Some(db) = sink.entry(&b) {
                    for ((d, &gv), &av) in db.iter_mut().zip(g).zip(ad.iter()) {
                        *d += gv * av;
                    }
                }
            }),
        )
    }

    fn map_elementwise(&self, f: impl Fn(S) -> S, back: BackFn<S>) -> Tensor<S> {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(self.0.shape.clone(), data, vec![self.clone()], back)
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let a = self.clone();
        self.map_elementwise(
            |x| x * c,
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv * c;
                    }
                }
            }),
        )
    }

    pub fn add_scalar(&self, c: S) -> Tensor<S> {
        let a = self.clone();
        self.map_elementwise(
            |x| x + c,
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }),
        )
    }

    /// |x| elementwise; the subgradient at 0 is 0.
    pub fn abs(&self) -> Tensor<S> {
        let a = self.clone();
        let xd = Arc::clone(&self.0.data);
        self.map_elementwise(
            |x| x.abs(),
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(xd.iter()) {
                        let s = if xv > S::zero() {
                            S::one()
                        } else if xv < S::zero() {
                            -S::one()
                        } else {
                            S::zero()
                        };
                        *d += gv * s;
                    }
                }
            }),
        )
    }

    pub fn relu(&self) -> Tensor<S> {
        let a = self.clone();
        let xd = Arc::clone(&self.0.data);
        self.map_elementwise(
            |x| if x > S::zero() { x } else { S::zero() },
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(xd.iter()) {
                        if xv > S::zero() {
                            *d += gv;
                        }
                    }
                }
            }),
        )
    }

    pub fn leaky_relu(&self, alpha: S) -> Tensor<S> {
        let a = self.clone();
        let xd = Arc::clone(&self.0.data);
        self.map_elementwise(
            |x| if x > S::zero() { x } else { x * alpha },
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for ((d, &gv), &xv) in da.iter_mut().zip(g).zip(xd.iter()) {
                        *d += if xv > S::zero() { gv } else { gv * alpha };
                    }
                }
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<S> {
        let a = self.clone();
        let data: Vec<S> = self
            .data()
            .iter()
            .map(|&x| S::one() / (S::one() + (-x).exp()))
            .collect();
        let yd = Arc::new(data.clone());
        Tensor::from_op(
            self.0.shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for ((d, &gv), &yv) in da.iter_mut().zip(g).zip(yd.iter()) {
                        *d += gv * yv * (S::one() - yv);
                    }
                }
            }),
        )
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor<S> {
        let a = self.clone();
        let mut acc = S::zero();
        for &v in self.data() {
            acc += v;
        }
        Tensor::from_op(
            vec![1],
            vec![acc],
            vec![self.clone()],
            Box::new(move |g, sink| {
                let gv = g[0];
                if let Some(da) = sink.entry(&a) {
                    for d in da.iter_mut() {
                        *d += gv;
                    }
                }
            }),
        )
    }

    pub fn mean(&self) -> Tensor<S> {
        let n = S::from_usize(self.numel().max(1));
        self.sum().scale(S::one() / n)
    }

    /// Mean absolute value: ‖x‖₁ / numel.
    pub fn l1_mean(&self) -> Tensor<S> {
        self.abs().mean()
    }

    // ── Shape ───────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<S>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {:?} -> {:?}",
                self.shape(),
                shape
            )));
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }),
        ))
    }

    /// Concatenate rank-4 tensors along the channel axis.
    pub fn concat_channels(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if parts.is_empty() {
            return Err(Error::Empty(String::from("concat_channels")));
        }
        let (n, _, h, w) = parts[0].dims4()?;
        let mut channels = 0usize;
        for p in parts {
            let (pn, pc, ph, pw) = p.dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::ShapeMismatch(format!(
                    "concat_channels: {:?} vs {:?}",
                    parts[0].shape(),
                    p.shape()
                )));
            }
            channels += pc;
        }
        let plane = h * w;
        let mut data = vec![S::zero(); n * channels * plane];
        let mut offset = 0usize;
        let mut spans: Vec<(usize, usize)> = Vec::with_capacity(parts.len());
        for p in parts {
            let pc = p.shape()[1];
            for b in 0..n {
                let src = &p.data()[b * pc * plane..(b + 1) * pc * plane];
                let dst = &mut data[(b * channels + offset) * plane..];
                dst[..pc * plane].copy_from_slice(src);
            }
            spans.push((offset, pc));
            offset += pc;
        }
        let parents: Vec<Tensor<S>> = parts.iter().map(|p| (*p).clone()).collect();
        let back_parents = parents.clone();
        Ok(Tensor::from_op(
            vec![n, channels, h, w],
            data,
            parents,
            Box::new(move |g, sink| {
                for (p, &(off, pc)) in back_parents.iter().zip(spans.iter()) {
                    if let Some(dp) = sink.entry(p) {
                        for b in 0..n {
                            let src = &g[(b * channels + off) * plane..];
                            let dst = &mut dp[b * pc * plane..(b + 1) * pc * plane];
                            for (d, &gv) in dst.iter_mut().zip(&src[..pc * plane]) {
                                *d += gv;
                            }
                        }
                    }
                }
            }),
        ))
    }

    /// Channels `[start, end)` of a rank-4 tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor<S>> {
        let (n, c, h, w) = self.dims4()?;
        if start >= end || end > c {
            return Err(Error::ShapeMismatch(format!(
                "slice_channels [{start},{end}) of {c} channels"
            )));
        }
        let pc = end - start;
        let plane = h * w;
        let mut data = vec![S::zero(); n * pc * plane];
        for b in 0..n {
            let src = &self.data()[(b * c + start) * plane..(b * c + end) * plane];
            data[b * pc * plane..(b + 1) * pc * plane].copy_from_slice(src);
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![n, pc, h, w],
            data,
            vec![self.clone()],
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for b in 0..n {
                        let dst = &mut da[(b * c + start) * plane..(b * c + end) * plane];
                        let src = &g[b * pc * plane..(b + 1) * pc * plane];
                        for (d, &gv) in dst.iter_mut().zip(src) {
                            *d += gv;
                        }
                    }
                }
            }),
        ))
    }

    /// Multiply a (N,C,H,W) tensor by a single-channel (N,1,H,W) mask,
    /// broadcasting the mask across channels.
    pub fn mul_mask(&self, mask: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, c, h, w) = self.dims4()?;
        let (mn, mc, mh, mw) = mask.dims4()?;
        if (mn, mc, mh, mw) != (n, 1, h, w) {
            return Err(Error::ShapeMismatch(format!(
                "mul_mask: image {:?}, mask {:?}",
                self.shape(),
                mask.shape()
            )));
        }
        let plane = h * w;
        let mut data = vec![S::zero(); n * c * plane];
        for b in 0..n {
            let m = &mask.data()[b * plane..(b + 1) * plane];
            for ch in 0..c {
                let src = &self.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                let dst = &mut data[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for ((d, &xv), &mv) in dst.iter_mut().zip(src).zip(m) {
                    *d = xv * mv;
                }
            }
        }
        let a = self.clone();
        let mk = mask.clone();
        let ad = Arc::clone(&self.0.data);
        let md = Arc::clone(&mask.0.data);
        Ok(Tensor::from_op(
            vec![n, c, h, w],
            data,
            vec![self.clone(), mask.clone()],
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for b in 0..n {
                        let m = &md[b * plane..(b + 1) * plane];
                        for ch in 0..c {
                            let o = (b * c + ch) * plane;
                            for i in 0..plane {
                                da[o + i] += g[o + i] * m[i];
                            }
                        }
                    }
                }
                if let Some(dm) = sink.entry(&mk) {
                    for b in 0..n {
                        for ch in 0..c {
                            let o = (b * c + ch) * plane;
                            let dmb = &mut dm[b * plane..(b + 1) * plane];
                            for i in 0..plane {
                                dmb[i] += g[o + i] * ad[o + i];
                            }
                        }
                    }
                }
            }),
        ))
    }

    // ── Matrix products ─────────────────────────────────────────────

    fn dims2(&self, op: &str) -> Result<(usize, usize)> {
        match *self.0.shape.as_slice() {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch(format!(
                "{op}: expected rank-2 tensor, got {:?}",
                self.0.shape
            ))),
        }
    }

    /// A(m,k) @ B(k,n).
    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (m, k) = self.dims2("matmul lhs")?;
        let (k2, n) = other.dims2("matmul rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul: ({m},{k}) @ ({k2},{n})"
            )));
        }
        let data = kernels::matmul_nn(self.data(), other.data(), m, k, n);
        let (a, b) = (self.clone(), other.clone());
        let (ad, bd) = (Arc::clone(&self.0.data), Arc::clone(&other.0.data));
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    // dA = G @ B^T
                    kernels::matmul_nt_acc(g, &bd, da, m, n, k);
                }
                if let Some(db) = sink.entry(&b) {
                    // dB = A^T @ G
                    kernels::matmul_tn_acc(&ad, g, db, k, m, n);
                }
            }),
        ))
    }

    /// A(k,m)^T @ B(k,n) without materializing the transpose.
    pub fn matmul_tn(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (k, m) = self.dims2("matmul_tn lhs")?;
        let (k2, n) = other.dims2("matmul_tn rhs")?;
        if k != k2 {
            return Err(Error::ShapeMismatch(format!(
                "matmul_tn: ({k},{m})^T @ ({k2},{n})"
            )));
        }
        let mut data = vec![S::zero(); m * n];
        kernels::matmul_tn_acc(self.data(), other.data(), &mut data, m, k, n);
        let (a, b) = (self.clone(), other.clone());
        let (ad, bd) = (Arc::clone(&self.0.data), Arc::clone(&other.0.data));
        Ok(Tensor::from_op(
            vec![m, n],
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    // dA = B @ G^T  (k,n)@(n,m)
                    kernels::matmul_nt_acc(&bd, g, da, k, n, m);
                }
                if let Some(db) = sink.entry(&b) {
                    // dB = A @ G   (k,m)@(m,n)
                    kernels::matmul_nn_acc(&ad, g, db, k, m, n);
                }
            }),
        ))
    }

    /// Rearrange (N,C,H,W) into a (N·H·W, C) matrix of per-position feature
    /// rows; used to form Gram matrices.
    pub fn positions_by_channels(&self) -> Result<Tensor<S>> {
        let (n, c, h, w) = self.dims4()?;
        let plane = h * w;
        let rows = n * plane;
        let mut data = vec![S::zero(); rows * c];
        for b in 0..n {
            for ch in 0..c {
                let src = &self.data()[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                for (i, &v) in src.iter().enumerate() {
                    data[(b * plane + i) * c + ch] = v;
                }
            }
        }
        let a = self.clone();
        Ok(Tensor::from_op(
            vec![rows, c],
            data,
            vec![self.clone()],
            Box::new(move |g, sink| {
                if let Some(da) = sink.entry(&a) {
                    for b in 0..n {
                        for ch in 0..c {
                            let dst = &mut da[(b * c + ch) * plane..(b * c + ch + 1) * plane];
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d += g[(b * plane + i) * c + ch];
                            }
                        }
                    }
                }
            }),
        ))
    }
}

// ── Backward pass ───────────────────────────────────────────────────

/// Gradient buffers keyed by tensor id, as produced by [`backward`].
pub struct Gradients<S: Scalar> {
    bufs: BTreeMap<u64, Vec<S>>,
}

impl<S: Scalar> Default for Gradients<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Gradients<S> {
    pub fn new() -> Self {
        Gradients {
            bufs: BTreeMap::new(),
        }
    }

    /// Gradient of `root` with respect to `t`, if `t` was reached.
    pub fn get(&self, t: &Tensor<S>) -> Option<&[S]> {
        self.bufs.get(&t.id()).map(|v| v.as_slice())
    }

    /// Drop all accumulated gradients.
    pub fn zero(&mut self) {
        self.bufs.clear();
    }

    fn accumulate(&mut self, id: u64, grad: &[S]) {
        let buf = self
            .bufs
            .entry(id)
            .or_insert_with(|| vec![S::zero(); grad.len()]);
        for (d, &g) in buf.iter_mut().zip(grad) {
            *d += g;
        }
    }
}

/// Write access to in-flight gradient buffers during a backward pass.
pub struct GradSink<'a, S: Scalar> {
    bufs: &'a mut BTreeMap<u64, Vec<S>>,
}

impl<'a, S: Scalar> GradSink<'a, S> {
    /// Zero-initialized gradient buffer for `t`, or `None` when `t` is
    /// untracked (so its gradient need not be computed).
    pub fn entry(&mut self, t: &Tensor<S>) -> Option<&mut [S]> {
        if !t.is_tracked() {
            return None;
        }
        Some(
            self.bufs
                .entry(t.id())
                .or_insert_with(|| vec![S::zero(); t.numel()])
                .as_mut_slice(),
        )
    }
}

/// Reverse-mode sweep from a scalar `root`; returns gradients for every
/// reachable leaf. Unreachable (disconnected) leaves simply have no entry.
pub fn backward<S: Scalar>(root: &Tensor<S>) -> Result<Gradients<S>> {
    let mut grads = Gradients::new();
    backward_into(root, &mut grads)?;
    Ok(grads)
}

/// Like [`backward`] but accumulates into existing buffers, so repeated
/// calls add up until [`Gradients::zero`] is called.
pub fn backward_into<S: Scalar>(root: &Tensor<S>, out: &mut Gradients<S>) -> Result<()> {
    if root.numel() != 1 {
        return Err(Error::NonScalarRoot(root.numel()));
    }
    if !root.item().is_finite() {
        return Err(Error::NumericFailure(String::from(
            "backward root is not finite",
        )));
    }
    if !root.is_tracked() {
        return Ok(());
    }

    // Reachable tracked tensors, by id.
    let mut nodes: BTreeMap<u64, Tensor<S>> = BTreeMap::new();
    let mut stack = vec![root.clone()];
    while let Some(t) = stack.pop() {
        if nodes.contains_key(&t.id()) {
            continue;
        }
        if let Provenance::Op(rec) = &t.0.prov {
            for p in &rec.parents {
                if p.is_tracked() && !nodes.contains_key(&p.id()) {
                    stack.push(p.clone());
                }
            }
        }
        nodes.insert(t.id(), t);
    }

    // Ids are assigned in creation order, so descending id order is a valid
    // topological order of the graph.
    let mut pending: BTreeMap<u64, Vec<S>> = BTreeMap::new();
    pending.insert(root.id(), vec![S::one()]);

    loop {
        let id = match pending.keys().next_back() {
            Some(&id) => id,
            None => break,
        };
        let grad = pending.remove(&id).expect("key just observed");
        let tensor = nodes.get(&id).expect("reachable node").clone();
        match &tensor.0.prov {
            Provenance::Leaf => out.accumulate(id, &grad),
            Provenance::Op(rec) => {
                let mut sink = GradSink {
                    bufs: &mut pending,
                };
                (rec.back)(&grad, &mut sink);
            }
            Provenance::Constant => {}
        }
    }
    Ok(())
}
