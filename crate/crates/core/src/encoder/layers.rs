//! Dense building blocks with hand-written backward passes.
//!
//! Activations are stacked row-wise: a batch of `B` sequences of `n` tokens is
//! a `(B * n, width)` matrix. Every `backward` accumulates parameter
//! gradients into a same-shaped gradient struct and returns the gradient with
//! respect to its input.

use std::fmt::{Debug, Display};
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{s, Array1, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Floating-point element type of the encoder (f32 for training, f64 for
/// gradient verification).
pub trait Real:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn cst<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("representable constant")
}

/// Callback over named parameter tensors, flattened row-major.
pub trait ParamVisitor<F> {
    fn visit(&mut self, name: &str, shape: &[usize], values: &[F]);
}

pub trait ParamVisitorMut<F> {
    fn visit(&mut self, name: &str, values: &mut [F]);
}

impl<F, T: FnMut(&str, &[usize], &[F])> ParamVisitor<F> for T {
    fn visit(&mut self, name: &str, shape: &[usize], values: &[F]) {
        self(name, shape, values)
    }
}

impl<F, T: FnMut(&str, &mut [F])> ParamVisitorMut<F> for T {
    fn visit(&mut self, name: &str, values: &mut [F]) {
        self(name, values)
    }
}

/// Parameter container traversal in canonical name order.
pub trait Parameters<F: Real> {
    fn walk(&self, prefix: &str, v: &mut dyn ParamVisitor<F>);
    fn walk_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut<F>);
    fn zeros_like(&self) -> Self;

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.walk("", &mut |_: &str, _: &[usize], x: &[F]| n += x.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn walk2<F: Real>(a: &Array2<F>, name: String, v: &mut dyn ParamVisitor<F>) {
    v.visit(&name, &[a.nrows(), a.ncols()], a.as_slice().expect("standard layout"));
}

pub(crate) fn walk1<F: Real>(a: &Array1<F>, name: String, v: &mut dyn ParamVisitor<F>) {
    v.visit(&name, &[a.len()], a.as_slice().expect("standard layout"));
}

pub(crate) fn walk2_mut<F: Real>(a: &mut Array2<F>, name: String, v: &mut dyn ParamVisitorMut<F>) {
    v.visit(&name, a.as_slice_mut().expect("standard layout"));
}

pub(crate) fn walk1_mut<F: Real>(a: &mut Array1<F>, name: String, v: &mut dyn ParamVisitorMut<F>) {
    v.visit(&name, a.as_slice_mut().expect("standard layout"));
}

/// Normal(0, std) truncated to two standard deviations.
pub fn trunc_normal<F: Real, R: Rng + ?Sized>(rng: &mut R, shape: (usize, usize), std: f64) -> Array2<F> {
    let normal = Normal::new(0.0, 1.0).expect("valid normal");
    Array2::from_shape_simple_fn(shape, || loop {
        let z: f64 = normal.sample(rng);
        if z.abs() <= 2.0 {
            return cst(z * std);
        }
    })
}

/// Affine map `y = x W + b` with `W` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, std: f64) -> Self {
        Self {
            weight: trunc_normal(rng, (input, output), std),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    pub fn backward(&self, x: &ArrayView2<F>, dy: &Array2<F>, grad: &mut Linear<F>) -> Array2<F> {
        grad.weight += &x.t().dot(dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }
}

impl<F: Real> Parameters<F> for Linear<F> {
    fn walk(&self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        walk2(&self.weight, join(prefix, "weight"), v);
        walk1(&self.bias, join(prefix, "bias"), v);
    }

    fn walk_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut<F>) {
        walk2_mut(&mut self.weight, join(prefix, "weight"), v);
        walk1_mut(&mut self.bias, join(prefix, "bias"), v);
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<F> {
    pub gain: Array1<F>,
    pub shift: Array1<F>,
}

pub struct LayerNormCache<F> {
    normed: Array2<F>,
    rstd: Array1<F>,
}

impl<F: Real> LayerNorm<F> {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Array1::ones(width),
            shift: Array1::zeros(width),
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> (Array2<F>, LayerNormCache<F>) {
        let width = cst::<F>(x.ncols() as f64);
        let eps = cst::<F>(LN_EPS);
        let mut normed = x.to_owned();
        let mut rstd = Array1::zeros(x.nrows());
        for (mut row, r) in normed.rows_mut().into_iter().zip(rstd.iter_mut()) {
            let mean = row.sum() / width;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().fold(F::zero(), |acc, &v| acc + v * v) / width;
            *r = F::one() / (var + eps).sqrt();
            let rs = *r;
            row.mapv_inplace(|v| v * rs);
        }
        let y = &normed * &self.gain + &self.shift;
        (y, LayerNormCache { normed, rstd })
    }

    pub fn backward(&self, cache: &LayerNormCache<F>, dy: &Array2<F>, grad: &mut LayerNorm<F>) -> Array2<F> {
        grad.gain += &(dy * &cache.normed).sum_axis(Axis(0));
        grad.shift += &dy.sum_axis(Axis(0));
        let width = cst::<F>(dy.ncols() as f64);
        let mut dx = dy * &self.gain;
        for ((mut row, xhat), &r) in dx
            .rows_mut()
            .into_iter()
            .zip(cache.normed.rows())
            .zip(cache.rstd.iter())
        {
            let mean_d = row.sum() / width;
            let mean_dx = row.iter().zip(xhat.iter()).fold(F::zero(), |a, (&d, &h)| a + d * h) / width;
            Zip::from(&mut row).and(&xhat).for_each(|d, &h| {
                *d = r * (*d - mean_d - h * mean_dx);
            });
        }
        dx
    }
}

impl<F: Real> Parameters<F> for LayerNorm<F> {
    fn walk(&self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        walk1(&self.gain, join(prefix, "gain"), v);
        walk1(&self.shift, join(prefix, "shift"), v);
    }

    fn walk_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut<F>) {
        walk1_mut(&mut self.gain, join(prefix, "gain"), v);
        walk1_mut(&mut self.shift, join(prefix, "shift"), v);
    }

    fn zeros_like(&self) -> Self {
        Self {
            gain: Array1::zeros(self.gain.raw_dim()),
            shift: Array1::zeros(self.shift.raw_dim()),
        }
    }
}

// tanh approximation of GELU
const GELU_K: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu<F: Real>(x: F) -> F {
    let k = cst::<F>(GELU_K);
    let c = cst::<F>(GELU_C);
    let half = cst::<F>(0.5);
    half * x * (F::one() + (k * (x + c * x * x * x)).tanh())
}

fn gelu_grad<F: Real>(x: F) -> F {
    let k = cst::<F>(GELU_K);
    let c = cst::<F>(GELU_C);
    let half = cst::<F>(0.5);
    let t = (k * (x + c * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * k * (F::one() + cst::<F>(3.0) * c * x * x)
}

/// Two-layer GELU MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<F> {
    pub up: Linear<F>,
    pub down: Linear<F>,
}

pub struct FeedForwardCache<F> {
    pre: Array2<F>,
    act: Array2<F>,
}

impl<F: Real> FeedForward<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, width: usize, hidden: usize, std: f64) -> Self {
        Self {
            up: Linear::new(rng, width, hidden, std),
            down: Linear::new(rng, hidden, width, std),
        }
    }

    pub fn forward(&self, x: &ArrayView2<F>) -> (Array2<F>, FeedForwardCache<F>) {
        let pre = self.up.forward(x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(&act.view());
        (y, FeedForwardCache { pre, act })
    }

    pub fn backward(
        &self,
        x: &ArrayView2<F>,
        cache: &FeedForwardCache<F>,
        dy: &Array2<F>,
        grad: &mut FeedForward<F>,
    ) -> Array2<F> {
        let mut dact = self.down.backward(&cache.act.view(), dy, &mut grad.down);
        Zip::from(&mut dact)
            .and(&cache.pre)
            .for_each(|d, &p| *d *= gelu_grad(p));
        self.up.backward(x, &dact, &mut grad.up)
    }
}

impl<F: Real> Parameters<F> for FeedForward<F> {
    fn walk(&self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.up.walk(&join(prefix, "up"), v);
        self.down.walk(&join(prefix, "down"), v);
    }

    fn walk_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut<F>) {
        self.up.walk_mut(&join(prefix, "up"), v);
        self.down.walk_mut(&join(prefix, "down"), v);
    }

    fn zeros_like(&self) -> Self {
        Self {
            up: self.up.zeros_like(),
            down: self.down.zeros_like(),
        }
    }
}

/// Multi-head scaled dot-product attention. Queries come from one row stack,
/// keys and values from another; both hold `batch` equally sized sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention<F> {
    pub query: Linear<F>,
    pub key: Linear<F>,
    pub value: Linear<F>,
    pub output: Linear<F>,
    pub heads: usize,
}

pub struct AttentionCache<F> {
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    mixed: Array2<F>,
    // softmax weights per (sequence, head), row-major over sequences
    probs: Vec<Array2<F>>,
    batch: usize,
}

impl<F: Real> Attention<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, width: usize, heads: usize, std: f64) -> Self {
        Self {
            query: Linear::new(rng, width, width, std),
            key: Linear::new(rng, width, width, std),
            value: Linear::new(rng, width, width, std),
            output: Linear::new(rng, width, width, std),
            heads,
        }
    }

    pub fn forward(&self, q_in: &ArrayView2<F>, kv_in: &ArrayView2<F>, batch: usize) -> (Array2<F>, AttentionCache<F>) {
        let q = self.query.forward(q_in);
        let k = self.key.forward(kv_in);
        let v = self.value.forward(kv_in);
        let nq = q.nrows() / batch;
        let nk = k.nrows() / batch;
        let hd = q.ncols() / self.heads;
        let scale = cst::<F>(1.0 / (hd as f64).sqrt());
        let mut mixed = Array2::zeros(q.raw_dim());
        let mut probs = Vec::with_capacity(batch * self.heads);
        for b in 0..batch {
            for h in 0..self.heads {
                let cols = h * hd..(h + 1) * hd;
                let qb = q.slice(s![b * nq..(b + 1) * nq, cols.clone()]);
                let kb = k.slice(s![b * nk..(b + 1) * nk, cols.clone()]);
                let vb = v.slice(s![b * nk..(b + 1) * nk, cols.clone()]);
                let mut p = qb.dot(&kb.t());
                for mut row in p.rows_mut() {
                    let max = row.iter().fold(F::neg_infinity(), |m, &x| m.max(x));
                    row.mapv_inplace(|x| ((x - max) * scale).exp());
                    let z = row.sum();
                    row.mapv_inplace(|x| x / z);
                }
                mixed.slice_mut(s![b * nq..(b + 1) * nq, cols]).assign(&p.dot(&vb));
                probs.push(p);
            }
        }
        let out = self.output.forward(&mixed.view());
        (
            out,
            AttentionCache {
                q,
                k,
                v,
                mixed,
                probs,
                batch,
            },
        )
    }

    /// Returns `(d q_in, d kv_in)`.
    pub fn backward(
        &self,
        q_in: &ArrayView2<F>,
        kv_in: &ArrayView2<F>,
        cache: &AttentionCache<F>,
        dy: &Array2<F>,
        grad: &mut Attention<F>,
    ) -> (Array2<F>, Array2<F>) {
        let dmixed = self.output.backward(&cache.mixed.view(), dy, &mut grad.output);
        let batch = cache.batch;
        let nq = cache.q.nrows() / batch;
        let nk = cache.k.nrows() / batch;
        let hd = cache.q.ncols() / self.heads;
        let scale = cst::<F>(1.0 / (hd as f64).sqrt());
        let mut dq = Array2::zeros(cache.q.raw_dim());
        let mut dk = Array2::zeros(cache.k.raw_dim());
        let mut dv = Array2::zeros(cache.v.raw_dim());
        for b in 0..batch {
            for h in 0..self.heads {
                let p = &cache.probs[b * self.heads + h];
                let cols = h * hd..(h + 1) * hd;
                let qrows = b * nq..(b + 1) * nq;
                let krows = b * nk..(b + 1) * nk;
                let qb = cache.q.slice(s![qrows.clone(), cols.clone()]);
                let kb = cache.k.slice(s![krows.clone(), cols.clone()]);
                let vb = cache.v.slice(s![krows.clone(), cols.clone()]);
                let dob = dmixed.slice(s![qrows.clone(), cols.clone()]);
                dv.slice_mut(s![krows.clone(), cols.clone()]).assign(&p.t().dot(&dob));
                let mut ds = dob.dot(&vb.t());
                for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                    let dot = drow.iter().zip(prow.iter()).fold(F::zero(), |a, (&d, &pp)| a + d * pp);
                    Zip::from(&mut drow)
                        .and(&prow)
                        .for_each(|d, &pp| *d = pp * (*d - dot) * scale);
                }
                dq.slice_mut(s![qrows, cols.clone()]).assign(&ds.dot(&kb));
                dk.slice_mut(s![krows, cols]).assign(&ds.t().dot(&qb));
            }
        }
        let dq_in = self.query.backward(q_in, &dq, &mut grad.query);
        let mut dkv_in = self.key.backward(kv_in, &dk, &mut grad.key);
        dkv_in += &self.value.backward(kv_in, &dv, &mut grad.value);
        (dq_in, dkv_in)
    }
}

impl<F: Real> Parameters<F> for Attention<F> {
    fn walk(&self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.query.walk(&join(prefix, "query"), v);
        self.key.walk(&join(prefix, "key"), v);
        self.value.walk(&join(prefix, "value"), v);
        self.output.walk(&join(prefix, "output"), v);
    }

    fn walk_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut<F>) {
        self.query.walk_mut(&join(prefix, "query"), v);
        self.key.walk_mut(&join(prefix, "key"), v);
        self.value.walk_mut(&join(prefix, "value"), v);
        self.output.walk_mut(&join(prefix, "output"), v);
    }

    fn zeros_like(&self) -> Self {
        Self {
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            output: self.output.zeros_like(),
            heads: self.heads,
        }
    }
}
