//! Shared latent-bottleneck encoder: one cross-attention block in which the
//! latent queries attend to the input tokens, followed by latent
//! self-attention blocks and a linear output head. Pre-normalization
//! throughout.

use ndarray::{Array2, ArrayView2};
use rand::Rng;

use super::layers::{
    join, trunc_normal, walk2, walk2_mut, Attention, AttentionCache, FeedForward, FeedForwardCache, LayerNorm,
    LayerNormCache, Linear, ParamVisitor, ParamVisitorMut, Parameters, Real,
};
use crate::domain::EncoderConfig;

pub(crate) const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct CrossBlock<F> {
    pub norm_latent: LayerNorm<F>,
    pub norm_input: LayerNorm<F>,
    pub attn: Attention<F>,
    pub norm_ff: LayerNorm<F>,
    pub ff: FeedForward<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfBlock<F> {
    pub norm: LayerNorm<F>,
    pub attn: Attention<F>,
    pub norm_ff: LayerNorm<F>,
    pub ff: FeedForward<F>,
}

/// Parameters shared by every subject.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceiverParams<F> {
    pub latent_queries: Array2<F>,
    pub cross: CrossBlock<F>,
    pub layers: Vec<SelfBlock<F>>,
    pub head: Linear<F>,
}

struct CrossCache<F> {
    ln_lat: LayerNormCache<F>,
    lat_normed: Array2<F>,
    ln_in: LayerNormCache<F>,
    in_normed: Array2<F>,
    attn: AttentionCache<F>,
    ln_ff: LayerNormCache<F>,
    ff_in: Array2<F>,
    ff: FeedForwardCache<F>,
}

struct SelfCache<F> {
    ln: LayerNormCache<F>,
    normed: Array2<F>,
    attn: AttentionCache<F>,
    ln_ff: LayerNormCache<F>,
    ff_in: Array2<F>,
    ff: FeedForwardCache<F>,
}

pub(crate) struct PerceiverCache<F> {
    cross: CrossCache<F>,
    layers: Vec<SelfCache<F>>,
    final_latents: Array2<F>,
    batch: usize,
}

impl<F: Real> CrossBlock<F> {
    fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &EncoderConfig) -> Self {
        let d = cfg.token_dim;
        Self {
            norm_latent: LayerNorm::new(d),
            norm_input: LayerNorm::new(d),
            attn: Attention::new(rng, d, cfg.attention_heads, INIT_STD),
            norm_ff: LayerNorm::new(d),
            ff: FeedForward::new(rng, d, cfg.ff_hidden(), INIT_STD),
        }
    }

    fn forward(&self, latents: &Array2<F>, inputs: &ArrayView2<F>, batch: usize) -> (Array2<F>, CrossCache<F>) {
        let (lat_normed, ln_lat) = self.norm_latent.forward(&latents.view());
        let (in_normed, ln_in) = self.norm_input.forward(inputs);
        let (a, attn) = self.attn.forward(&lat_normed.view(), &in_normed.view(), batch);
        let mid = latents + &a;
        let (ff_in, ln_ff) = self.norm_ff.forward(&mid.view());
        let (f, ff) = self.ff.forward(&ff_in.view());
        let out = mid + &f;
        (
            out,
            CrossCache {
                ln_lat,
                lat_normed,
                ln_in,
                in_normed,
                attn,
                ln_ff,
                ff_in,
                ff,
            },
        )
    }

    /// Returns `(d latents, d inputs)`.
    fn backward(&self, c: &CrossCache<F>, dout: &Array2<F>, g: &mut CrossBlock<F>) -> (Array2<F>, Array2<F>) {
        let dff_in = self.ff.backward(&c.ff_in.view(), &c.ff, dout, &mut g.ff);
        let mut dmid = self.norm_ff.backward(&c.ln_ff, &dff_in, &mut g.norm_ff);
        dmid += dout;
        let (dlat_n, din_n) =
            self.attn
                .backward(&c.lat_normed.view(), &c.in_normed.view(), &c.attn, &dmid, &mut g.attn);
        let mut dlat = self.norm_latent.backward(&c.ln_lat, &dlat_n, &mut g.norm_latent);
        dlat += &dmid;
        let din = self.norm_input.backward(&c.ln_in, &din_n, &mut g.norm_input);
        (dlat, din)
    }
}

impl<F: Real> SelfBlock<F> {
    fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &EncoderConfig) -> Self {
        let d = cfg.token_dim;
        Self {
            norm: LayerNorm::new(d),
            attn: Attention::new(rng, d, cfg.attention_heads, INIT_STD),
            norm_ff: LayerNorm::new(d),
            ff: FeedForward::new(rng, d, cfg.ff_hidden(), INIT_STD),
        }
    }

    fn forward(&self, x: &Array2<F>, batch: usize) -> (Array2<F>, SelfCache<F>) {
        let (normed, ln) = self.norm.forward(&x.view());
        let (a, attn) = self.attn.forward(&normed.view(), &normed.view(), batch);
        let mid = x + &a;
        let (ff_in, ln_ff) = self.norm_ff.forward(&mid.view());
        let (f, ff) = self.ff.forward(&ff_in.view());
        let out = mid + &f;
        (
            out,
            SelfCache {
                ln,
                normed,
                attn,
                ln_ff,
                ff_in,
                ff,
            },
        )
    }

    fn backward(&self, c: &SelfCache<F>, dout: &Array2<F>, g: &mut SelfBlock<F>) -> Array2<F> {
        let dff_in = self.ff.backward(&c.ff_in.view(), &c.ff, dout, &mut g.ff);
        let mut dmid = self.norm_ff.backward(&c.ln_ff, &dff_in, &mut g.norm_ff);
        dmid += dout;
        let (dq, dkv) = self
            .attn
            .backward(&c.normed.view(), &c.normed.view(), &c.attn, &dmid, &mut g.attn);
        let dnormed = dq + &dkv;
        let mut dx = self.norm.backward(&c.ln, &dnormed, &mut g.norm);
        dx += &dmid;
        dx
    }
}

impl<F: Real> PerceiverParams<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &EncoderConfig) -> Self {
        let latent_queries = trunc_normal(rng, (cfg.latent_query_count, cfg.token_dim), INIT_STD);
        let cross = CrossBlock::new(rng, cfg);
        let layers = (0..cfg.encoder_depth).map(|_| SelfBlock::new(rng, cfg)).collect();
        let head = Linear::new(rng, cfg.token_dim, cfg.output_channels, INIT_STD);
        Self {
            latent_queries,
            cross,
            layers,
            head,
        }
    }

    pub fn latent_count(&self) -> usize {
        self.latent_queries.nrows()
    }

    /// Maps `batch` stacked token sequences to `batch` stacked output grids.
    pub(crate) fn forward(&self, inputs: &ArrayView2<F>, batch: usize) -> (Array2<F>, PerceiverCache<F>) {
        let t = self.latent_count();
        let mut latents = Array2::zeros((batch * t, self.latent_queries.ncols()));
        for b in 0..batch {
            latents
                .slice_mut(ndarray::s![b * t..(b + 1) * t, ..])
                .assign(&self.latent_queries);
        }
        let (mut z, cross) = self.cross.forward(&latents, inputs, batch);
        let mut layers = Vec::with_capacity(self.layers.len());
        for block in &self.layers {
            let (next, cache) = block.forward(&z, batch);
            layers.push(cache);
            z = next;
        }
        let out = self.head.forward(&z.view());
        (
            out,
            PerceiverCache {
                cross,
                layers,
                final_latents: z,
                batch,
            },
        )
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the stacked input tokens.
    pub(crate) fn backward(
        &self,
        cache: &PerceiverCache<F>,
        dout: &Array2<F>,
        g: &mut PerceiverParams<F>,
    ) -> Array2<F> {
        let mut dz = self.head.backward(&cache.final_latents.view(), dout, &mut g.head);
        for ((block, c), gb) in self.layers.iter().zip(&cache.layers).zip(g.layers.iter_mut()).rev() {
            dz = block.backward(c, &dz, gb);
        }
        let (dlat, din) = self.cross.backward(&cache.cross, &dz, &mut g.cross);
        let t = self.latent_count();
        for b in 0..cache.batch {
            g.latent_queries += &dlat.slice(ndarray::s![b * t..(b + 1) * t, ..]);
        }
        din
    }

    /// Parameter count of the latent self-attention blocks alone.
    pub fn layer_params(&self) -> usize {
        self.layers.iter().map(|l| l.num_params()).sum()
    }
}

impl<F: Real> Parameters<F> for CrossBlock<F> {
    fn walk(&self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.norm_latent.walk(&join(prefix, "norm_latent"), v);
        self.norm_input.walk(&join(prefix, "norm_input"), v);
        self.attn.walk(&join(prefix, "attn"), v);
        self.norm_ff.walk(&join(prefix, "norm_ff"), v);
        self.ff.walk(&join(prefix, "ff"), v);
    }

    fn walk_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut<F>) {
        self.norm_latent.walk_mut(&join(prefix, "norm_latent"), v);
        self.norm_input.walk_mut(&join(prefix, "norm_input"), v);
        self.attn.walk_mut(&join(prefix, "attn"), v);
        self.norm_ff.walk_mut(&join(prefix, "norm_ff"), v);
        self.ff.walk_mut(&join(prefix, "ff"), v);
    }

    fn zeros_like(&self) -> Self {
        Self {
            norm_latent: self.norm_latent.zeros_like(),
            norm_input: self.norm_input.zeros_like(),
            attn: self.attn.zeros_like(),
            norm_ff: self.norm_ff.zeros_like(),
            ff: self.ff.zeros_like(),
        }
    }
}

impl<F: Real> Parameters<F> for SelfBlock<F> {
    fn walk(&self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.norm.walk(&join(prefix, "norm"), v);
        self.attn.walk(&join(prefix, "attn"), v);
        self.norm_ff.walk(&join(prefix, "norm_ff"), v);
        self.ff.walk(&join(prefix, "ff"), v);
    }

    fn walk_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut<F>) {
        self.norm.walk_mut(&join(prefix, "norm"), v);
        self.attn.walk_mut(&join(prefix, "attn"), v);
        self.norm_ff.walk_mut(&join(prefix, "norm_ff"), v);
        self.ff.walk_mut(&join(prefix, "ff"), v);
    }

    fn zeros_like(&self) -> Self {
        Self {
            norm: self.norm.zeros_like(),
            attn: self.attn.zeros_like(),
            norm_ff: self.norm_ff.zeros_like(),
            ff: self.ff.zeros_like(),
        }
    }
}

impl<F: Real> Parameters<F> for PerceiverParams<F> {
    fn walk(&self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        walk2(&self.latent_queries, join(prefix, "latent_queries"), v);
        self.cross.walk(&join(prefix, "cross"), v);
        for (i, l) in self.layers.iter().enumerate() {
            l.walk(&join(prefix, &format!("layers.{i}")), v);
        }
        self.head.walk(&join(prefix, "head"), v);
    }

    fn walk_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut<F>) {
        walk2_mut(&mut self.latent_queries, join(prefix, "latent_queries"), v);
        self.cross.walk_mut(&join(prefix, "cross"), v);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.walk_mut(&join(prefix, &format!("layers.{i}")), v);
        }
        self.head.walk_mut(&join(prefix, "head"), v);
    }

    fn zeros_like(&self) -> Self {
        Self {
            latent_queries: Array2::zeros(self.latent_queries.raw_dim()),
            cross: self.cross.zeros_like(),
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            head: self.head.zeros_like(),
        }
    }
}
