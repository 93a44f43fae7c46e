//! Subject tokenizers and the shared latent-bottleneck encoder.
//!
//! Each subject owns a dense projection from its voxel vector to `L` tokens of
//! width `D` plus `M` learnable subject tokens that are prepended to them. The
//! resulting `(M + L) × D` sequence goes through [`PerceiverParams`], whose
//! latent queries fix the output shape to `T_out × D_t` for every subject.

mod gradcheck;
pub mod layers;
pub mod perceiver;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;

pub use gradcheck::gradient_check;
pub use layers::{Parameters, Real};
pub use perceiver::PerceiverParams;

use crate::domain::{EncoderConfig, FeatureGrid, SubjectSpec};
use crate::error::{Error, Result};
use layers::{cst, join, trunc_normal, walk2, walk2_mut, Linear, ParamVisitor, ParamVisitorMut};
use perceiver::{PerceiverCache, INIT_STD};

/// Per-subject projection and learnable subject tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTokenizerParams<F> {
    /// `voxel_dim → L·D`, reshaped row-major to `L × D`.
    pub projection: Linear<F>,
    /// `M × D`
    pub subject_tokens: Array2<F>,
}

impl<F: Real> SubjectTokenizerParams<F> {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, cfg: &EncoderConfig, voxel_dim: usize) -> Self {
        Self {
            projection: Linear::new(rng, voxel_dim, cfg.token_count * cfg.token_dim, INIT_STD),
            subject_tokens: trunc_normal(rng, (cfg.subject_token_count, cfg.token_dim), INIT_STD),
        }
    }

    pub fn voxel_dim(&self) -> usize {
        self.projection.weight.nrows()
    }
}

impl<F: Real> Parameters<F> for SubjectTokenizerParams<F> {
    fn walk(&self, prefix: &str, v: &mut dyn ParamVisitor<F>) {
        self.projection.walk(&join(prefix, "projection"), v);
        walk2(&self.subject_tokens, join(prefix, "subject_tokens"), v);
    }

    fn walk_mut(&mut self, prefix: &str, v: &mut dyn ParamVisitorMut<F>) {
        self.projection.walk_mut(&join(prefix, "projection"), v);
        walk2_mut(&mut self.subject_tokens, join(prefix, "subject_tokens"), v);
    }

    fn zeros_like(&self) -> Self {
        Self {
            projection: self.projection.zeros_like(),
            subject_tokens: Array2::zeros(self.subject_tokens.raw_dim()),
        }
    }
}

/// Complete encoder: configuration, one tokenizer per registered subject and
/// the shared perceiver.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState<F = f32> {
    pub config: EncoderConfig,
    pub tokenizers: BTreeMap<String, SubjectTokenizerParams<F>>,
    pub perceiver: PerceiverParams<F>,
}

/// Gradient buffers shaped like [`EncoderState`]; tokenizers appear only for
/// subjects present in the batch.
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub tokenizers: BTreeMap<String, SubjectTokenizerParams<F>>,
    pub perceiver: PerceiverParams<F>,
}

pub const TOKENIZER_PREFIX: &str = "tokenizers";
pub const PERCEIVER_PREFIX: &str = "perceiver";

fn walk_all<F: Real>(
    tokenizers: &BTreeMap<String, SubjectTokenizerParams<F>>,
    perceiver: &PerceiverParams<F>,
    v: &mut dyn ParamVisitor<F>,
) {
    for (id, t) in tokenizers {
        t.walk(&format!("{TOKENIZER_PREFIX}.{id}"), v);
    }
    perceiver.walk(PERCEIVER_PREFIX, v);
}

impl<F: Real> Gradients<F> {
    pub fn walk(&self, v: &mut dyn ParamVisitor<F>) {
        walk_all(&self.tokenizers, &self.perceiver, v);
    }

    pub fn walk_mut(&mut self, v: &mut dyn ParamVisitorMut<F>) {
        for (id, t) in self.tokenizers.iter_mut() {
            t.walk_mut(&format!("{TOKENIZER_PREFIX}.{id}"), v);
        }
        self.perceiver.walk_mut(PERCEIVER_PREFIX, v);
    }

    /// Named flattened gradient tensors.
    pub fn named(&self) -> BTreeMap<String, Vec<F>> {
        let mut out = BTreeMap::new();
        self.walk(&mut |name: &str, _: &[usize], x: &[F]| {
            out.insert(name.to_string(), x.to_vec());
        });
        out
    }
}

/// Stacked token sequences of a batch plus what backward needs.
pub(crate) struct TokenBatch<F> {
    tokens: Array2<F>,
    // subject id, batch positions, stacked voxels
    groups: Vec<(String, Vec<usize>, Array2<F>)>,
}

pub fn init_encoder<R: Rng + ?Sized>(
    config: &EncoderConfig,
    specs: &[SubjectSpec],
    rng: &mut R,
) -> Result<EncoderState<f32>> {
    EncoderState::init(config, specs, rng)
}

impl<F: Real> EncoderState<F> {
    pub fn init<R: Rng + ?Sized>(config: &EncoderConfig, specs: &[SubjectSpec], rng: &mut R) -> Result<Self> {
        config.validate()?;
        if specs.is_empty() {
            return Err(Error::Argument("at least one subject is required".into()));
        }
        let mut seen = BTreeSet::new();
        for spec in specs {
            if !seen.insert(spec.subject_id.as_str()) {
                return Err(Error::DuplicateSubject(spec.subject_id.clone()));
            }
            if spec.voxel_dim == 0 {
                return Err(Error::Config(format!("subject `{}` has voxel_dim 0", spec.subject_id)));
            }
        }
        // perceiver first so its draws do not depend on the subject set
        let perceiver = PerceiverParams::new(rng, config);
        let mut tokenizers = BTreeMap::new();
        for spec in specs {
            tokenizers.insert(
                spec.subject_id.clone(),
                SubjectTokenizerParams::new(rng, config, spec.voxel_dim),
            );
        }
        Ok(Self {
            config: config.clone(),
            tokenizers,
            perceiver,
        })
    }

    /// Adds a freshly initialized tokenizer for a new subject.
    pub fn register_subject<R: Rng + ?Sized>(&mut self, spec: &SubjectSpec, rng: &mut R) -> Result<()> {
        if self.tokenizers.contains_key(&spec.subject_id) {
            return Err(Error::DuplicateSubject(spec.subject_id.clone()));
        }
        if spec.voxel_dim == 0 {
            return Err(Error::Config(format!("subject `{}` has voxel_dim 0", spec.subject_id)));
        }
        self.tokenizers.insert(
            spec.subject_id.clone(),
            SubjectTokenizerParams::new(rng, &self.config, spec.voxel_dim),
        );
        Ok(())
    }

    pub fn specs(&self) -> Vec<SubjectSpec> {
        self.tokenizers
            .iter()
            .map(|(id, t)| SubjectSpec::new(id.clone(), t.voxel_dim()))
            .collect()
    }

    pub fn subject_ids(&self) -> Vec<String> {
        self.tokenizers.keys().cloned().collect()
    }

    pub fn count_parameters(&self) -> usize {
        let mut n = 0;
        self.walk(&mut |_: &str, _: &[usize], x: &[F]| n += x.len());
        n
    }

    pub fn walk(&self, v: &mut dyn ParamVisitor<F>) {
        walk_all(&self.tokenizers, &self.perceiver, v);
    }

    pub fn walk_mut(&mut self, v: &mut dyn ParamVisitorMut<F>) {
        for (id, t) in self.tokenizers.iter_mut() {
            t.walk_mut(&format!("{TOKENIZER_PREFIX}.{id}"), v);
        }
        self.perceiver.walk_mut(PERCEIVER_PREFIX, v);
    }

    /// Named parameter tensors in canonical order, widened to f64.
    pub fn named_f64(&self) -> BTreeMap<String, (Vec<usize>, Vec<f64>)> {
        let mut out = BTreeMap::new();
        self.walk(&mut |name: &str, shape: &[usize], x: &[F]| {
            let vals = x.iter().map(|v| v.to_f64().expect("finite")).collect();
            out.insert(name.to_string(), (shape.to_vec(), vals));
        });
        out
    }

    /// Builds a state from named parameter tensors. Every parameter implied by
    /// `config` and `specs` must be present with the right size.
    pub fn from_named(
        config: &EncoderConfig,
        specs: &[SubjectSpec],
        named: &BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let mut scratch = crate::rng::new_rng(0);
        let mut state = Self::init(config, specs, &mut scratch)?;
        let mut problem = None;
        state.walk_mut(&mut |name: &str, x: &mut [F]| match named.get(name) {
            Some(vals) if vals.len() == x.len() => {
                for (d, &s) in x.iter_mut().zip(vals) {
                    *d = cst(s);
                }
            }
            Some(vals) => {
                problem.get_or_insert_with(|| format!("`{name}` has {} values, expected {}", vals.len(), x.len()));
            }
            None => {
                problem.get_or_insert_with(|| format!("missing parameter `{name}`"));
            }
        });
        match problem {
            Some(p) => Err(Error::Format(p)),
            None => Ok(state),
        }
    }

    /// Converts to another element type.
    pub fn cast<G: Real>(&self) -> EncoderState<G> {
        let named = self.named_f64().into_iter().map(|(k, (_, v))| (k, v)).collect();
        EncoderState::<G>::from_named(&self.config, &self.specs(), &named).expect("same structure")
    }

    pub fn zero_gradients(&self) -> Gradients<F> {
        Gradients {
            tokenizers: BTreeMap::new(),
            perceiver: self.perceiver.zeros_like(),
        }
    }

    fn tokenizer(&self, subject_id: &str) -> Result<&SubjectTokenizerParams<F>> {
        self.tokenizers
            .get(subject_id)
            .ok_or_else(|| Error::UnknownSubject(subject_id.to_string()))
    }

    /// Token sequence `(M + L) × D` for one voxel vector: subject tokens first,
    /// then the projected brain tokens.
    pub fn tokenize(&self, subject_id: &str, voxels: &[f32]) -> Result<Array2<F>> {
        let batch = self.tokenize_batch(&[(subject_id, voxels)])?;
        Ok(batch.tokens)
    }

    pub(crate) fn tokenize_batch(&self, items: &[(&str, &[f32])]) -> Result<TokenBatch<F>> {
        let cfg = &self.config;
        let (m, l, d) = (cfg.subject_token_count, cfg.token_count, cfg.token_dim);
        let n = m + l;
        let mut positions: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, (id, voxels)) in items.iter().enumerate() {
            let tok = self.tokenizer(id)?;
            if voxels.len() != tok.voxel_dim() {
                return Err(Error::VoxelLength {
                    subject: id.to_string(),
                    expected: tok.voxel_dim(),
                    got: voxels.len(),
                });
            }
            positions.entry(id).or_default().push(i);
        }
        let mut tokens = Array2::zeros((items.len() * n, d));
        let mut groups = Vec::with_capacity(positions.len());
        for (id, pos) in positions {
            let tok = &self.tokenizers[id];
            let vd = tok.voxel_dim();
            let mut voxels = Array2::zeros((pos.len(), vd));
            for (r, &p) in pos.iter().enumerate() {
                for (dst, &src) in voxels.row_mut(r).iter_mut().zip(items[p].1) {
                    *dst = cst(src as f64);
                }
            }
            let projected = tok.projection.forward(&voxels.view());
            for (r, &p) in pos.iter().enumerate() {
                let base = p * n;
                tokens.slice_mut(s![base..base + m, ..]).assign(&tok.subject_tokens);
                let row = projected.row(r);
                let brain = row.into_shape_with_order((l, d)).expect("L·D projection");
                tokens.slice_mut(s![base + m..base + n, ..]).assign(&brain);
            }
            groups.push((id.to_string(), pos, voxels));
        }
        Ok(TokenBatch { tokens, groups })
    }

    /// Encodes one token sequence of any length into a `T_out × D_t` grid.
    pub fn encode(&self, tokens: &ArrayView2<F>) -> Result<Array2<F>> {
        if tokens.ncols() != self.config.token_dim {
            return Err(Error::shape(
                &[tokens.nrows(), self.config.token_dim],
                &[tokens.nrows(), tokens.ncols()],
            ));
        }
        if tokens.nrows() == 0 {
            return Err(Error::Argument("empty token sequence".into()));
        }
        Ok(self.perceiver.forward(tokens, 1).0)
    }

    /// Stacked `(B · T_out) × D_t` output for a batch.
    pub fn forward_stacked(&self, items: &[(&str, &[f32])]) -> Result<Array2<F>> {
        if items.is_empty() {
            return Ok(Array2::zeros((0, self.config.output_channels)));
        }
        let batch = self.tokenize_batch(items)?;
        Ok(self.perceiver.forward(&batch.tokens.view(), items.len()).0)
    }

    pub fn forward_raw(&self, subject_id: &str, voxels: &[f32]) -> Result<Array2<F>> {
        self.forward_stacked(&[(subject_id, voxels)])
    }

    /// Runs forward and backward. `loss` receives the stacked output and
    /// returns the loss value and its gradient with respect to that output.
    pub fn backprop<L>(&self, items: &[(&str, &[f32])], loss: L) -> Result<(F, Gradients<F>)>
    where
        L: FnOnce(&Array2<F>) -> Result<(F, Array2<F>)>,
    {
        if items.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let batch = self.tokenize_batch(items)?;
        let (out, cache): (Array2<F>, PerceiverCache<F>) = self.perceiver.forward(&batch.tokens.view(), items.len());
        let (value, dout) = loss(&out)?;
        if dout.dim() != out.dim() {
            return Err(Error::shape(out.shape(), dout.shape()));
        }
        let mut grads = self.zero_gradients();
        let dtokens = self.perceiver.backward(&cache, &dout, &mut grads.perceiver);
        let cfg = &self.config;
        let (m, l, d) = (cfg.subject_token_count, cfg.token_count, cfg.token_dim);
        let n = m + l;
        for (id, pos, voxels) in &batch.groups {
            let tok = &self.tokenizers[id];
            let g = grads.tokenizers.entry(id.clone()).or_insert_with(|| tok.zeros_like());
            let mut dproj = Array2::zeros((pos.len(), l * d));
            for (r, &p) in pos.iter().enumerate() {
                let base = p * n;
                g.subject_tokens += &dtokens.slice(s![base..base + m, ..]);
                let src = dtokens.slice(s![base + m..base + n, ..]);
                let mut dst = dproj.row_mut(r).into_shape_with_order((l, d)).expect("L·D projection");
                dst.assign(&src);
            }
            g.projection.weight += &voxels.t().dot(&dproj);
            g.projection.bias += &dproj.sum_axis(Axis(0));
        }
        Ok((value, grads))
    }
}

impl EncoderState<f32> {
    pub fn forward(&self, subject_id: &str, voxels: &[f32]) -> Result<FeatureGrid> {
        FeatureGrid::new(self.forward_raw(subject_id, voxels)?)
    }

    /// One grid per item, identical to calling [`Self::forward`] on each.
    pub fn forward_batch(&self, items: &[(&str, &[f32])]) -> Result<Vec<FeatureGrid>> {
        let t = self.config.latent_query_count;
        let out = self.forward_stacked(items)?;
        (0..items.len())
            .map(|b| FeatureGrid::new(out.slice(s![b * t..(b + 1) * t, ..]).to_owned()))
            .collect()
    }
}

pub fn count_parameters<F: Real>(state: &EncoderState<F>) -> usize {
    state.count_parameters()
}
