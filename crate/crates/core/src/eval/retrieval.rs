//! Top-1 cosine retrieval between paired embedding sets.
//!
//! Row `i` of the brain matrix is paired with row `i` of the image matrix.
//! A probe succeeds only when its partner's similarity is strictly greater
//! than every distractor's, so ties count as failures.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::FeatureGrid;
use crate::error::{Error, Result};
use crate::rng::new_rng;

pub const DEFAULT_POOL: usize = 300;
pub const DEFAULT_TRIALS: usize = 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub forward_acc: f64,
    pub backward_acc: f64,
    pub exemplar_acc: f64,
    pub pool_size: usize,
    pub trials: usize,
    pub count: usize,
}

impl RetrievalReport {
    pub fn to_kv(&self) -> String {
        format!(
            "forward_acc\t{}\nbackward_acc\t{}\nexemplar_acc\t{}\npool_size\t{}\ntrials\t{}\ncount\t{}\n",
            self.forward_acc, self.backward_acc, self.exemplar_acc, self.pool_size, self.trials, self.count
        )
    }
}

/// Flattens grids row-major into one embedding row each.
pub fn flatten_grids(grids: &[FeatureGrid]) -> Result<Array2<f64>> {
    let width = grids.first().map(|g| g.as_slice().len()).unwrap_or(0);
    let mut out = Array2::zeros((grids.len(), width));
    for (mut row, g) in out.rows_mut().into_iter().zip(grids) {
        if g.as_slice().len() != width {
            return Err(Error::shape(&[width], &[g.as_slice().len()]));
        }
        row.iter_mut().zip(g.as_slice()).for_each(|(o, &v)| *o = v as f64);
    }
    Ok(out)
}

fn normalized(x: ArrayView2<f64>, which: &str) -> Result<Array2<f64>> {
    let mut out = x.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Argument(format!("{which} row {i} cannot be normalized")));
        }
        row /= norm;
    }
    Ok(out)
}

/// `sim[i][j]` is the cosine similarity of brain row `i` and image row `j`.
pub fn cosine_similarity(brain: ArrayView2<f64>, image: ArrayView2<f64>) -> Result<Array2<f64>> {
    if brain.ncols() != image.ncols() {
        return Err(Error::shape(
            &[brain.nrows(), brain.ncols()],
            &[image.nrows(), image.ncols()],
        ));
    }
    let b = normalized(brain, "brain")?;
    let v = normalized(image, "image")?;
    Ok(b.dot(&v.t()))
}

/// Draws `pool - 1` distractor indices uniformly from `0..n` without `probe`.
pub fn draw_distractors<R: Rng + ?Sized>(rng: &mut R, n: usize, probe: usize, pool: usize) -> Vec<usize> {
    index::sample(rng, n - 1, pool - 1)
        .into_iter()
        .map(|j| if j >= probe { j + 1 } else { j })
        .collect()
}

fn check_pool(n: usize, pool: usize, trials: usize) -> Result<()> {
    if pool == 0 || pool > n {
        return Err(Error::Argument(format!("pool size {pool} must lie in 1..={n}")));
    }
    if trials == 0 {
        return Err(Error::Argument("trials must be positive".into()));
    }
    Ok(())
}

fn paired(brain: ArrayView2<f64>, image: ArrayView2<f64>) -> Result<()> {
    if brain.dim() != image.dim() {
        return Err(Error::shape(
            &[brain.nrows(), brain.ncols()],
            &[image.nrows(), image.ncols()],
        ));
    }
    Ok(())
}

/// Shared loop: `score(probe, candidate)` is the similarity seen by `probe`.
fn pooled_accuracy<R, S>(n: usize, pool: usize, trials: usize, rng: &mut R, score: S) -> f64
where
    R: Rng + ?Sized,
    S: Fn(usize, usize) -> f64,
{
    let mut hits = 0usize;
    for _ in 0..trials {
        for probe in 0..n {
            let own = score(probe, probe);
            let distractors = draw_distractors(rng, n, probe, pool);
            if distractors.iter().all(|&j| score(probe, j) < own) {
                hits += 1;
            }
        }
    }
    hits as f64 / (n * trials) as f64
}

/// Brain row as query, image rows as candidates.
pub fn retrieval_forward<R: Rng + ?Sized>(
    brain: ArrayView2<f64>,
    image: ArrayView2<f64>,
    pool: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    paired(brain, image)?;
    check_pool(brain.nrows(), pool, trials)?;
    let sim = cosine_similarity(brain, image)?;
    Ok(pooled_accuracy(brain.nrows(), pool, trials, rng, |p, j| sim[[p, j]]))
}

/// Image row as query, brain rows as candidates.
pub fn retrieval_backward<R: Rng + ?Sized>(
    brain: ArrayView2<f64>,
    image: ArrayView2<f64>,
    pool: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    paired(brain, image)?;
    check_pool(brain.nrows(), pool, trials)?;
    let sim = cosine_similarity(brain, image)?;
    Ok(pooled_accuracy(brain.nrows(), pool, trials, rng, |p, j| sim[[j, p]]))
}

/// Top-1 search of each brain row over the whole gallery.
pub fn retrieval_exemplar(brain: ArrayView2<f64>, gallery: ArrayView2<f64>) -> Result<f64> {
    paired(brain, gallery)?;
    let n = brain.nrows();
    if n == 0 {
        return Err(Error::Argument("empty embedding set".into()));
    }
    let sim = cosine_similarity(brain, gallery)?;
    let hits = (0..n)
        .filter(|&i| (0..n).all(|j| j == i || sim[[i, j]] < sim[[i, i]]))
        .count();
    Ok(hits as f64 / n as f64)
}

/// All three accuracies; forward and backward use independent streams
/// derived from `seed`.
pub fn retrieval_report(
    brain: ArrayView2<f64>,
    image: ArrayView2<f64>,
    pool: usize,
    trials: usize,
    seed: u64,
) -> Result<RetrievalReport> {
    let mut rng = new_rng(seed);
    let mut fwd_rng = rng.fork();
    let mut bwd_rng = rng.fork();
    Ok(RetrievalReport {
        forward_acc: retrieval_forward(brain, image, pool, trials, &mut fwd_rng)?,
        backward_acc: retrieval_backward(brain, image, pool, trials, &mut bwd_rng)?,
        exemplar_acc: retrieval_exemplar(brain, image)?,
        pool_size: pool,
        trials,
        count: brain.nrows(),
    })
}
