//! Alignment losses: element-mean squared error and symmetric InfoNCE with
//! optional MixCo mixing.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::domain::{FeatureGrid, LossKind};
use crate::encoder::layers::cst;
use crate::encoder::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub temperature: f64,
    pub mixco_enabled: bool,
    pub mixco_alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::MseEncoder,
            temperature: 0.07,
            mixco_enabled: false,
            mixco_alpha: 0.2,
        }
    }
}

impl LossConfig {
    pub fn mse() -> Self {
        Self::default()
    }

    /// Contrastive loss with MixCo enabled.
    pub fn nce() -> Self {
        Self {
            kind: LossKind::NceEncoder,
            mixco_enabled: true,
            ..Self::default()
        }
    }

    /// Defaults for a loss kind.
    pub fn for_kind(kind: LossKind) -> Self {
        match kind {
            LossKind::MseEncoder => Self::mse(),
            LossKind::NceEncoder => Self::nce(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.mixco_enabled && !(self.mixco_alpha > 0.0) {
            return Err(Error::Config("mixco_alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Mean over all elements of squared differences.
pub fn mse_loss(pred: &FeatureGrid, target: &FeatureGrid) -> Result<f64> {
    if pred.shape() != target.shape() {
        let (a, b) = (pred.shape(), target.shape());
        return Err(Error::shape(&[b.0, b.1], &[a.0, a.1]));
    }
    let n = pred.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    let sum: f64 = pred
        .as_slice()
        .iter()
        .zip(target.as_slice())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Element-mean squared error and its gradient with respect to `out`.
pub(crate) fn mse_with_grad<F: Real>(out: &Array2<F>, target: &Array2<F>) -> Result<(F, Array2<F>)> {
    if out.dim() != target.dim() {
        return Err(Error::shape(target.shape(), out.shape()));
    }
    let n = cst::<F>(out.len().max(1) as f64);
    let diff = out - target;
    let loss = diff.iter().fold(F::zero(), |a, &d| a + d * d) / n;
    let grad = diff * (cst::<F>(2.0) / n);
    Ok((loss, grad))
}

/// MixCo draw: per-row mixing weight and partner permutation.
#[derive(Debug, Clone, PartialEq)]
pub struct MixcoDraw {
    pub weights: Vec<f64>,
    pub partners: Vec<usize>,
}

impl MixcoDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, n: usize, alpha: f64) -> Result<Self> {
        let beta = Beta::new(alpha, alpha).map_err(|e| Error::Config(format!("mixco beta: {e}")))?;
        let weights = (0..n).map(|_| beta.sample(rng)).collect();
        let mut partners: Vec<usize> = (0..n).collect();
        partners.shuffle(rng);
        Ok(Self { weights, partners })
    }

    /// Like [`MixcoDraw::sample`], but every row's partner shares its group
    /// label, so rows are only mixed within a group.
    pub fn sample_grouped<R: Rng + ?Sized>(rng: &mut R, groups: &[&str], alpha: f64) -> Result<Self> {
        let n = groups.len();
        let mut draw = Self::sample(rng, n, alpha)?;
        let mut members: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
        for (i, g) in groups.iter().enumerate() {
            members.entry(g).or_default().push(i);
        }
        for rows in members.values() {
            let mut shuffled = rows.clone();
            shuffled.shuffle(rng);
            for (&i, &j) in rows.iter().zip(&shuffled) {
                draw.partners[i] = j;
            }
        }
        Ok(draw)
    }

    pub fn targets(&self) -> Array2<f64> {
        let n = self.weights.len();
        let mut t = Array2::zeros((n, n));
        for i in 0..n {
            t[[i, i]] += self.weights[i];
            t[[i, self.partners[i]]] += 1.0 - self.weights[i];
        }
        t
    }
}

fn row_norms(x: &ArrayView2<f64>, what: &str) -> Result<Array1<f64>> {
    let norms = x.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0) || !n.is_finite()) {
        return Err(Error::Argument(format!("{what} row {i} has zero or non-finite norm")));
    }
    Ok(norms)
}

fn log_softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Symmetric InfoNCE between paired rows with its gradient with respect to
/// the brain rows. Rows are L2-normalized, logits are cosine similarities
/// divided by `temperature`, and the two cross-entropy directions are
/// averaged. With `mixco`, brain rows are mixed with their drawn partners and
/// the targets are softened by the same weights.
pub fn infonce_with_grad(
    brain: &ArrayView2<f64>,
    image: &ArrayView2<f64>,
    temperature: f64,
    mixco: Option<&MixcoDraw>,
) -> Result<(f64, Array2<f64>)> {
    let n = brain.nrows();
    check_pairs(brain, image, temperature)?;
    row_norms(brain, "brain")?;
    let Some(draw) = mixco else {
        return soft_infonce_with_grad(brain, image, temperature, &Array2::eye(n));
    };
    if draw.weights.len() != n {
        return Err(Error::Argument("mixco draw size differs from batch".into()));
    }
    let mut mixed = Array2::zeros(brain.raw_dim());
    for i in 0..n {
        let w = draw.weights[i];
        let mut row = mixed.row_mut(i);
        row.assign(&brain.row(i));
        row *= w;
        row.scaled_add(1.0 - w, &brain.row(draw.partners[i]));
    }
    let (loss, dmixed) = soft_infonce_with_grad(&mixed.view(), image, temperature, &draw.targets())?;
    let mut d = Array2::zeros(brain.raw_dim());
    for i in 0..n {
        let w = draw.weights[i];
        d.row_mut(i).scaled_add(w, &dmixed.row(i));
        d.row_mut(draw.partners[i]).scaled_add(1.0 - w, &dmixed.row(i));
    }
    Ok((loss, d))
}

fn check_pairs(brain: &ArrayView2<f64>, image: &ArrayView2<f64>, temperature: f64) -> Result<()> {
    let n = brain.nrows();
    if n < 2 {
        return Err(Error::Argument(format!("InfoNCE needs at least 2 pairs, got {n}")));
    }
    if image.dim() != brain.dim() {
        return Err(Error::shape(brain.shape(), image.shape()));
    }
    if !(temperature > 0.0) {
        return Err(Error::Argument("temperature must be positive".into()));
    }
    Ok(())
}

/// Symmetric InfoNCE against an explicit `n × n` target matrix whose rows
/// each sum to one. Used directly when mixing happens on the inputs.
pub fn soft_infonce_with_grad(
    brain: &ArrayView2<f64>,
    image: &ArrayView2<f64>,
    temperature: f64,
    targets: &Array2<f64>,
) -> Result<(f64, Array2<f64>)> {
    check_pairs(brain, image, temperature)?;
    let n = brain.nrows();
    if targets.dim() != (n, n) {
        return Err(Error::shape(&[n, n], targets.shape()));
    }
    let bnorm = row_norms(brain, "brain")?;
    let inorm = row_norms(image, "image")?;
    let bn = brain / &bnorm.view().insert_axis(Axis(1));
    let im = image / &inorm.view().insert_axis(Axis(1));
    let logits = bn.dot(&im.t()) / temperature;

    let lr = log_softmax_rows(&logits);
    let lc = log_softmax_rows(&logits.t().to_owned()).reversed_axes();
    let nf = n as f64;
    let loss_rows = -(&lr * targets).sum() / nf;
    let loss_cols = -(&lc * targets).sum() / nf;
    let loss = 0.5 * (loss_rows + loss_cols);

    let row_sums = targets.sum_axis(Axis(1));
    let col_sums = targets.sum_axis(Axis(0));
    let mut dlogits = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let a = lr[[i, j]].exp() * row_sums[i] - targets[[i, j]];
            let b = lc[[i, j]].exp() * col_sums[j] - targets[[i, j]];
            dlogits[[i, j]] = (a + b) / (2.0 * nf);
        }
    }
    let dbn = dlogits.dot(&im) / temperature;
    let mut dbrain = Array2::zeros(bn.raw_dim());
    for i in 0..n {
        let u = bn.row(i);
        let g = dbn.row(i);
        let proj = u.dot(&g);
        let mut out = dbrain.row_mut(i);
        out.assign(&g);
        out.scaled_add(-proj, &u);
        out /= bnorm[i];
    }
    Ok((loss, dbrain))
}

/// Symmetric InfoNCE loss value; see [`infonce_with_grad`].
pub fn infonce_loss<R: Rng + ?Sized>(
    brain: &ArrayView2<f64>,
    image: &ArrayView2<f64>,
    temperature: f64,
    rng: &mut R,
    mixco: Option<f64>,
) -> Result<f64> {
    let draw = match mixco {
        Some(alpha) => Some(MixcoDraw::sample(rng, brain.nrows(), alpha)?),
        None => None,
    };
    Ok(infonce_with_grad(brain, image, temperature, draw.as_ref())?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::new_rng;
    use ndarray::array;
    use rand_distr::StandardNormal;

    fn random(rng: &mut impl Rng, n: usize, d: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((n, d), || rng.sample(StandardNormal))
    }

    fn grid(values: Array2<f32>) -> FeatureGrid {
        FeatureGrid::new(values).unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = grid(Array2::ones((3, 4)));
        assert_eq!(mse_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(mse_loss(&a, &FeatureGrid::zeros(3, 4)).unwrap(), 1.0);
        assert!(mse_loss(&a, &FeatureGrid::zeros(4, 3)).is_err());
    }

    #[test]
    fn mse_matches_scalar_loop() {
        let mut rng = new_rng(3);
        let p = random(&mut rng, 4, 4).mapv(|v| v as f32);
        let t = random(&mut rng, 4, 4).mapv(|v| v as f32);
        let mut sum = 0.0f64;
        for i in 0..4 {
            for j in 0..4 {
                let d = p[[i, j]] as f64 - t[[i, j]] as f64;
                sum += d * d;
            }
        }
        let got = mse_loss(&grid(p), &grid(t)).unwrap();
        assert!((got - sum / 16.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation_drives_loss_to_zero() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let (loss, _) = infonce_with_grad(&x.view(), &x.view(), 1e-3, None).unwrap();
        assert!(loss < 1e-12, "{loss}");
    }

    #[test]
    fn identical_rows_give_log_n() {
        let x = Array2::from_elem((2, 3), 0.5);
        let (loss, _) = infonce_with_grad(&x.view(), &x.view(), 0.07, None).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        let x = Array2::from_elem((7, 3), -1.0);
        let (loss, _) = infonce_with_grad(&x.view(), &x.view(), 0.5, None).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    // Direct softmax cross-entropy with scalar loops.
    fn oracle(brain: &Array2<f64>, image: &Array2<f64>, tau: f64) -> f64 {
        let n = brain.nrows();
        let d = brain.ncols();
        let norm = |m: &Array2<f64>, i: usize| (0..d).map(|k| m[[i, k]] * m[[i, k]]).sum::<f64>().sqrt();
        let mut s = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                let mut dot = 0.0;
                for k in 0..d {
                    dot += brain[[i, k]] * image[[j, k]];
                }
                s[i][j] = dot / (norm(brain, i) * norm(image, j)) / tau;
            }
        }
        let mut forward = 0.0;
        let mut backward = 0.0;
        for i in 0..n {
            let zr: f64 = (0..n).map(|j| s[i][j].exp()).sum();
            forward -= (s[i][i].exp() / zr).ln();
            let zc: f64 = (0..n).map(|j| s[j][i].exp()).sum();
            backward -= (s[i][i].exp() / zc).ln();
        }
        (forward + backward) / (2.0 * n as f64)
    }

    #[test]
    fn matches_scalar_oracle() {
        let mut rng = new_rng(8);
        for _ in 0..20 {
            let b = random(&mut rng, 8, 4);
            let i = random(&mut rng, 8, 4);
            let (loss, _) = infonce_with_grad(&b.view(), &i.view(), 0.07, None).unwrap();
            assert!((loss - oracle(&b, &i, 0.07)).abs() < 1e-10);
        }
    }

    fn check_grad(b: &Array2<f64>, i: &Array2<f64>, draw: Option<&MixcoDraw>) {
        let (_, grad) = infonce_with_grad(&b.view(), &i.view(), 0.3, draw).unwrap();
        let eps = 1e-6;
        for idx in 0..b.len() {
            let mut bp = b.clone();
            let mut bm = b.clone();
            bp.as_slice_mut().unwrap()[idx] += eps;
            bm.as_slice_mut().unwrap()[idx] -= eps;
            let lp = infonce_with_grad(&bp.view(), &i.view(), 0.3, draw).unwrap().0;
            let lm = infonce_with_grad(&bm.view(), &i.view(), 0.3, draw).unwrap().0;
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (fd - grad.as_slice().unwrap()[idx]).abs() < 1e-7,
                "{fd} vs {}",
                grad.as_slice().unwrap()[idx]
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = new_rng(9);
        let b = random(&mut rng, 5, 3);
        let i = random(&mut rng, 5, 3);
        check_grad(&b, &i, None);
        let draw = MixcoDraw::sample(&mut rng, 5, 0.2).unwrap();
        check_grad(&b, &i, Some(&draw));
    }

    #[test]
    fn mixco_targets_are_distributions() {
        let mut rng = new_rng(10);
        let draw = MixcoDraw::sample(&mut rng, 16, 0.2).unwrap();
        let t = draw.targets();
        for s in t.sum_axis(Axis(1)) {
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(draw.weights.iter().all(|w| (0.0..=1.0).contains(w)));
        let b = random(&mut rng, 16, 8);
        let loss = infonce_loss(&b.view(), &b.view(), 0.07, &mut rng, Some(0.2)).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
    }

    #[test]
    fn infonce_errors() {
        let one = Array2::ones((1, 3));
        assert!(infonce_with_grad(&one.view(), &one.view(), 0.07, None).is_err());
        let mut z = Array2::ones((3, 3));
        z.row_mut(1).fill(0.0);
        let ok = Array2::ones((3, 3));
        assert!(infonce_with_grad(&z.view(), &ok.view(), 0.07, None).is_err());
        assert!(infonce_with_grad(&ok.view(), &z.view(), 0.07, None).is_err());
    }

    #[test]
    fn stacked_mse_gradient() {
        let out = array![[1.0f64, 2.0], [3.0, 4.0]];
        let target = Array2::zeros((2, 2));
        let (loss, grad) = mse_with_grad(&out, &target).unwrap();
        assert_eq!(loss, 7.5);
        assert_eq!(grad, array![[0.5, 1.0], [1.5, 2.0]]);
    }
}
