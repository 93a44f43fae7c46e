//! A synthetic generative world with known ground truth.
//!
//! Every subject `k` observes a shared gallery of latent feature grids
//! through its own linear map `G_k` plus isotropic noise:
//! `voxels = G_k · flatten(grid) + σ_k · ε`. When `voxel_dim ≥ latent_dim` the
//! map has orthonormal columns, otherwise orthonormal rows; either way its
//! pseudo-inverse is `G_kᵀ`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datahub::{write_locked, Dataset};
use crate::domain::{BrainSample, FeatureGrid, SubjectSpec};
use crate::error::{Error, Result};
use crate::eval::retrieval_forward;
use crate::rng::{new_rng, RngHandle};

/// Everything needed to regenerate a world bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub voxel_dims: Vec<usize>,
    pub grid_shape: (usize, usize),
    pub gallery_size: usize,
    pub noise: f64,
    pub seed: u64,
}

impl WorldSpec {
    pub fn build(&self) -> Result<SyntheticWorld> {
        let mut rng = new_rng(self.seed);
        make_world(
            self.voxel_dims.len(),
            &self.voxel_dims,
            self.grid_shape,
            self.gallery_size,
            self.noise,
            &mut rng,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        write_locked(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectWorld {
    pub spec: SubjectSpec,
    /// `voxel_dim × latent_dim`.
    pub map: Array2<f64>,
    pub noise: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub latent_dim: usize,
    pub grid_shape: (usize, usize),
    pub subjects: Vec<SubjectWorld>,
    pub gallery: Vec<FeatureGrid>,
}

/// Orthonormalizes the columns of a tall (or square) matrix in place with
/// modified Gram-Schmidt.
fn orthonormalize_columns(m: &mut Array2<f64>) -> Result<()> {
    for j in 0..m.ncols() {
        for i in 0..j {
            let (done, mut rest) = m.view_mut().split_at(Axis(1), j);
            let qi = done.column(i);
            let mut col = rest.column_mut(0);
            let proj = qi.dot(&col);
            col.scaled_add(-proj, &qi);
        }
        let mut col = m.column_mut(j);
        let norm = col.dot(&col).sqrt();
        if norm < 1e-10 {
            return Err(Error::Config("generative map is rank deficient".into()));
        }
        col /= norm;
    }
    Ok(())
}

fn random_map<R: Rng + ?Sized>(rng: &mut R, voxel_dim: usize, latent_dim: usize) -> Result<Array2<f64>> {
    let (tall, wide) = (voxel_dim.max(latent_dim), voxel_dim.min(latent_dim));
    let mut m = Array2::from_shape_fn((tall, wide), |_| StandardNormal.sample(&mut *rng));
    orthonormalize_columns(&mut m)?;
    Ok(if voxel_dim >= latent_dim {
        m
    } else {
        m.reversed_axes().as_standard_layout().to_owned()
    })
}

pub fn make_world<R: Rng + ?Sized>(
    k: usize,
    voxel_dims: &[usize],
    grid_shape: (usize, usize),
    gallery_size: usize,
    noise: f64,
    rng: &mut R,
) -> Result<SyntheticWorld> {
    if voxel_dims.len() != k || k == 0 {
        return Err(Error::Config(format!(
            "{k} subjects but {} voxel dims",
            voxel_dims.len()
        )));
    }
    if voxel_dims.contains(&0) || grid_shape.0 == 0 || grid_shape.1 == 0 || gallery_size == 0 {
        return Err(Error::Config("world dimensions must be positive".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!(
            "noise must be finite and non-negative, got {noise}"
        )));
    }
    let latent_dim = grid_shape.0 * grid_shape.1;
    let mut subjects = Vec::with_capacity(k);
    for (i, &dim) in voxel_dims.iter().enumerate() {
        subjects.push(SubjectWorld {
            spec: SubjectSpec::new(format!("S{}", i + 1), dim),
            map: random_map(rng, dim, latent_dim)?,
            noise,
        });
    }
    let gallery = (0..gallery_size)
        .map(|_| {
            let values = Array2::from_shape_fn(grid_shape, |_| {
                let v: f64 = StandardNormal.sample(&mut *rng);
                v as f32
            });
            FeatureGrid::new(values)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticWorld {
        latent_dim,
        grid_shape,
        subjects,
        gallery,
    })
}

impl SyntheticWorld {
    pub fn specs(&self) -> Vec<SubjectSpec> {
        self.subjects.iter().map(|s| s.spec.clone()).collect()
    }

    pub fn subject(&self, id: &str) -> Result<&SubjectWorld> {
        self.subjects
            .iter()
            .find(|s| s.spec.subject_id == id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    fn latent(&self, item: usize) -> ArrayView1<'_, f32> {
        let g = self.gallery[item].values();
        g.view()
            .into_shape_with_order(self.latent_dim)
            .expect("grids are contiguous")
    }

    /// One noisy observation of a gallery item by a subject.
    pub fn observe<R: Rng + ?Sized>(&self, subject: &SubjectWorld, item: usize, rng: &mut R) -> Vec<f32> {
        let z: Array1<f64> = self.latent(item).mapv(f64::from);
        let clean = subject.map.dot(&z);
        clean
            .iter()
            .map(|&v| {
                let e: f64 = if subject.noise > 0.0 {
                    StandardNormal.sample(&mut *rng)
                } else {
                    0.0
                };
                (v + subject.noise * e) as f32
            })
            .collect()
    }

    /// Observations of the given gallery items by one subject.
    pub fn render<R: Rng + ?Sized>(&self, subject_id: &str, items: &[usize], rng: &mut R) -> Result<Vec<BrainSample>> {
        let subject = self.subject(subject_id)?;
        items
            .iter()
            .map(|&item| {
                if item >= self.gallery.len() {
                    return Err(Error::Argument(format!("gallery item {item} out of range")));
                }
                Ok(BrainSample::new(subject_id, self.observe(subject, item, rng))
                    .with_stimulus(item.to_string())
                    .with_target(self.gallery[item].clone()))
            })
            .collect()
    }

    /// Pseudo-inverse decoding of a voxel vector.
    pub fn decode(&self, subject_id: &str, voxels: &[f32]) -> Result<Array1<f64>> {
        let subject = self.subject(subject_id)?;
        if voxels.len() != subject.spec.voxel_dim {
            return Err(Error::VoxelLength {
                subject: subject_id.to_string(),
                expected: subject.spec.voxel_dim,
                got: voxels.len(),
            });
        }
        let v = Array1::from_iter(voxels.iter().map(|&x| f64::from(x)));
        Ok(subject.map.t().dot(&v))
    }

    /// A train/test dataset: the last `test_size` items of a seeded
    /// permutation form the shared test split, and every subject observes
    /// every train item once.
    pub fn split_dataset(&self, test_size: usize, rng: &mut RngHandle) -> Result<Dataset> {
        let n = self.gallery.len();
        if test_size > n {
            return Err(Error::Argument(format!(
                "test size {test_size} exceeds gallery size {n}"
            )));
        }
        let order = index::sample(rng, n, n).into_vec();
        let (train_items, test_items) = order.split_at(n - test_size);
        let mut test_items = test_items.to_vec();
        test_items.sort_unstable();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for s in &self.subjects {
            let mut sub = rng.fork();
            train.extend(self.render(&s.spec.subject_id, train_items, &mut sub)?);
            test.extend(self.render(&s.spec.subject_id, &test_items, &mut sub)?);
        }
        Ok(Dataset {
            specs: self.specs(),
            train,
            test,
        })
    }
}

/// `n_per_subject` observations per subject of uniformly drawn gallery items.
pub fn sample_dataset<R: Rng + ?Sized>(world: &SyntheticWorld, n_per_subject: usize, rng: &mut R) -> Vec<BrainSample> {
    let mut out = Vec::with_capacity(n_per_subject * world.subjects.len());
    for s in &world.subjects {
        for _ in 0..n_per_subject {
            let item = rng.random_range(0..world.gallery.len());
            out.push(
                BrainSample::new(s.spec.subject_id.clone(), world.observe(s, item, rng))
                    .with_stimulus(item.to_string())
                    .with_target(world.gallery[item].clone()),
            );
        }
    }
    out
}

/// Forward retrieval accuracy of pseudo-inverse decoding on a fresh
/// observation of the whole gallery, averaged over subjects.
pub fn oracle_ceiling<R: Rng + ?Sized>(world: &SyntheticWorld, pool: usize, rng: &mut R) -> Result<f64> {
    let n = world.gallery.len();
    let mut truth = Array2::zeros((n, world.latent_dim));
    for (i, mut row) in truth.axis_iter_mut(Axis(0)).enumerate() {
        row.assign(&world.latent(i).mapv(f64::from));
    }
    let mut total = 0.0;
    for s in &world.subjects {
        let mut decoded = Array2::zeros((n, world.latent_dim));
        for (i, mut row) in decoded.axis_iter_mut(Axis(0)).enumerate() {
            let v = world.observe(s, i, rng);
            row.assign(&world.decode(&s.spec.subject_id, &v)?);
        }
        total += retrieval_forward(decoded.view(), truth.view(), pool, 1, rng)?;
    }
    Ok(total / world.subjects.len() as f64)
}

/// Distinct gallery items referenced by a sample list.
pub fn stimulus_items(samples: &[BrainSample]) -> BTreeSet<usize> {
    samples
        .iter()
        .filter_map(|s| s.stimulus_id.as_deref()?.parse().ok())
        .collect()
}
