//! Synthetic embedding sets with controllable geometry.
//!
//! All generators are pure functions of their arguments and seed. Noise is
//! unit isotropic Gaussian; values are rounded to `f32` so in-memory data is
//! identical to what the `EMB1` files hold.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::embedding::{write_batch, EmbeddingBatch, SplitSet};
use crate::error::{Error, Result};
use crate::manifest::{ProtocolKind, ProtocolManifest, SplitPaths, TaskSpec, MANIFEST_FORMAT_VERSION};

fn gaussian_vec(dim: usize, rng: &mut ChaCha8Rng) -> Array1<f64> {
    Array1::from_shape_simple_fn(dim, || StandardNormal.sample(rng))
}

/// `count` orthonormal directions in `dim` dimensions (Gram-Schmidt on
/// Gaussian draws).
pub fn orthonormal_directions(count: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Array1<f64>>> {
    if count > dim {
        return Err(Error::InvalidArgument(format!(
            "cannot place {count} orthonormal centers in {dim} dimensions"
        )));
    }
    let mut basis: Vec<Array1<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian_vec(dim, rng);
        for b in &basis {
            let proj = v.dot(b);
            v.scaled_add(-proj, b);
        }
        let norm = v.dot(&v).sqrt();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    Ok(basis)
}

fn sample_around(
    centers: &[(Array1<f64>, usize)],
    per_center: usize,
    classes: usize,
    rng: &mut ChaCha8Rng,
) -> Result<EmbeddingBatch> {
    let dim = centers[0].0.len();
    let n = centers.len() * per_center;
    let mut v = Array2::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut row = 0;
    for _ in 0..per_center {
        for (center, label) in centers {
            let noise = gaussian_vec(dim, rng);
            v.row_mut(row).assign(&(center + &noise));
            labels.push(*label);
            row += 1;
        }
    }
    Ok(EmbeddingBatch::new(v, labels, classes)?.quantize_f32())
}

/// Class `y` centered at `separation * u_y` with orthonormal `u_y`. Each split
/// holds `per_class` samples of every class, interleaved by class.
pub fn gen_gaussian_mixture(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<SplitSet> {
    if classes < 2 || dim < 2 {
        return Err(Error::InvalidArgument(
            "gaussian mixture needs at least 2 classes and 2 dims".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<(Array1<f64>, usize)> = orthonormal_directions(classes, dim, &mut rng)?
        .into_iter()
        .enumerate()
        .map(|(y, u)| (u * separation, y))
        .collect();
    Ok(SplitSet {
        train: sample_around(&centers, per_class, classes, &mut rng)?,
        validation: sample_around(&centers, per_class, classes, &mut rng)?,
        test: sample_around(&centers, per_class, classes, &mut rng)?,
    })
}

/// Fixed XOR geometry: quadrant centers `separation * (+-a +- b)` in the
/// plane spanned by orthonormal `a`, `b`. Class 0 owns `(+,+)` and `(-,-)`,
/// class 1 owns `(+,-)` and `(-,+)`.
#[derive(Debug, Clone)]
pub struct XorLayout {
    clusters: Vec<(Array1<f64>, usize)>,
}

impl XorLayout {
    pub fn new(dim: usize, separation: f64, layout_seed: u64) -> Result<Self> {
        if dim < 2 {
            return Err(Error::InvalidArgument("XOR layout needs dim >= 2".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(layout_seed);
        let dirs = orthonormal_directions(2, dim, &mut rng)?;
        let (a, b) = (&dirs[0], &dirs[1]);
        let corner = |sa: f64, sb: f64| (a * sa + b * sb) * separation;
        Ok(Self {
            clusters: vec![
                (corner(1.0, 1.0), 0),
                (corner(1.0, -1.0), 1),
                (corner(-1.0, -1.0), 0),
                (corner(-1.0, 1.0), 1),
            ],
        })
    }

    /// The four cluster centers with their labels.
    pub fn clusters(&self) -> &[(Array1<f64>, usize)] {
        &self.clusters
    }

    /// `per_class` samples per class, split evenly between its two clusters
    /// (the first cluster takes the odd one out).
    pub fn sample(&self, per_class: usize, rng: &mut ChaCha8Rng) -> Result<EmbeddingBatch> {
        let dim = self.clusters[0].0.len();
        let mut v = Array2::zeros((2 * per_class, dim));
        let mut labels = Vec::with_capacity(2 * per_class);
        for i in 0..2 * per_class {
            // cycle through clusters 0,1,2,3 so classes alternate
            let (center, label) = &self.clusters[i % 4];
            v.row_mut(i).assign(&(center + &gaussian_vec(dim, rng)));
            labels.push(*label);
        }
        Ok(EmbeddingBatch::new(v, labels, 2)?.quantize_f32())
    }
}

pub const DEFAULT_XOR_SEPARATION: f64 = 3.0;

/// Two classes in an XOR arrangement; not linearly separable.
pub fn gen_xor_mixture(dim: usize, per_class: usize, separation: f64, seed: u64) -> Result<SplitSet> {
    let layout = XorLayout::new(dim, separation, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Ok(SplitSet {
        train: layout.sample(per_class, &mut rng)?,
        validation: layout.sample(per_class, &mut rng)?,
        test: layout.sample(per_class, &mut rng)?,
    })
}

/// A manifest with its task data held in memory.
#[derive(Debug, Clone)]
pub struct SyntheticProtocol {
    pub manifest: ProtocolManifest,
    pub tasks: Vec<SplitSet>,
}

impl SyntheticProtocol {
    fn build(
        protocol: ProtocolKind,
        classes: usize,
        dim: usize,
        tasks: Vec<SplitSet>,
        subsets: Vec<Option<Vec<usize>>>,
        tags: Vec<Option<String>>,
    ) -> Result<Self> {
        let specs = subsets
            .into_iter()
            .zip(tags)
            .enumerate()
            .map(|(i, (class_subset, domain_tag))| TaskSpec {
                task_id: i + 1,
                splits: Some(SplitPaths {
                    train: PathBuf::from(format!("task{}_train.emb", i + 1)),
                    validation: PathBuf::from(format!("task{}_validation.emb", i + 1)),
                    test: PathBuf::from(format!("task{}_test.emb", i + 1)),
                }),
                folds: vec![],
                class_subset,
                domain_tag,
            })
            .collect();
        let manifest = ProtocolManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            protocol,
            total_classes: classes,
            embedding_dim: dim,
            tasks: specs,
            run_seeds: vec![1, 2, 3, 4, 5],
            fold_count: None,
            base_dir: PathBuf::new(),
        };
        manifest.validate()?;
        Ok(Self { manifest, tasks })
    }

    /// Writes every split as `EMB1` plus `manifest.json` into `dir`; returns
    /// the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        for (spec, data) in self.manifest.tasks.iter().zip(&self.tasks) {
            let paths = spec.splits.as_ref().expect("synthetic tasks have one split set");
            write_batch(&data.train, dir.join(&paths.train))?;
            write_batch(&data.validation, dir.join(&paths.validation))?;
            write_batch(&data.test, dir.join(&paths.test))?;
        }
        let path = dir.join("manifest.json");
        self.manifest.save(&path)?;
        Ok(path)
    }
}

fn split_classes(classes: usize, tasks: usize) -> Result<Vec<Vec<usize>>> {
    if tasks < 2 || tasks > classes {
        return Err(Error::InvalidArgument(format!(
            "cannot spread {classes} classes over {tasks} tasks"
        )));
    }
    let base = classes / tasks;
    let extra = classes % tasks;
    let mut next = 0;
    Ok((0..tasks)
        .map(|t| {
            let n = base + usize::from(t < extra);
            let s = (next..next + n).collect();
            next += n;
            s
        })
        .collect())
}

/// A Gaussian mixture cut into `tasks` class-incremental tasks of contiguous
/// class blocks.
pub fn gen_cil_protocol(
    classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    tasks: usize,
    seed: u64,
) -> Result<SyntheticProtocol> {
    let data = gen_gaussian_mixture(classes, dim, per_class, separation, seed)?;
    let subsets = split_classes(classes, tasks)?;
    let task_data = subsets
        .iter()
        .map(|s| data.map(|b| b.filter_labels(|l| s.contains(&l))))
        .collect();
    SyntheticProtocol::build(
        ProtocolKind::Cil,
        classes,
        dim,
        task_data,
        subsets.into_iter().map(Some).collect(),
        vec![None; tasks],
    )
}

/// XOR data as a domain-incremental stream: `tasks` independent draws from
/// one fixed layout.
pub fn gen_xor_protocol(
    dim: usize,
    per_class: usize,
    separation: f64,
    tasks: usize,
    seed: u64,
) -> Result<SyntheticProtocol> {
    if tasks < 2 {
        return Err(Error::InvalidArgument("need at least 2 tasks".into()));
    }
    let layout = XorLayout::new(dim, separation, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut task_data = Vec::with_capacity(tasks);
    for _ in 0..tasks {
        task_data.push(SplitSet {
            train: layout.sample(per_class, &mut rng)?,
            validation: layout.sample(per_class, &mut rng)?,
            test: layout.sample(per_class, &mut rng)?,
        });
    }
    let tags = (1..=tasks).map(|t| Some(format!("draw-{t}"))).collect();
    SyntheticProtocol::build(ProtocolKind::Dil, 2, dim, task_data, vec![None; tasks], tags)
}

/// Shared class directions in every domain; domain `d` adds an offset of
/// norm `shift` along its own random direction.
#[allow(clippy::too_many_arguments)]
pub fn gen_domain_shifted(
    classes: usize,
    dim: usize,
    domains: usize,
    per_class: usize,
    separation: f64,
    shift: f64,
    seed: u64,
) -> Result<SyntheticProtocol> {
    if classes < 2 || dim < 2 || domains < 2 {
        return Err(Error::InvalidArgument(
            "domain-shifted data needs >= 2 classes, dims and domains".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs = orthonormal_directions(classes, dim, &mut rng)?;
    let mut task_data = Vec::with_capacity(domains);
    for _ in 0..domains {
        let mut offset = gaussian_vec(dim, &mut rng);
        let norm = offset.dot(&offset).sqrt();
        offset *= shift / norm;
        let centers: Vec<(Array1<f64>, usize)> = dirs
            .iter()
            .enumerate()
            .map(|(y, u)| (u * separation + &offset, y))
            .collect();
        task_data.push(SplitSet {
            train: sample_around(&centers, per_class, classes, &mut rng)?,
            validation: sample_around(&centers, per_class, classes, &mut rng)?,
            test: sample_around(&centers, per_class, classes, &mut rng)?,
        });
    }
    let tags = (1..=domains).map(|d| Some(format!("domain-{d}"))).collect();
    SyntheticProtocol::build(
        ProtocolKind::Dil,
        classes,
        dim,
        task_data,
        vec![Some((0..classes).collect()); domains],
        tags,
    )
}

/// Shuffles a batch's rows; handy for building streams in tests.
pub fn shuffled(batch: &EmbeddingBatch, seed: u64) -> EmbeddingBatch {
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    batch.select(&idx)
}
