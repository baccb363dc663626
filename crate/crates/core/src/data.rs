//! Dataset ingestion, normalization, stratified splitting, and synthetic
//! multi-view generation.
//!
//! On-disk layout is deliberately plain: one float CSV per view (no header),
//! a single-column integer CSV of labels, and a JSON manifest tying them
//! together.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, DetRng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Per-view feature matrices plus one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiViewBatch<R: Scalar> {
    pub views: Vec<Tensor<R>>,
    pub labels: Tensor<R>,
    pub view_dims: Vec<usize>,
    pub num_classes: usize,
}

impl<R: Scalar> MultiViewBatch<R> {
    pub fn num_instances(&self) -> usize {
        self.labels.rows()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    /// Class index of instance `n`.
    pub fn class_of(&self, n: usize) -> usize {
        self.labels
            .row(n)
            .iter()
            .position(|v| *v == R::one())
            .expect("valid one-hot label")
    }

    /// New batch containing the given instances, in the given order.
    pub fn subset(&self, indices: &[usize]) -> MultiViewBatch<R> {
        let views = self
            .views
            .iter()
            .map(|view| {
                let d = view.cols();
                let mut vals = Vec::with_capacity(indices.len() * d);
                for &i in indices {
                    vals.extend_from_slice(view.row(i));
                }
                Tensor::new(vec![indices.len(), d], vals).unwrap()
            })
            .collect();
        let k = self.num_classes;
        let mut lab = Vec::with_capacity(indices.len() * k);
        for &i in indices {
            lab.extend_from_slice(self.labels.row(i));
        }
        MultiViewBatch {
            views,
            labels: Tensor::new(vec![indices.len(), k], lab).unwrap(),
            view_dims: self.view_dims.clone(),
            num_classes: k,
        }
    }
}

/// One view's file entry in a manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ViewSpec {
    pub name: String,
    pub file: String,
    pub dim: usize,
}

/// JSON manifest describing a dataset on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub views: Vec<ViewSpec>,
    pub labels_file: String,
}

/// Per-feature min/max used by min-max normalization, recorded per view.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mins: Vec<Vec<f64>>,
    pub maxs: Vec<Vec<f64>>,
}

impl Normalizer {
    /// Record per-column min and max of each view.
    pub fn fit<R: Scalar>(batch: &MultiViewBatch<R>) -> Self {
        let mut mins = Vec::new();
        let mut maxs = Vec::new();
        for view in &batch.views {
            let (n, d) = (view.rows(), view.cols());
            let mut lo = vec![f64::INFINITY; d];
            let mut hi = vec![f64::NEG_INFINITY; d];
            for i in 0..n {
                for j in 0..d {
                    let v = view.values()[i * d + j].to_f64_lossy();
                    lo[j] = lo[j].min(v);
                    hi[j] = hi[j].max(v);
                }
            }
            mins.push(lo);
            maxs.push(hi);
        }
        Normalizer { mins, maxs }
    }

    /// Map features to [0,1] per column; constant columns map to 0. With
    /// `clip`, out-of-range values (held-out data) are clamped to [0,1].
    pub fn apply<R: Scalar>(&self, batch: &MultiViewBatch<R>, clip: bool) -> MultiViewBatch<R> {
        let views = batch
            .views
            .iter()
            .enumerate()
            .map(|(v, view)| {
                let d = view.cols();
                let mut out = view.clone();
                for (idx, val) in out.values_mut().iter_mut().enumerate() {
                    let j = idx % d;
                    let lo = self.mins[v][j];
                    let hi = self.maxs[v][j];
                    let x = val.to_f64_lossy();
                    let y = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
                    let y = if clip { y.clamp(0.0, 1.0) } else { y };
                    *val = R::c(y);
                }
                out
            })
            .collect();
        MultiViewBatch {
            views,
            labels: batch.labels.clone(),
            view_dims: batch.view_dims.clone(),
            num_classes: batch.num_classes,
        }
    }
}

/// A loaded dataset with its recorded normalization.
#[derive(Debug, Clone)]
pub struct LoadedDataset<R: Scalar> {
    pub manifest: DatasetManifest,
    pub batch: MultiViewBatch<R>,
    pub normalizer: Normalizer,
}

fn read_float_csv<R: Scalar>(path: &Path, expected_cols: usize) -> Result<Tensor<R>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut values = Vec::new();
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != expected_cols {
            return Err(Error::Load {
                file: path.display().to_string(),
                line: lineno + 1,
                message: format!("expected {expected_cols} columns, found {}", cells.len()),
            });
        }
        for cell in cells {
            let v: f64 = cell.trim().parse().map_err(|_| Error::Load {
                file: path.display().to_string(),
                line: lineno + 1,
                message: format!("non-numeric cell {cell:?}"),
            })?;
            values.push(R::c(v));
        }
        rows += 1;
    }
    Tensor::new(vec![rows, expected_cols], values)
}

fn read_label_csv<R: Scalar>(path: &Path, num_classes: usize) -> Result<Tensor<R>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut classes = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let c: i64 = line.parse().map_err(|_| Error::Load {
            file: path.display().to_string(),
            line: lineno + 1,
            message: format!("non-integer label {line:?}"),
        })?;
        if c < 0 || c as usize >= num_classes {
            return Err(Error::Load {
                file: path.display().to_string(),
                line: lineno + 1,
                message: format!("label {c} outside [0, {num_classes})"),
            });
        }
        classes.push(c as usize);
    }
    let mut labels = Tensor::zeros(&[classes.len(), num_classes]);
    for (i, c) in classes.iter().enumerate() {
        labels.values_mut()[i * num_classes + c] = R::one();
    }
    Ok(labels)
}

/// Load a dataset from its manifest; features are min-max normalized to
/// [0,1] over the file contents and the normalization is recorded for reuse
/// on held-out data.
pub fn load_dataset<R: Scalar>(manifest_path: &Path) -> Result<LoadedDataset<R>> {
    let text = fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::Serde(format!("manifest: {e}")))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));

    let mut views = Vec::new();
    let mut view_dims = Vec::new();
    let mut rows: Option<usize> = None;
    for spec in &manifest.views {
        let path = base.join(&spec.file);
        let t: Tensor<R> = read_float_csv(&path, spec.dim)?;
        match rows {
            None => rows = Some(t.rows()),
            Some(r) if r != t.rows() => {
                return Err(Error::Load {
                    file: path.display().to_string(),
                    line: 0,
                    message: format!("view has {} rows, previous views have {r}", t.rows()),
                })
            }
            _ => {}
        }
        view_dims.push(spec.dim);
        views.push(t);
    }
    let labels_path = base.join(&manifest.labels_file);
    let labels: Tensor<R> = read_label_csv(&labels_path, manifest.num_classes)?;
    if let Some(r) = rows {
        if labels.rows() != r {
            return Err(Error::Load {
                file: labels_path.display().to_string(),
                line: 0,
                message: format!("{} labels for {r} instances", labels.rows()),
            });
        }
    }

    let raw = MultiViewBatch {
        views,
        labels,
        view_dims,
        num_classes: manifest.num_classes,
    };
    let normalizer = Normalizer::fit(&raw);
    let batch = normalizer.apply(&raw, false);
    Ok(LoadedDataset {
        manifest,
        batch,
        normalizer,
    })
}

/// Train/test index lists produced by a stratified split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified-by-class split indices; the same seed reproduces the identical
/// lists. Per class the train count is `round(fraction * n_k)`; a class that
/// would lose either side entirely is an error.
pub fn split_indices<R: Scalar>(
    batch: &MultiViewBatch<R>,
    train_fraction: f64,
    seed: u64,
) -> Result<SplitIndices> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::contract(format!(
            "train fraction must be in (0,1), got {train_fraction}"
        )));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); batch.num_classes];
    for n in 0..batch.num_instances() {
        per_class[batch.class_of(n)].push(n);
    }
    let mut rng = rng::rng_from(rng::derive_seed(seed, "split"));
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (k, members) in per_class.iter().enumerate() {
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {k} has {} samples, need at least 2 to split",
                members.len()
            )));
        }
        let mut shuffled = members.clone();
        rng::shuffle(&mut rng, &mut shuffled);
        let n_train = (train_fraction * members.len() as f64).round() as usize;
        if n_train == 0 || n_train == members.len() {
            return Err(Error::Data(format!(
                "class {k}: fraction {train_fraction} leaves an empty split ({n_train}/{})",
                members.len()
            )));
        }
        train.extend_from_slice(&shuffled[..n_train]);
        test.extend_from_slice(&shuffled[n_train..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok(SplitIndices { train, test })
}

/// Stratified split into (train, test) batches.
pub fn split<R: Scalar>(
    batch: &MultiViewBatch<R>,
    train_fraction: f64,
    seed: u64,
) -> Result<(MultiViewBatch<R>, MultiViewBatch<R>)> {
    let idx = split_indices(batch, train_fraction, seed)?;
    Ok((batch.subset(&idx.train), batch.subset(&idx.test)))
}

/// Parameters of the synthetic multi-view generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub views: usize,
    pub classes: usize,
    pub dims: Vec<usize>,
    pub instances: usize,
    pub class_separation: f64,
    pub view_noise: Vec<f64>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.dims.len() != self.views {
            return Err(Error::contract(format!(
                "need one dim per view: {} views, {} dims",
                self.views,
                self.dims.len()
            )));
        }
        if self.view_noise.len() != self.views {
            return Err(Error::contract(format!(
                "need one noise level per view: {} views, {} noise entries",
                self.views,
                self.view_noise.len()
            )));
        }
        if self.classes < 2 {
            return Err(Error::contract("need at least 2 classes"));
        }
        if self.dims.iter().any(|&d| d < 2) {
            return Err(Error::contract("every view dim must be at least 2"));
        }
        if self.instances < self.classes * 10 {
            return Err(Error::contract(format!(
                "need at least {} instances for {} classes",
                self.classes * 10,
                self.classes
            )));
        }
        Ok(())
    }
}

/// Generate balanced multi-view blobs: per class a shared latent center, per
/// view an independent random linear projection of the center plus Gaussian
/// noise, then min-max normalization to [0,1].
pub fn generate_synthetic<R: Scalar>(spec: &SyntheticSpec) -> Result<MultiViewBatch<R>> {
    spec.validate()?;
    let latent_dim = 8.max(spec.classes);
    let mut rng: DetRng = rng::rng_from(rng::derive_seed(spec.seed, "synthetic"));

    // class centers scaled by the separation knob
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            rng::normal_vec::<f64>(&mut rng, latent_dim)
                .into_iter()
                .map(|z| z * spec.class_separation)
                .collect()
        })
        .collect();

    // per-view projection of each center
    let mut per_view_class_means: Vec<Vec<Vec<f64>>> = Vec::new();
    for v in 0..spec.views {
        let d = spec.dims[v];
        let scale = 1.0 / (latent_dim as f64).sqrt();
        let proj: Vec<f64> = rng::normal_vec::<f64>(&mut rng, d * latent_dim)
            .into_iter()
            .map(|z| z * scale)
            .collect();
        let means = centers
            .iter()
            .map(|c| {
                (0..d)
                    .map(|i| {
                        (0..latent_dim)
                            .map(|l| proj[i * latent_dim + l] * c[l])
                            .sum::<f64>()
                    })
                    .collect::<Vec<f64>>()
            })
            .collect();
        per_view_class_means.push(means);
    }

    let n = spec.instances;
    let classes: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let mut views = Vec::new();
    for v in 0..spec.views {
        let d = spec.dims[v];
        let mut vals = Vec::with_capacity(n * d);
        for &k in &classes {
            let noise = rng::normal_vec::<f64>(&mut rng, d);
            for j in 0..d {
                vals.push(R::c(per_view_class_means[v][k][j] + spec.view_noise[v] * noise[j]));
            }
        }
        views.push(Tensor::new(vec![n, d], vals)?);
    }
    let mut labels = Tensor::zeros(&[n, spec.classes]);
    for (i, &k) in classes.iter().enumerate() {
        labels.values_mut()[i * spec.classes + k] = R::one();
    }
    let raw = MultiViewBatch {
        views,
        labels,
        view_dims: spec.dims.clone(),
        num_classes: spec.classes,
    };
    let normalizer = Normalizer::fit(&raw);
    Ok(normalizer.apply(&raw, false))
}

/// Write a batch as view CSVs, a labels CSV, and a manifest; returns the
/// manifest path.
pub fn write_dataset<R: Scalar>(
    dir: &Path,
    name: &str,
    batch: &MultiViewBatch<R>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut specs = Vec::new();
    for (v, view) in batch.views.iter().enumerate() {
        let file = format!("{name}_view{v}.csv");
        let path = dir.join(&file);
        let mut out = String::new();
        let d = view.cols();
        for i in 0..view.rows() {
            let row: Vec<String> = (0..d)
                .map(|j| format!("{}", view.values()[i * d + j].to_f64_lossy()))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        fs::write(&path, out).map_err(|e| Error::io(path.display().to_string(), e))?;
        specs.push(ViewSpec {
            name: format!("view{v}"),
            file,
            dim: d,
        });
    }
    let labels_file = format!("{name}_labels.csv");
    let labels_path = dir.join(&labels_file);
    let mut out = String::new();
    for i in 0..batch.num_instances() {
        out.push_str(&format!("{}\n", batch.class_of(i)));
    }
    fs::write(&labels_path, out).map_err(|e| Error::io(labels_path.display().to_string(), e))?;

    let manifest = DatasetManifest {
        name: name.to_string(),
        num_classes: batch.num_classes,
        views: specs,
        labels_file,
    };
    let manifest_path = dir.join(format!("{name}_manifest.json"));
    let json =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    fs::write(&manifest_path, json)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn toy_batch() -> MultiViewBatch<f64> {
        // one view, 4 instances, 2 features; second column constant
        let view = Tensor::matrix(4, 2, vec![2.0, 5.0, 6.0, 5.0, 4.0, 5.0, 3.0, 5.0]).unwrap();
        let labels =
            Tensor::matrix(4, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        MultiViewBatch {
            views: vec![view],
            labels,
            view_dims: vec![2],
            num_classes: 2,
        }
    }

    #[test]
    fn min_max_normalization_worked_example() {
        let batch = toy_batch();
        let norm = Normalizer::fit(&batch);
        let normalized = norm.apply(&batch, false);
        // column with min 2, max 6: value 4 -> 0.5
        assert_abs_diff_eq!(normalized.views[0].values()[4], 0.5, epsilon = 1e-12);
        // constant column -> all zeros
        for i in 0..4 {
            assert_eq!(normalized.views[0].values()[i * 2 + 1], 0.0);
        }
    }

    #[test]
    fn normalization_is_idempotent() {
        let batch = toy_batch();
        let normalized = Normalizer::fit(&batch).apply(&batch, false);
        let again = Normalizer::fit(&normalized).apply(&normalized, false);
        for (a, b) in again.views[0]
            .values()
            .iter()
            .zip(normalized.views[0].values())
        {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn clipping_bounds_held_out_values() {
        let batch = toy_batch();
        let norm = Normalizer::fit(&batch);
        let mut held_out = batch.clone();
        held_out.views[0].values_mut()[0] = 10.0; // beyond the recorded max
        let applied = norm.apply(&held_out, true);
        assert_eq!(applied.views[0].values()[0], 1.0);
    }

    #[test]
    fn stratified_split_counts_and_determinism() {
        let spec = SyntheticSpec {
            views: 2,
            classes: 4,
            dims: vec![3, 3],
            instances: 100,
            class_separation: 1.0,
            view_noise: vec![0.1, 0.1],
            seed: 5,
        };
        let batch: MultiViewBatch<f64> = generate_synthetic(&spec).unwrap();
        let idx = split_indices(&batch, 0.8, 11).unwrap();
        assert_eq!(idx.train.len(), 80);
        assert_eq!(idx.test.len(), 20);
        // 20 train per class
        let train_batch = batch.subset(&idx.train);
        for k in 0..4 {
            let count = (0..80).filter(|&i| train_batch.class_of(i) == k).count();
            assert_eq!(count, 20);
        }
        // disjoint and covering
        let mut all: Vec<usize> = idx.train.iter().chain(&idx.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        // determinism
        assert_eq!(idx, split_indices(&batch, 0.8, 11).unwrap());
        assert_ne!(idx, split_indices(&batch, 0.8, 12).unwrap());
    }

    #[test]
    fn split_errors_on_tiny_classes_and_extreme_fractions() {
        let batch = toy_batch();
        // fraction 0.999 rounds to the full class -> empty test side
        assert!(split_indices(&batch, 0.999, 1).is_err());
        assert!(split_indices(&batch, 1.2, 1).is_err());

        let mut tiny = batch.clone();
        tiny.labels = Tensor::matrix(4, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(split_indices(&tiny, 0.8, 1).is_err());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            views: 3,
            classes: 4,
            dims: vec![5, 6, 7],
            instances: 120,
            class_separation: 2.0,
            view_noise: vec![0.1, 0.2, 0.3],
            seed: 9,
        };
        let a: MultiViewBatch<f64> = generate_synthetic(&spec).unwrap();
        let b: MultiViewBatch<f64> = generate_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        for k in 0..4 {
            let count = (0..120).filter(|&i| a.class_of(i) == k).count();
            assert_eq!(count, 30);
        }
        for view in &a.views {
            assert!(view.values().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn noiseless_views_are_separable_by_nearest_class_mean() {
        let spec = SyntheticSpec {
            views: 2,
            classes: 3,
            dims: vec![4, 4],
            instances: 60,
            class_separation: 3.0,
            view_noise: vec![0.0, 0.0],
            seed: 4,
        };
        let batch: MultiViewBatch<f64> = generate_synthetic(&spec).unwrap();
        for v in 0..2 {
            // per-class means (the linear probe's weights)
            let d = batch.view_dims[v];
            let mut means = vec![vec![0.0f64; d]; 3];
            let mut counts = vec![0usize; 3];
            for i in 0..60 {
                let k = batch.class_of(i);
                counts[k] += 1;
                for j in 0..d {
                    means[k][j] += batch.views[v].values()[i * d + j];
                }
            }
            for k in 0..3 {
                for j in 0..d {
                    means[k][j] /= counts[k] as f64;
                }
            }
            let mut correct = 0;
            for i in 0..60 {
                let row = batch.views[v].row(i);
                let best = (0..3)
                    .min_by(|&a, &b| {
                        let da: f64 = (0..d).map(|j| (row[j] - means[a][j]).powi(2)).sum();
                        let db: f64 = (0..d).map(|j| (row[j] - means[b][j]).powi(2)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                if best == batch.class_of(i) {
                    correct += 1;
                }
            }
            assert_eq!(correct, 60, "view {v} not separable");
        }
    }

    #[test]
    fn zero_separation_gives_chance_accuracy() {
        let spec = SyntheticSpec {
            views: 2,
            classes: 4,
            dims: vec![6, 6],
            instances: 400,
            class_separation: 0.0,
            view_noise: vec![0.3, 0.3],
            seed: 13,
        };
        let batch: MultiViewBatch<f64> = generate_synthetic(&spec).unwrap();
        let (train, test) = split(&batch, 0.8, 2).unwrap();
        // nearest-class-mean probe on view 0
        let d = 6;
        let mut means = vec![vec![0.0f64; d]; 4];
        let mut counts = vec![0usize; 4];
        for i in 0..train.num_instances() {
            let k = train.class_of(i);
            counts[k] += 1;
            for j in 0..d {
                means[k][j] += train.views[0].values()[i * d + j];
            }
        }
        for k in 0..4 {
            for j in 0..d {
                means[k][j] /= counts[k].max(1) as f64;
            }
        }
        let mut correct = 0;
        for i in 0..test.num_instances() {
            let row = test.views[0].row(i);
            let best = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = (0..d).map(|j| (row[j] - means[a][j]).powi(2)).sum();
                    let db: f64 = (0..d).map(|j| (row[j] - means[b][j]).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == test.class_of(i) {
                correct += 1;
            }
        }
        let acc = correct as f64 / test.num_instances() as f64;
        assert!((acc - 0.25).abs() < 0.15, "accuracy {acc} not near chance");
    }

    #[test]
    fn dataset_roundtrip_through_disk() {
        let spec = SyntheticSpec {
            views: 2,
            classes: 2,
            dims: vec![3, 4],
            instances: 40,
            class_separation: 1.5,
            view_noise: vec![0.05, 0.05],
            seed: 21,
        };
        let batch: MultiViewBatch<f64> = generate_synthetic(&spec).unwrap();
        let dir = std::env::temp_dir().join("evimix-data-test");
        let manifest_path = write_dataset(&dir, "toy", &batch).unwrap();
        let loaded: LoadedDataset<f64> = load_dataset(&manifest_path).unwrap();
        assert_eq!(loaded.batch.num_instances(), 40);
        assert_eq!(loaded.batch.num_views(), 2);
        for (a, b) in loaded.batch.views.iter().zip(&batch.views) {
            for (x, y) in a.values().iter().zip(b.values()) {
                assert_abs_diff_eq!(x, y, epsilon = 1e-12);
            }
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn load_errors_name_file_and_line() {
        let dir = std::env::temp_dir().join("evimix-data-err-test");
        fs::create_dir_all(&dir).unwrap();
        fs::write(dir.join("v0.csv"), "0.1,0.2\n0.3,oops\n").unwrap();
        fs::write(dir.join("labels.csv"), "0\n1\n").unwrap();
        let manifest = DatasetManifest {
            name: "bad".into(),
            num_classes: 2,
            views: vec![ViewSpec {
                name: "v0".into(),
                file: "v0.csv".into(),
                dim: 2,
            }],
            labels_file: "labels.csv".into(),
        };
        let mp = dir.join("manifest.json");
        fs::write(&mp, serde_json::to_string(&manifest).unwrap()).unwrap();
        match load_dataset::<f64>(&mp) {
            Err(Error::Load { file, line, .. }) => {
                assert!(file.contains("v0.csv"));
                assert_eq!(line, 2);
            }
            other => panic!("expected load error, got {other:?}"),
        }

        // mismatched row counts
        fs::write(dir.join("v0.csv"), "0.1,0.2\n0.3,0.4\n0.5,0.6\n").unwrap();
        assert!(matches!(load_dataset::<f64>(&mp), Err(Error::Load { .. })));
        std::fs::remove_dir_all(&dir).ok();
    }
}
