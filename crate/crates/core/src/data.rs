//! Multi-view datasets: container, disk format, the two-moons generator,
//! train/test splitting, per-view normalization, and noise injection.
//!
//! The on-disk layout of a dataset directory is
//!
//! ```text
//! meta.json     {"name", "num_views", "num_classes", "view_dims", "n", ...}
//! view_0.csv    N rows of comma-separated decimals, no header
//! view_1.csv    ...
//! labels.csv    N integers, one per line
//! ```
//!
//! Floats are rendered with 17 significant digits so a save/load round trip
//! reproduces every value bit for bit.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, RngStream};

/// Aligned multi-view samples: V feature matrices over the same N rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiViewDataset {
    views: Vec<DenseMatrix>,
    labels: Vec<usize>,
    num_classes: usize,
    view_names: Vec<String>,
}

impl MultiViewDataset {
    pub fn new(
        views: Vec<DenseMatrix>,
        labels: Vec<usize>,
        num_classes: usize,
        view_names: Vec<String>,
    ) -> Result<Self> {
        if views.is_empty() {
            return Err(Error::EmptyInput("dataset views"));
        }
        if view_names.len() != views.len() {
            return Err(Error::DimensionMismatch {
                context: "MultiViewDataset view names".into(),
                expected: views.len().to_string(),
                got: view_names.len().to_string(),
            });
        }
        let n = labels.len();
        if views.iter().any(|v| v.rows() != n) {
            return Err(Error::MismatchedBatch {
                sizes: views.iter().map(DenseMatrix::rows).collect(),
            });
        }
        if num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be >= 1".into()));
        }
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_classes {
                return Err(Error::LabelOutOfRange {
                    label: l as i64,
                    num_classes,
                    location: format!(" at sample {i}"),
                });
            }
        }
        Ok(MultiViewDataset {
            views,
            labels,
            num_classes,
            view_names,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_views(&self) -> usize {
        self.views.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn views(&self) -> &[DenseMatrix] {
        &self.views
    }

    pub fn view(&self, v: usize) -> &DenseMatrix {
        &self.views[v]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn view_names(&self) -> &[String] {
        &self.view_names
    }

    pub fn view_dims(&self) -> Vec<usize> {
        self.views.iter().map(DenseMatrix::cols).collect()
    }

    /// Row subset in the given index order, applied to every view and labels.
    pub fn gather(&self, indices: &[usize]) -> Self {
        MultiViewDataset {
            views: self.views.iter().map(|v| v.gather_rows(indices)).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            view_names: self.view_names.clone(),
        }
    }

    /// Keep only the listed views (in the listed order).
    pub fn subset_views(&self, views: &[usize]) -> Self {
        MultiViewDataset {
            views: views.iter().map(|&v| self.views[v].clone()).collect(),
            labels: self.labels.clone(),
            num_classes: self.num_classes,
            view_names: views.iter().map(|&v| self.view_names[v].clone()).collect(),
        }
    }
}

/// Everything the two-moons generator needs; `class1_shift` is the
/// translation (in base coordinates) applied to class-1 points of the third
/// view so that its classes overlap. It is recorded next to the dataset so a
/// run can be reproduced from the files alone.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MoonsSpec {
    pub n_per_class: usize,
    pub radii: [f64; 3],
    pub noise_std: f64,
    pub class1_shift: [f64; 2],
    pub ood_count: usize,
    pub ood_std: f64,
}

impl Default for MoonsSpec {
    fn default() -> Self {
        MoonsSpec {
            n_per_class: 1000,
            radii: [1.7, 1.0, 0.3],
            noise_std: 0.1,
            class1_shift: [-1.0, 0.5],
            ood_count: 200,
            ood_std: 0.04,
        }
    }
}

/// Center of the gap between the two base moons; OOD points are sampled
/// around it.
const OOD_CENTER: [f64; 2] = [0.5, 0.25];

/// Three 2-D views of a two-moons layout, plus OOD points per view.
///
/// One jittered base shape is drawn per sample and shared by all views, so
/// each view is a deterministic transform of the same geometry: view v
/// scales coordinates by `radii[v]`, and the third view additionally
/// translates class-1 points by `class1_shift` to make the classes overlap.
/// OOD points sit between the moons and get the same per-view scaling.
pub fn make_moons_multiview(
    spec: &MoonsSpec,
    rng: RngStream,
) -> (MultiViewDataset, Vec<DenseMatrix>) {
    let n = 2 * spec.n_per_class;
    let angles = rng.derive(0).uniform(n, 0.0, std::f64::consts::PI);
    let jitter = rng.derive(1).std_normal(2 * n);
    let mut base = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let t = angles[i];
        let (jx, jy) = (jitter[2 * i] * spec.noise_std, jitter[2 * i + 1] * spec.noise_std);
        if i < spec.n_per_class {
            base.push(t.cos() + jx);
            base.push(t.sin() + jy);
            labels.push(0);
        } else {
            base.push(1.0 - t.cos() + jx);
            base.push(0.5 - t.sin() + jy);
            labels.push(1);
        }
    }

    let mut views = Vec::with_capacity(3);
    for (v, &r) in spec.radii.iter().enumerate() {
        let mut data = Vec::with_capacity(2 * n);
        for i in 0..n {
            let mut x = base[2 * i];
            let mut y = base[2 * i + 1];
            if v == 2 && labels[i] == 1 {
                x += spec.class1_shift[0];
                y += spec.class1_shift[1];
            }
            data.push(r * x);
            data.push(r * y);
        }
        views.push(DenseMatrix::from_vec(n, 2, data).unwrap());
    }

    let ood_draws = rng.derive(2).std_normal(2 * spec.ood_count);
    let ood_views = spec
        .radii
        .iter()
        .map(|&r| {
            let data = (0..2 * spec.ood_count)
                .map(|k| r * (OOD_CENTER[k % 2] + spec.ood_std * ood_draws[k]))
                .collect();
            DenseMatrix::from_vec(spec.ood_count, 2, data).unwrap()
        })
        .collect();

    let names = (0..3).map(|v| format!("view_{v}")).collect();
    let ds = MultiViewDataset::new(views, labels, 2, names).unwrap();
    (ds, ood_views)
}

#[derive(Debug, Serialize, Deserialize)]
struct DatasetMeta {
    name: String,
    num_views: usize,
    num_classes: usize,
    view_dims: Vec<usize>,
    n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    view_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<serde_json::Value>,
}

/// Write a dataset directory in the documented format. `provenance` is an
/// arbitrary JSON blob stored in meta.json (e.g. generator settings).
pub fn save_dataset(
    ds: &MultiViewDataset,
    name: &str,
    dir: &Path,
    provenance: Option<serde_json::Value>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = DatasetMeta {
        name: name.to_string(),
        num_views: ds.num_views(),
        num_classes: ds.num_classes(),
        view_dims: ds.view_dims(),
        n: ds.len(),
        view_names: Some(ds.view_names().to_vec()),
        provenance,
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serialization cannot fail");
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;

    for (v, view) in ds.views().iter().enumerate() {
        let path = dir.join(format!("view_{v}.csv"));
        let mut out = String::with_capacity(view.rows() * view.cols() * 26);
        for i in 0..view.rows() {
            for (j, val) in view.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                // 17 significant digits: enough to reproduce any f64 exactly.
                out.push_str(&format!("{val:.16e}"));
            }
            out.push('\n');
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    }

    let labels_path = dir.join("labels.csv");
    let mut out = String::new();
    for &l in ds.labels() {
        out.push_str(&l.to_string());
        out.push('\n');
    }
    fs::write(&labels_path, out).map_err(|e| Error::io(&labels_path, e))?;
    Ok(())
}

/// Read a dataset directory written by [`save_dataset`] (or by hand).
pub fn load_dataset(dir: &Path) -> Result<MultiViewDataset> {
    let meta_path = dir.join("meta.json");
    if !meta_path.is_file() {
        return Err(Error::MissingFile { path: meta_path });
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", meta_path.display())))?;

    let mut views = Vec::with_capacity(meta.num_views);
    for v in 0..meta.num_views {
        let path = dir.join(format!("view_{v}.csv"));
        if !path.is_file() {
            return Err(Error::MissingFile { path });
        }
        let dim = *meta.view_dims.get(v).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "{}: view_dims has {} entries for {} views",
                meta_path.display(),
                meta.view_dims.len(),
                meta.num_views
            ))
        })?;
        views.push(read_csv_matrix(&path, meta.n, dim)?);
    }

    let labels_path = dir.join("labels.csv");
    if !labels_path.is_file() {
        return Err(Error::MissingFile { path: labels_path });
    }
    let labels = read_labels(&labels_path, meta.n, meta.num_classes)?;

    let view_names = meta
        .view_names
        .unwrap_or_else(|| (0..meta.num_views).map(|v| format!("view_{v}")).collect());
    MultiViewDataset::new(views, labels, meta.num_classes, view_names)
}

#[derive(Debug, Serialize, Deserialize)]
struct ViewBlocksMeta {
    num_views: usize,
    n: usize,
    view_dims: Vec<usize>,
}

/// Write unlabeled per-view feature blocks (e.g. out-of-domain inputs) in
/// the same CSV format as [`save_dataset`], with a small blocks.json meta.
pub fn save_view_blocks(views: &[DenseMatrix], dir: &Path) -> Result<()> {
    if views.is_empty() {
        return Err(Error::EmptyInput("no view blocks to save"));
    }
    let n = views[0].rows();
    if views.iter().any(|v| v.rows() != n) {
        return Err(Error::MismatchedBatch {
            sizes: views.iter().map(DenseMatrix::rows).collect(),
        });
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = ViewBlocksMeta {
        num_views: views.len(),
        n,
        view_dims: views.iter().map(DenseMatrix::cols).collect(),
    };
    let meta_path = dir.join("blocks.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serialization cannot fail");
    fs::write(&meta_path, text).map_err(|e| Error::io(&meta_path, e))?;
    for (v, view) in views.iter().enumerate() {
        let path = dir.join(format!("view_{v}.csv"));
        let mut out = String::with_capacity(view.rows() * view.cols() * 26);
        for i in 0..view.rows() {
            for (j, val) in view.row(i).iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{val:.16e}"));
            }
            out.push('\n');
        }
        fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Read view blocks written by [`save_view_blocks`].
pub fn load_view_blocks(dir: &Path) -> Result<Vec<DenseMatrix>> {
    let meta_path = dir.join("blocks.json");
    if !meta_path.is_file() {
        return Err(Error::MissingFile { path: meta_path });
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: ViewBlocksMeta = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", meta_path.display())))?;
    let mut views = Vec::with_capacity(meta.num_views);
    for v in 0..meta.num_views {
        let path = dir.join(format!("view_{v}.csv"));
        if !path.is_file() {
            return Err(Error::MissingFile { path });
        }
        let dim = *meta.view_dims.get(v).ok_or_else(|| {
            Error::InvalidConfig(format!(
                "{}: view_dims has {} entries for {} views",
                meta_path.display(),
                meta.view_dims.len(),
                meta.num_views
            ))
        })?;
        views.push(read_csv_matrix(&path, meta.n, dim)?);
    }
    Ok(views)
}

fn read_csv_matrix(path: &Path, expected_rows: usize, expected_cols: usize) -> Result<DenseMatrix> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut data = Vec::with_capacity(expected_rows * expected_cols);
    let mut rows = 0usize;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        if rows == expected_rows {
            return Err(Error::RaggedRows {
                file: name,
                line: lineno,
                expected: expected_rows,
                found: rows + 1,
            });
        }
        let mut cols = 0usize;
        for (c, cell) in line.split(',').enumerate() {
            let cell = cell.trim();
            let value: f64 = cell.parse().map_err(|_| Error::NonNumericCell {
                file: name.clone(),
                line: lineno,
                column: c + 1,
                cell: cell.to_string(),
            })?;
            data.push(value);
            cols += 1;
        }
        if cols != expected_cols {
            return Err(Error::RaggedRows {
                file: name,
                line: lineno,
                expected: expected_cols,
                found: cols,
            });
        }
        rows += 1;
    }
    if rows != expected_rows {
        return Err(Error::RaggedRows {
            file: name,
            line: rows + 1,
            expected: expected_rows,
            found: rows,
        });
    }
    DenseMatrix::from_vec(expected_rows, expected_cols, data)
}

fn read_labels(path: &Path, expected_rows: usize, num_classes: usize) -> Result<Vec<usize>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut labels = Vec::with_capacity(expected_rows);
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let cell = line.trim();
        if cell.is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let value: i64 = cell.parse().map_err(|_| Error::NonNumericCell {
            file: name.clone(),
            line: lineno,
            column: 1,
            cell: cell.to_string(),
        })?;
        if value < 0 || value as usize >= num_classes {
            return Err(Error::LabelOutOfRange {
                label: value,
                num_classes,
                location: format!(" at {name}:{lineno}"),
            });
        }
        labels.push(value as usize);
    }
    if labels.len() != expected_rows {
        return Err(Error::RaggedRows {
            file: name,
            line: labels.len() + 1,
            expected: expected_rows,
            found: labels.len(),
        });
    }
    Ok(labels)
}

/// Random train/test split; the same shuffled index set is applied to every
/// view and to the labels, and rows keep their shuffled order.
pub fn split(
    ds: &MultiViewDataset,
    train_fraction: f64,
    rng: RngStream,
) -> (MultiViewDataset, MultiViewDataset) {
    assert!(
        train_fraction > 0.0 && train_fraction < 1.0,
        "train_fraction must be in (0, 1), got {train_fraction}"
    );
    let n = ds.len();
    let n_train = ((train_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1));
    let perm = rng.shuffled_indices(n);
    let train = ds.gather(&perm[..n_train]);
    let test = ds.gather(&perm[n_train..]);
    (train, test)
}

/// Per-view per-feature z-score statistics, estimated on the training split
/// only. Standard deviations are floored so constant features map to zero
/// instead of dividing by zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    means: Vec<Vec<f64>>,
    stds: Vec<Vec<f64>>,
}

pub const STD_FLOOR: f64 = 1e-8;

impl NormalizationStats {
    pub fn fit(train: &MultiViewDataset) -> Self {
        let n = train.len() as f64;
        let mut means = Vec::with_capacity(train.num_views());
        let mut stds = Vec::with_capacity(train.num_views());
        for view in train.views() {
            let d = view.cols();
            let mut mean = vec![0.0; d];
            for i in 0..view.rows() {
                for (j, &x) in view.row(i).iter().enumerate() {
                    mean[j] += x;
                }
            }
            for m in mean.iter_mut() {
                *m /= n;
            }
            let mut var = vec![0.0; d];
            for i in 0..view.rows() {
                for (j, &x) in view.row(i).iter().enumerate() {
                    let dlt = x - mean[j];
                    var[j] += dlt * dlt;
                }
            }
            let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
            means.push(mean);
            stds.push(std);
        }
        NormalizationStats { means, stds }
    }

    /// Apply the stored statistics; works on any dataset with matching dims.
    pub fn apply(&self, ds: &MultiViewDataset) -> Result<MultiViewDataset> {
        let views = self.apply_views(ds.views())?;
        Ok(MultiViewDataset {
            views,
            labels: ds.labels.clone(),
            num_classes: ds.num_classes,
            view_names: ds.view_names.clone(),
        })
    }

    /// Same as [`apply`](Self::apply) for bare feature blocks (OOD points
    /// carry no labels).
    pub fn apply_views(&self, views: &[DenseMatrix]) -> Result<Vec<DenseMatrix>> {
        if views.len() != self.means.len() {
            return Err(Error::DimensionMismatch {
                context: "NormalizationStats::apply".into(),
                expected: format!("{} views", self.means.len()),
                got: format!("{} views", views.len()),
            });
        }
        let mut out = Vec::with_capacity(views.len());
        for (v, view) in views.iter().enumerate() {
            if view.cols() != self.means[v].len() {
                return Err(Error::DimensionMismatch {
                    context: format!("NormalizationStats::apply view {v}"),
                    expected: format!("{} features", self.means[v].len()),
                    got: format!("{} features", view.cols()),
                });
            }
            let mut z = view.clone();
            for i in 0..z.rows() {
                let row = z.row_mut(i);
                for j in 0..row.len() {
                    row[j] = (row[j] - self.means[v][j]) / self.stds[v][j];
                }
            }
            out.push(z);
        }
        Ok(out)
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn stds(&self) -> &[Vec<f64>] {
        &self.stds
    }
}

/// Z-score train and test with statistics fitted on train only.
pub fn normalize(
    train: &MultiViewDataset,
    test: &MultiViewDataset,
) -> Result<(MultiViewDataset, MultiViewDataset, NormalizationStats)> {
    let stats = NormalizationStats::fit(train);
    let train2 = stats.apply(train)?;
    let test2 = stats.apply(test)?;
    Ok((train2, test2, stats))
}

/// Add i.i.d. N(0, std^2) noise to the selected views; the rest are copied
/// bit for bit. Noise for view v comes from `rng.derive(v)`, so the result
/// does not depend on the order of `view_subset`.
pub fn inject_noise(
    ds: &MultiViewDataset,
    view_subset: &[usize],
    std: f64,
    rng: RngStream,
) -> MultiViewDataset {
    assert!(std >= 0.0, "noise std must be nonnegative, got {std}");
    let mut views = ds.views.clone();
    for &v in view_subset {
        let view = &mut views[v];
        let noise = rng.derive(v as u64).std_normal(view.rows() * view.cols());
        for (x, e) in view.data_mut().iter_mut().zip(noise) {
            *x += std * e;
        }
    }
    MultiViewDataset {
        views,
        labels: ds.labels.clone(),
        num_classes: ds.num_classes,
        view_names: ds.view_names.clone(),
    }
}

/// Whether test-set noise is injected before or after normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    NormalizeFirst,
    NoiseFirst,
}

/// Noise-robustness protocol: the std grid, the injection order, and how
/// many views are corrupted at a time.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub std_grid: Vec<f64>,
    pub mode: NoiseMode,
    pub noisy_view_count: usize,
}

impl NoiseSpec {
    /// Paper protocol: log-spaced stds from 0.01 to 10, normalize first,
    /// half of the views (rounded down) corrupted.
    pub fn for_views(num_views: usize) -> Self {
        NoiseSpec {
            std_grid: vec![0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 10.0],
            mode: NoiseMode::NormalizeFirst,
            noisy_view_count: num_views / 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std_grid.is_empty() {
            return Err(Error::InvalidConfig("noise std grid is empty".into()));
        }
        if self.std_grid.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::InvalidConfig(
                "noise std grid entries must be positive".into(),
            ));
        }
        if self.std_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "noise std grid must be strictly ascending".into(),
            ));
        }
        Ok(())
    }
}

/// Build the noisy version of a raw (unnormalized) test set under the given
/// ordering convention, using train-split statistics for the z-score.
pub fn prepare_noisy_test(
    test_raw: &MultiViewDataset,
    stats: &NormalizationStats,
    view_subset: &[usize],
    std: f64,
    mode: NoiseMode,
    rng: RngStream,
) -> Result<MultiViewDataset> {
    match mode {
        NoiseMode::NoiseFirst => stats.apply(&inject_noise(test_raw, view_subset, std, rng)),
        NoiseMode::NormalizeFirst => {
            Ok(inject_noise(&stats.apply(test_raw)?, view_subset, std, rng))
        }
    }
}

/// All C(V, k) view-index subsets of size k, in lexicographic order.
pub fn noise_view_combinations(num_views: usize, k: usize) -> Vec<Vec<usize>> {
    assert!(k <= num_views, "cannot pick {k} of {num_views} views");
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(k);
    fn rec(start: usize, v: usize, k: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == k {
            out.push(cur.clone());
            return;
        }
        let remaining = k - cur.len();
        for i in start..=(v - remaining) {
            cur.push(i);
            rec(i + 1, v, k, cur, out);
            cur.pop();
        }
    }
    if k == 0 {
        out.push(Vec::new());
    } else {
        rec(0, num_views, k, &mut cur, &mut out);
    }
    out
}
