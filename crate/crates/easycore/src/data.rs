//! Synthetic 2D Gaussian-cluster data, CSV ingestion, and id-stable
//! subsetting.
//!
//! Sample ids are assigned at construction (row order) and survive
//! subsetting, so hardness scores keyed by id stay valid across selections.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::Tensor;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// [n, d] feature matrix.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    /// Stable sample ids; a subset keeps the original ids.
    pub ids: Vec<usize>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Gather rows (by position, not id) into a batch tensor plus labels.
    pub fn batch(&self, rows: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut values = Vec::with_capacity(rows.len() * d);
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            values.extend_from_slice(self.features.row(r));
            labels.push(self.labels[r]);
        }
        (
            Tensor::new(vec![rows.len(), d], values).expect("sized"),
            labels,
        )
    }

    /// The whole dataset as one batch.
    pub fn full_batch(&self) -> (Tensor, Vec<usize>) {
        let rows: Vec<usize> = (0..self.n()).collect();
        self.batch(&rows)
    }

    /// Per-axis bounding box, as (min, max) pairs.
    pub fn bounding_box(&self) -> Vec<(f64, f64)> {
        let d = self.dim();
        let mut bounds = vec![(f64::INFINITY, f64::NEG_INFINITY); d];
        for r in 0..self.n() {
            for (c, &v) in self.features.row(r).iter().enumerate() {
                bounds[c].0 = bounds[c].0.min(v);
                bounds[c].1 = bounds[c].1.max(v);
            }
        }
        bounds
    }
}

/// Configuration for the synthetic 2D Gaussian-cluster dataset. All five
/// lists are per-cluster and must have equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub centers: Vec<(f64, f64)>,
    pub train_counts: Vec<usize>,
    pub test_counts: Vec<usize>,
    pub stds: Vec<f64>,
    pub class_of_cluster: Vec<usize>,
}

impl ClusterConfig {
    /// The six-cluster binary dataset used throughout the 2D experiments:
    /// 1200 train and 3000 test points, clusters alternating between the
    /// two classes.
    pub fn six_gaussians() -> Self {
        let centers = vec![
            (-12.0, 0.0),
            (-6.0, 0.0),
            (-6.0, -12.0),
            (0.0, 12.0),
            (0.0, 0.0),
            (6.0, 0.0),
        ];
        let class_of_cluster = (0..centers.len()).map(|i| i % 2).collect();
        ClusterConfig {
            centers,
            train_counts: vec![100, 100, 400, 400, 100, 100],
            test_counts: vec![250, 250, 1000, 1000, 250, 250],
            stds: vec![2.3, 2.3, 4.6, 4.6, 2.3, 2.3],
            class_of_cluster,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        let n = self.centers.len();
        if n == 0 {
            issues.push("dataset.centers must be nonempty".to_string());
        }
        for (field, len) in [
            ("train_counts", self.train_counts.len()),
            ("test_counts", self.test_counts.len()),
            ("stds", self.stds.len()),
            ("class_of_cluster", self.class_of_cluster.len()),
        ] {
            if len != n {
                issues.push(format!(
                    "dataset.{field} has length {len}, expected {n} (one per center)"
                ));
            }
        }
        if self.stds.iter().any(|&s| s < 0.0) {
            issues.push("dataset.stds must be nonnegative".to_string());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig { issues })
        }
    }

    pub fn class_count(&self) -> usize {
        self.class_of_cluster.iter().map(|&c| c + 1).max().unwrap_or(0)
    }
}

/// Draw the train and test splits. Points for cluster i are
/// center_i + std_i * (standard normal pair); per cluster the train points
/// are drawn first, then the test points, so the sequence is pinned by the
/// seed alone.
pub fn generate_clusters(config: &ClusterConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    config.validate()?;
    let mut stream = Stream::derived(seed, "cluster-data", 0);
    let class_count = config.class_count();
    let mut train_values = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_values = Vec::new();
    let mut test_labels = Vec::new();
    for (i, &(cx, cy)) in config.centers.iter().enumerate() {
        let std = config.stds[i];
        let class = config.class_of_cluster[i];
        for _ in 0..config.train_counts[i] {
            let (nx, ny) = stream.normal_pair();
            train_values.push(cx + std * nx);
            train_values.push(cy + std * ny);
            train_labels.push(class);
        }
        for _ in 0..config.test_counts[i] {
            let (nx, ny) = stream.normal_pair();
            test_values.push(cx + std * nx);
            test_values.push(cy + std * ny);
            test_labels.push(class);
        }
    }
    let make = |values: Vec<f64>, labels: Vec<usize>| -> Result<Dataset> {
        let n = labels.len();
        Ok(Dataset {
            features: Tensor::new(vec![n, 2], values)?,
            ids: (0..n).collect(),
            labels,
            class_count,
        })
    };
    Ok((make(train_values, train_labels)?, make(test_values, test_labels)?))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CsvOptions {
    pub has_header: bool,
    /// Per-column min-max scaling of features to [0, 1], so that attack
    /// radii keep their pixel-scale meaning on tabular data.
    pub minmax_scale: bool,
}

/// Load a dataset from a CSV of d feature columns followed by one integer
/// label column. Row order defines the ids; class_count = max label + 1.
pub fn load_csv_dataset<P: AsRef<Path>>(path: P, options: CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut width: Option<usize> = None;
    let mut values: Vec<f64> = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut data_rows = 0usize;
    for (line_no, line) in text.lines().enumerate() {
        if line_no == 0 && options.has_header {
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 2 {
            return Err(Error::CsvFormat {
                path: display,
                line: line_no + 1,
                msg: format!("expected at least 2 columns, got {}", fields.len()),
            });
        }
        match width {
            None => width = Some(fields.len()),
            Some(w) if w != fields.len() => {
                return Err(Error::CsvFormat {
                    path: display,
                    line: line_no + 1,
                    msg: format!("ragged row: expected {w} columns, got {}", fields.len()),
                });
            }
            _ => {}
        }
        let (feature_fields, label_field) = fields.split_at(fields.len() - 1);
        for field in feature_fields {
            let v: f64 = field.trim().parse().map_err(|_| Error::CsvFormat {
                path: display.clone(),
                line: line_no + 1,
                msg: format!("non-numeric feature field {field:?}"),
            })?;
            values.push(v);
        }
        let label: i64 = label_field[0].trim().parse().map_err(|_| Error::CsvFormat {
            path: display.clone(),
            line: line_no + 1,
            msg: format!("non-integer label field {:?}", label_field[0]),
        })?;
        if label < 0 {
            return Err(Error::CsvFormat {
                path: display,
                line: line_no + 1,
                msg: format!("negative label {label}"),
            });
        }
        labels.push(label as usize);
        data_rows += 1;
    }
    if data_rows == 0 {
        return Err(Error::EmptyDataset);
    }
    let d = width.expect("rows seen") - 1;
    if options.minmax_scale {
        for c in 0..d {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for r in 0..data_rows {
                lo = lo.min(values[r * d + c]);
                hi = hi.max(values[r * d + c]);
            }
            let span = hi - lo;
            if span > 0.0 {
                for r in 0..data_rows {
                    values[r * d + c] = (values[r * d + c] - lo) / span;
                }
            } else {
                for r in 0..data_rows {
                    values[r * d + c] = 0.0;
                }
            }
        }
    }
    let class_count = labels.iter().map(|&l| l + 1).max().unwrap_or(0);
    Ok(Dataset {
        features: Tensor::new(vec![data_rows, d], values)?,
        ids: (0..data_rows).collect(),
        labels,
        class_count,
    })
}

/// Write a dataset as feature columns plus a final label column.
pub fn write_csv_dataset<P: AsRef<Path>>(path: P, data: &Dataset) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    let d = data.dim();
    for r in 0..data.n() {
        let mut line = String::new();
        for (c, v) in data.features.row(r).iter().enumerate() {
            let _ = c;
            write!(line, "{v},").expect("string write");
        }
        writeln!(w, "{line}{}", data.labels[r])?;
        let _ = d;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text manifest describing a generated dataset.
pub fn write_dataset_manifest<P: AsRef<Path>>(
    path: P,
    seed: u64,
    config: &ClusterConfig,
    train_rows: usize,
    test_rows: usize,
) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "seed: {seed}");
    let _ = writeln!(out, "centers: {:?}", config.centers);
    let _ = writeln!(out, "train_counts: {:?}", config.train_counts);
    let _ = writeln!(out, "test_counts: {:?}", config.test_counts);
    let _ = writeln!(out, "stds: {:?}", config.stds);
    let _ = writeln!(out, "class_of_cluster: {:?}", config.class_of_cluster);
    let _ = writeln!(out, "train_rows: {train_rows}");
    let _ = writeln!(out, "test_rows: {test_rows}");
    fs::write(path, out)?;
    Ok(())
}

/// Select rows by id, in the given order, preserving the original ids.
pub fn subset(data: &Dataset, indices: &[usize]) -> Result<Dataset> {
    let mut row_of_id = vec![usize::MAX; data.ids.iter().map(|&i| i + 1).max().unwrap_or(0)];
    for (row, &id) in data.ids.iter().enumerate() {
        row_of_id[id] = row;
    }
    let mut seen = vec![false; row_of_id.len()];
    let d = data.dim();
    let mut values = Vec::with_capacity(indices.len() * d);
    let mut labels = Vec::with_capacity(indices.len());
    let mut ids = Vec::with_capacity(indices.len());
    for &id in indices {
        let row = *row_of_id.get(id).unwrap_or(&usize::MAX);
        if row == usize::MAX {
            return Err(Error::UnknownId { id });
        }
        if seen[id] {
            return Err(Error::DuplicateId { id });
        }
        seen[id] = true;
        values.extend_from_slice(data.features.row(row));
        labels.push(data.labels[row]);
        ids.push(id);
    }
    Ok(Dataset {
        features: Tensor::new(vec![indices.len(), d], values)?,
        labels,
        class_count: data.class_count,
        ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn six_gaussian_split_sizes() {
        let config = ClusterConfig::six_gaussians();
        let (train, test) = generate_clusters(&config, 0).unwrap();
        assert_eq!(train.n(), 1200);
        assert_eq!(test.n(), 3000);
        assert_eq!(train.class_count, 2);
        // Class totals follow train_counts grouped by class_of_cluster.
        let count = |d: &Dataset, c: usize| d.labels.iter().filter(|&&l| l == c).count();
        assert_eq!(count(&train, 0), 600);
        assert_eq!(count(&train, 1), 600);
        assert_eq!(count(&test, 0), 1500);
        assert_eq!(count(&test, 1), 1500);
    }

    #[test]
    fn generation_is_bitwise_reproducible() {
        let config = ClusterConfig::six_gaussians();
        let (a, _) = generate_clusters(&config, 9).unwrap();
        let (b, _) = generate_clusters(&config, 9).unwrap();
        assert_eq!(a.features.values(), b.features.values());
        let (c, _) = generate_clusters(&config, 10).unwrap();
        assert_ne!(a.features.values(), c.features.values());
    }

    #[test]
    fn zero_std_collapses_to_center() {
        let config = ClusterConfig {
            centers: vec![(3.0, -4.0)],
            train_counts: vec![10],
            test_counts: vec![0],
            stds: vec![0.0],
            class_of_cluster: vec![0],
        };
        let (train, test) = generate_clusters(&config, 1).unwrap();
        assert_eq!(test.n(), 0);
        for r in 0..train.n() {
            assert_eq!(train.features.row(r), &[3.0, -4.0]);
        }
    }

    #[test]
    fn large_cluster_mean_approaches_center() {
        let config = ClusterConfig {
            centers: vec![(2.0, -1.0)],
            train_counts: vec![10_000],
            test_counts: vec![0],
            stds: vec![1.5],
            class_of_cluster: vec![0],
        };
        let (train, _) = generate_clusters(&config, 5).unwrap();
        let n = train.n() as f64;
        let (mut mx, mut my) = (0.0, 0.0);
        for r in 0..train.n() {
            mx += train.features.row(r)[0];
            my += train.features.row(r)[1];
        }
        mx /= n;
        my /= n;
        let tol = 5.0 * 1.5 / n.sqrt();
        assert!((mx - 2.0).abs() < tol, "mean x {mx}");
        assert!((my + 1.0).abs() < tol, "mean y {my}");
    }

    #[test]
    fn inconsistent_lengths_are_rejected() {
        let mut config = ClusterConfig::six_gaussians();
        config.stds.pop();
        assert!(generate_clusters(&config, 0).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_features() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let (train, _) = generate_clusters(&ClusterConfig::six_gaussians(), 3).unwrap();
        write_csv_dataset(&path, &train).unwrap();
        let loaded = load_csv_dataset(&path, CsvOptions::default()).unwrap();
        assert_eq!(loaded.n(), train.n());
        assert_eq!(loaded.labels, train.labels);
        for (a, b) in loaded.features.values().iter().zip(train.features.values()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn tiny_csv_parses() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "0,0,0\n1,1,1\n2,2,0\n").unwrap();
        let data = load_csv_dataset(&path, CsvOptions::default()).unwrap();
        assert_eq!(data.n(), 3);
        assert_eq!(data.dim(), 2);
        assert_eq!(data.class_count, 2);
        assert_eq!(data.ids, vec![0, 1, 2]);
    }

    #[test]
    fn csv_error_cases() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.csv");
        std::fs::write(&empty, "").unwrap();
        assert!(matches!(
            load_csv_dataset(&empty, CsvOptions::default()),
            Err(Error::EmptyDataset)
        ));

        let ragged = dir.path().join("ragged.csv");
        std::fs::write(&ragged, "0,0,0\n1,1\n").unwrap();
        assert!(load_csv_dataset(&ragged, CsvOptions::default()).is_err());

        let text = dir.path().join("text.csv");
        std::fs::write(&text, "0,abc,0\n").unwrap();
        assert!(load_csv_dataset(&text, CsvOptions::default()).is_err());

        let negative = dir.path().join("neg.csv");
        std::fs::write(&negative, "0,0,-1\n").unwrap();
        assert!(load_csv_dataset(&negative, CsvOptions::default()).is_err());
    }

    #[test]
    fn minmax_scaling_maps_columns_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scale.csv");
        std::fs::write(&path, "0,10,0\n5,20,1\n10,30,0\n").unwrap();
        let data = load_csv_dataset(
            &path,
            CsvOptions {
                has_header: false,
                minmax_scale: true,
            },
        )
        .unwrap();
        assert_eq!(data.features.row(0), &[0.0, 0.0]);
        assert_eq!(data.features.row(1), &[0.5, 0.5]);
        assert_eq!(data.features.row(2), &[1.0, 1.0]);
    }

    #[test]
    fn subset_with_all_ids_is_identity() {
        let (train, _) = generate_clusters(&ClusterConfig::six_gaussians(), 2).unwrap();
        let sub = subset(&train, &train.ids).unwrap();
        assert_eq!(sub.features.values(), train.features.values());
        assert_eq!(sub.ids, train.ids);
    }

    #[test]
    fn empty_subset_is_allowed() {
        let (train, _) = generate_clusters(&ClusterConfig::six_gaussians(), 2).unwrap();
        let sub = subset(&train, &[]).unwrap();
        assert_eq!(sub.n(), 0);
    }

    #[test]
    fn subset_permutes_features_with_labels() {
        let config = ClusterConfig {
            centers: vec![(0.0, 0.0), (5.0, 5.0)],
            train_counts: vec![50, 50],
            test_counts: vec![0, 0],
            stds: vec![1.0, 1.0],
            class_of_cluster: vec![0, 1],
        };
        let (train, _) = generate_clusters(&config, 4).unwrap();
        let mut perm: Vec<usize> = (0..100).collect();
        let mut s = Stream::new(8);
        crate::rng::shuffle(&mut s, &mut perm);
        let sub = subset(&train, &perm).unwrap();
        for (row, &id) in perm.iter().enumerate() {
            assert_eq!(sub.features.row(row), train.features.row(id));
            assert_eq!(sub.labels[row], train.labels[id]);
            assert_eq!(sub.ids[row], id);
        }
    }

    #[test]
    fn unknown_and_duplicate_ids_are_rejected() {
        let (train, _) = generate_clusters(&ClusterConfig::six_gaussians(), 2).unwrap();
        assert!(matches!(
            subset(&train, &[5000]),
            Err(Error::UnknownId { id: 5000 })
        ));
        assert!(matches!(
            subset(&train, &[3, 3]),
            Err(Error::DuplicateId { id: 3 })
        ));
    }

    use crate::rng::Stream;

    proptest! {
        #[test]
        fn subsetting_composes(seed in 0u64..500) {
            let config = ClusterConfig {
                centers: vec![(0.0, 0.0), (3.0, 3.0)],
                train_counts: vec![20, 20],
                test_counts: vec![0, 0],
                stds: vec![1.0, 1.0],
                class_of_cluster: vec![0, 1],
            };
            let (train, _) = generate_clusters(&config, 1).unwrap();
            let mut s = Stream::new(seed);
            let first = crate::rng::sample_without_replacement(&mut s, 40, 25);
            let sub = subset(&train, &first).unwrap();
            // T is a subsequence of S expressed in ids.
            let second: Vec<usize> = first.iter().copied().step_by(2).collect();
            let via_sub = subset(&sub, &second).unwrap();
            let direct = subset(&train, &second).unwrap();
            prop_assert_eq!(via_sub.features.values(), direct.features.values());
            prop_assert_eq!(via_sub.labels, direct.labels);
            prop_assert_eq!(via_sub.ids, direct.ids);
        }
    }
}
