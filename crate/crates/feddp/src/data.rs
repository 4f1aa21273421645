//! Datasets, IDX ingestion, synthetic blob generation and non-iid partitioning.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{FedDpError, Result};
use crate::seeding::rng_from;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// A labeled classification dataset with dense real-valued features.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl Dataset {
    pub fn new(features: Array2<f64>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.nrows() != labels.len() {
            return Err(FedDpError::InvalidDataset(format!(
                "{} feature rows vs {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(FedDpError::InvalidDataset("zero features".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(FedDpError::InvalidDataset(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Parameter dimension of a linear softmax model on this data.
    pub fn param_dim(&self) -> usize {
        self.n_features() * self.n_classes
    }

    /// Copies the given rows into a new dataset.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let features = self.features.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Dataset {
            features,
            labels,
            n_classes: self.n_classes,
        }
    }

    /// Concatenates datasets with identical feature/class shape.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts
            .first()
            .ok_or_else(|| FedDpError::InvalidDataset("no parts to concatenate".into()))?;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for part in parts {
            if part.n_features() != first.n_features() || part.n_classes != first.n_classes {
                return Err(FedDpError::InvalidDataset(
                    "shape mismatch between parts".into(),
                ));
            }
            features.extend(part.features.iter().copied());
            labels.extend_from_slice(&part.labels);
        }
        let features = Array2::from_shape_vec((labels.len(), first.n_features()), features)
            .expect("row-major reshape");
        Dataset::new(features, labels, first.n_classes)
    }

    /// Splits off the last `n_test` rows as a test set.
    pub fn split_tail(&self, n_test: usize) -> Result<(Dataset, Dataset)> {
        if n_test >= self.n_samples() {
            return Err(FedDpError::InvalidDataset(format!(
                "test size {n_test} leaves no training data"
            )));
        }
        let n_train = self.n_samples() - n_test;
        let train: Vec<usize> = (0..n_train).collect();
        let test: Vec<usize> = (n_train..self.n_samples()).collect();
        Ok((self.subset(&train), self.subset(&test)))
    }

    /// Writes the columnar CSV form: header `f0..f{k-1},label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        let header: Vec<String> = (0..self.n_features())
            .map(|j| format!("f{j}"))
            .chain(std::iter::once("label".to_string()))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for (row, &label) in self.features.rows().into_iter().zip(&self.labels) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            writeln!(out, "{},{label}", cells.join(","))?;
        }
        Ok(())
    }

    /// Reads the columnar CSV form written by [`Dataset::write_csv`].
    pub fn read_csv(path: &Path) -> Result<Dataset> {
        let mut reader = csv::Reader::from_path(path)?;
        let n_features = reader.headers()?.len().saturating_sub(1);
        if n_features == 0 {
            return Err(FedDpError::InvalidDataset("no feature columns".into()));
        }
        let mut features = Vec::new();
        let mut labels: Vec<usize> = Vec::new();
        for record in reader.records() {
            let record = record?;
            for cell in record.iter().take(n_features) {
                features.push(cell.parse::<f64>().map_err(|e| {
                    FedDpError::InvalidDataset(format!("bad feature value {cell:?}: {e}"))
                })?);
            }
            let label = record
                .get(n_features)
                .ok_or_else(|| FedDpError::InvalidDataset("missing label column".into()))?;
            labels.push(label.parse().map_err(|e| {
                FedDpError::InvalidDataset(format!("bad label {label:?}: {e}"))
            })?);
        }
        let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
        let features = Array2::from_shape_vec((labels.len(), n_features), features)
            .expect("row-major reshape");
        Dataset::new(features, labels, n_classes)
    }
}

/// The samples of one federation, split across `N` clients.
#[derive(Debug, Clone)]
pub struct ClientPartition {
    client_datasets: Vec<Dataset>,
}

impl ClientPartition {
    pub fn new(client_datasets: Vec<Dataset>) -> Result<Self> {
        if client_datasets.is_empty() {
            return Err(FedDpError::InfeasiblePartition("no clients".into()));
        }
        Ok(Self { client_datasets })
    }

    pub fn n_clients(&self) -> usize {
        self.client_datasets.len()
    }

    pub fn clients(&self) -> &[Dataset] {
        &self.client_datasets
    }

    pub fn client(&self, i: usize) -> &Dataset {
        &self.client_datasets[i]
    }

    /// dᵢ per client.
    pub fn client_sizes(&self) -> Vec<usize> {
        self.client_datasets.iter().map(|d| d.n_samples()).collect()
    }

    /// d = Σ dᵢ.
    pub fn total_size(&self) -> usize {
        self.client_datasets.iter().map(|d| d.n_samples()).sum()
    }

    /// All client samples pooled into one dataset.
    pub fn pooled(&self) -> Result<Dataset> {
        let refs: Vec<&Dataset> = self.client_datasets.iter().collect();
        Dataset::concat(&refs)
    }
}

/// Draws `n_samples` points from `n_classes` isotropic Gaussian blobs whose
/// means sit `class_separation` apart from the origin in random directions.
pub fn make_synthetic_dataset(
    n_samples: usize,
    n_features: usize,
    n_classes: usize,
    class_separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_samples == 0 || n_features == 0 {
        return Err(FedDpError::InvalidParameter(
            "n_samples and n_features must be positive".into(),
        ));
    }
    if n_classes < 2 {
        return Err(FedDpError::InvalidParameter(
            "need at least 2 classes".into(),
        ));
    }
    if class_separation < 0.0 {
        return Err(FedDpError::InvalidParameter(
            "class_separation must be nonnegative".into(),
        ));
    }
    let mut rng = rng_from(seed, &[0x5b10b5]);
    // One random unit direction per class, scaled to the requested separation.
    let mut means = Vec::with_capacity(n_classes);
    for _ in 0..n_classes {
        let mut v: Vec<f64> = (0..n_features).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x *= class_separation / norm);
        means.push(v);
    }
    let mut features = Vec::with_capacity(n_samples * n_features);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let class = i % n_classes;
        for j in 0..n_features {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(means[class][j] + noise);
        }
        labels.push(class);
    }
    let features =
        Array2::from_shape_vec((n_samples, n_features), features).expect("row-major reshape");
    Dataset::new(features, labels, n_classes)
}

fn read_idx_header(reader: &mut impl Read, path: &str, expected_magic: u32) -> Result<u32> {
    let magic = reader
        .read_u32::<BigEndian>()
        .map_err(|_| FedDpError::BadMagic {
            path: path.to_string(),
            expected: expected_magic,
            got: 0,
        })?;
    if magic != expected_magic {
        return Err(FedDpError::BadMagic {
            path: path.to_string(),
            expected: expected_magic,
            got: magic,
        });
    }
    Ok(magic)
}

fn read_exact_or_truncated(reader: &mut impl Read, buf: &mut [u8], path: &str) -> Result<()> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = reader.read(&mut buf[filled..])?;
        if n == 0 {
            return Err(FedDpError::TruncatedIdx {
                path: path.to_string(),
                expected: buf.len(),
                got: filled,
            });
        }
        filled += n;
    }
    Ok(())
}

/// Loads an MNIST-style IDX image/label pair. Pixels are scaled to `[0, 1]`.
pub fn load_idx_dataset(image_path: &Path, label_path: &Path) -> Result<Dataset> {
    let image_name = image_path.display().to_string();
    let label_name = label_path.display().to_string();

    let mut images = BufReader::new(File::open(image_path)?);
    read_idx_header(&mut images, &image_name, IDX_IMAGE_MAGIC)?;
    let n_images = images.read_u32::<BigEndian>().map_err(|_| {
        FedDpError::TruncatedIdx {
            path: image_name.clone(),
            expected: 16,
            got: 4,
        }
    })? as usize;
    let rows = images.read_u32::<BigEndian>().map_err(|_| FedDpError::TruncatedIdx {
        path: image_name.clone(),
        expected: 16,
        got: 8,
    })? as usize;
    let cols = images.read_u32::<BigEndian>().map_err(|_| FedDpError::TruncatedIdx {
        path: image_name.clone(),
        expected: 16,
        got: 12,
    })? as usize;
    let n_pixels = rows * cols;
    let mut pixel_bytes = vec![0u8; n_images * n_pixels];
    read_exact_or_truncated(&mut images, &mut pixel_bytes, &image_name)?;

    let mut labels_reader = BufReader::new(File::open(label_path)?);
    read_idx_header(&mut labels_reader, &label_name, IDX_LABEL_MAGIC)?;
    let n_labels = labels_reader
        .read_u32::<BigEndian>()
        .map_err(|_| FedDpError::TruncatedIdx {
            path: label_name.clone(),
            expected: 8,
            got: 4,
        })? as usize;
    let mut label_bytes = vec![0u8; n_labels];
    read_exact_or_truncated(&mut labels_reader, &mut label_bytes, &label_name)?;

    if n_images != n_labels {
        return Err(FedDpError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }

    let features: Vec<f64> = pixel_bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    let features =
        Array2::from_shape_vec((n_images, n_pixels), features).expect("row-major reshape");
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    Dataset::new(features, labels, n_classes)
}

/// Shards the dataset so that each of `n_clients` clients holds samples from
/// exactly `classes_per_client` classes, all clients receiving the same
/// number of samples (extras are truncated).
pub fn partition_noniid(
    dataset: &Dataset,
    n_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<ClientPartition> {
    if n_clients == 0 {
        return Err(FedDpError::InfeasiblePartition("n_clients = 0".into()));
    }
    let n_classes = dataset.n_classes();
    if classes_per_client == 0 || classes_per_client > n_classes {
        return Err(FedDpError::InfeasiblePartition(format!(
            "classes_per_client {classes_per_client} infeasible with {n_classes} classes"
        )));
    }
    let total_shards = n_clients * classes_per_client;
    if total_shards % n_classes != 0 {
        return Err(FedDpError::InfeasiblePartition(format!(
            "{n_clients} clients x {classes_per_client} classes each is not divisible by \
             {n_classes} classes"
        )));
    }
    let shards_per_class = total_shards / n_classes;

    let mut rng = rng_from(seed, &[0x9a271]);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
    for (i, &label) in dataset.labels().iter().enumerate() {
        by_class[label].push(i);
    }
    for indices in &mut by_class {
        if indices.len() < shards_per_class {
            return Err(FedDpError::InfeasiblePartition(format!(
                "a class has {} samples but {shards_per_class} shards are required",
                indices.len()
            )));
        }
        indices.shuffle(&mut rng);
    }

    // Deal shards class-by-class in cycling order so consecutive shards carry
    // distinct classes; client i then takes classes_per_client consecutive shards.
    let mut shard_classes = Vec::with_capacity(total_shards);
    for _ in 0..shards_per_class {
        for class in 0..n_classes {
            shard_classes.push(class);
        }
    }
    let mut next_offset = vec![0usize; n_classes];
    let mut clients = Vec::with_capacity(n_clients);
    let mut client_indices: Vec<Vec<usize>> = vec![Vec::new(); n_clients];
    for (shard, &class) in shard_classes.iter().enumerate() {
        let client = shard / classes_per_client;
        let shard_size = by_class[class].len() / shards_per_class;
        let start = next_offset[class];
        client_indices[client].extend_from_slice(&by_class[class][start..start + shard_size]);
        next_offset[class] = start + shard_size;
    }

    // Truncate to exactly equal client sizes.
    let min_size = client_indices.iter().map(Vec::len).min().unwrap_or(0);
    if min_size == 0 {
        return Err(FedDpError::InfeasiblePartition(
            "a client would receive no samples".into(),
        ));
    }
    for indices in &mut client_indices {
        indices.truncate(min_size);
        indices.sort_unstable();
        clients.push(dataset.subset(indices));
    }
    ClientPartition::new(clients)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{accuracy, train_centralized};
    use byteorder::WriteBytesExt;

    #[test]
    fn synthetic_construction_contract() {
        let data = make_synthetic_dataset(100, 4, 2, 3.0, 7).unwrap();
        assert_eq!(data.n_samples(), 100);
        assert_eq!(data.n_features(), 4);
        assert!(data.labels().iter().all(|&l| l < 2));
        let again = make_synthetic_dataset(100, 4, 2, 3.0, 7).unwrap();
        assert_eq!(data, again);
        assert_ne!(data, make_synthetic_dataset(100, 4, 2, 3.0, 8).unwrap());
    }

    #[test]
    fn zero_separation_is_unlearnable() {
        let data = make_synthetic_dataset(400, 2, 2, 0.0, 1).unwrap();
        let params = train_centralized(&data, 300, 0.5, 0.0).unwrap();
        let acc = accuracy(&params.0.view(), &data).unwrap();
        assert!((acc - 0.5).abs() < 0.15, "accuracy {acc} far from chance");
    }

    #[test]
    fn synthetic_rejects_degenerate_requests() {
        assert!(make_synthetic_dataset(10, 2, 1, 1.0, 1).is_err());
        assert!(make_synthetic_dataset(0, 2, 2, 1.0, 1).is_err());
        assert!(make_synthetic_dataset(10, 2, 2, -1.0, 1).is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.csv");
        let data = make_synthetic_dataset(25, 3, 3, 1.5, 9).unwrap();
        data.write_csv(&path).unwrap();
        let back = Dataset::read_csv(&path).unwrap();
        assert_eq!(data, back);
    }

    fn write_idx_pair(
        dir: &Path,
        n_images: u32,
        n_labels: u32,
    ) -> (std::path::PathBuf, std::path::PathBuf) {
        let images = dir.join("images.idx");
        let labels = dir.join("labels.idx");
        let mut f = File::create(&images).unwrap();
        f.write_u32::<BigEndian>(IDX_IMAGE_MAGIC).unwrap();
        f.write_u32::<BigEndian>(n_images).unwrap();
        f.write_u32::<BigEndian>(2).unwrap();
        f.write_u32::<BigEndian>(2).unwrap();
        for i in 0..n_images * 4 {
            f.write_all(&[(i % 256) as u8]).unwrap();
        }
        let mut f = File::create(&labels).unwrap();
        f.write_u32::<BigEndian>(IDX_LABEL_MAGIC).unwrap();
        f.write_u32::<BigEndian>(n_labels).unwrap();
        for i in 0..n_labels {
            f.write_all(&[(i % 2) as u8]).unwrap();
        }
        (images, labels)
    }

    #[test]
    fn idx_loader_reads_and_scales() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 3, 3);
        let data = load_idx_dataset(&images, &labels).unwrap();
        assert_eq!(data.n_samples(), 3);
        assert_eq!(data.n_features(), 4);
        assert!((data.features()[[0, 1]] - 1.0 / 255.0).abs() < 1e-12);
        assert!(data.features().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn idx_empty_file_is_a_magic_error() {
        let dir = tempfile::tempdir().unwrap();
        let empty = dir.path().join("empty.idx");
        File::create(&empty).unwrap();
        let (_, labels) = write_idx_pair(dir.path(), 1, 1);
        match load_idx_dataset(&empty, &labels) {
            Err(FedDpError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn idx_count_mismatch_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 10, 9);
        match load_idx_dataset(&images, &labels) {
            Err(FedDpError::CountMismatch { images: 10, labels: 9 }) => {}
            other => panic!("expected CountMismatch, got {other:?}"),
        }
    }

    #[test]
    fn idx_truncated_payload_is_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let (images, labels) = write_idx_pair(dir.path(), 3, 3);
        let bytes = std::fs::read(&images).unwrap();
        std::fs::write(&images, &bytes[..bytes.len() - 2]).unwrap();
        match load_idx_dataset(&images, &labels) {
            Err(FedDpError::TruncatedIdx { .. }) => {}
            other => panic!("expected TruncatedIdx, got {other:?}"),
        }
    }

    #[test]
    fn single_client_partition_holds_everything() {
        let data = make_synthetic_dataset(90, 3, 3, 1.0, 5).unwrap();
        let partition = partition_noniid(&data, 1, 3, 5).unwrap();
        assert_eq!(partition.n_clients(), 1);
        assert_eq!(partition.total_size(), 90);
        assert_eq!(partition.pooled().unwrap().n_samples(), 90);
    }

    #[test]
    fn partition_gives_each_client_the_requested_classes() {
        let data = make_synthetic_dataset(500, 4, 5, 1.0, 3).unwrap();
        let partition = partition_noniid(&data, 10, 2, 3).unwrap();
        assert_eq!(partition.n_clients(), 10);
        let sizes = partition.client_sizes();
        assert!(sizes.iter().all(|&s| s == sizes[0]), "unequal sizes {sizes:?}");
        for client in partition.clients() {
            let mut classes: Vec<usize> = client.labels().to_vec();
            classes.sort_unstable();
            classes.dedup();
            assert_eq!(classes.len(), 2);
        }
    }

    #[test]
    fn partition_conserves_samples_without_duplication() {
        // 6 clients x 2 classes over 3 classes divides evenly.
        let data = make_synthetic_dataset(360, 3, 3, 1.0, 11).unwrap();
        let partition = partition_noniid(&data, 6, 2, 11).unwrap();
        assert_eq!(partition.total_size(), 360);
        let mut rows: Vec<Vec<u64>> = partition
            .clients()
            .iter()
            .flat_map(|c| {
                c.features()
                    .rows()
                    .into_iter()
                    .map(|r| r.iter().map(|v| v.to_bits()).collect())
            })
            .collect();
        rows.sort();
        let mut original: Vec<Vec<u64>> = data
            .features()
            .rows()
            .into_iter()
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect();
        original.sort();
        assert_eq!(rows, original);
    }

    #[test]
    fn infeasible_partitions_are_rejected() {
        let data = make_synthetic_dataset(100, 3, 4, 1.0, 1).unwrap();
        assert!(partition_noniid(&data, 0, 2, 1).is_err());
        assert!(partition_noniid(&data, 4, 0, 1).is_err());
        assert!(partition_noniid(&data, 4, 5, 1).is_err());
        // 3 clients x 2 classes = 6 shards not divisible by 4 classes.
        assert!(partition_noniid(&data, 3, 2, 1).is_err());
    }

    #[test]
    fn split_tail_keeps_order_and_counts() {
        let data = make_synthetic_dataset(50, 2, 2, 1.0, 2).unwrap();
        let (train, test) = data.split_tail(10).unwrap();
        assert_eq!(train.n_samples(), 40);
        assert_eq!(test.n_samples(), 10);
        assert!(data.split_tail(50).is_err());
    }
}
