//! Datasets, IDX ingestion, partitions across clients, and batch sampling.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::seedstream::{RngStream, SeedTuple, StreamKind};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Row-major feature matrix in `[0, 1]` plus integer labels.
///
/// Features sit behind an `Arc` so relabelled views (label flipping) share
/// the pixel storage.
#[derive(Debug, Clone)]
pub struct Dataset {
    features: Arc<Vec<f64>>,
    /// Per-row column indices of non-zero features, CSR style.
    nonzero: Arc<(Vec<usize>, Vec<u32>)>,
    labels: Vec<u8>,
    n_features: usize,
    classes: usize,
    image_dims: (usize, usize),
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<u8>, n_features: usize) -> Result<Self> {
        if n_features == 0 {
            return Err(Error::Shape("dataset needs at least one feature".into()));
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::Shape(format!(
                "{} feature values do not form {} rows of {}",
                features.len(),
                labels.len(),
                n_features
            )));
        }
        if let Some(i) = features
            .iter()
            .position(|x| !(x.is_finite() && (0.0..=1.0).contains(x)))
        {
            return Err(Error::InvalidArgument(format!(
                "feature value {} at index {i} outside [0, 1]",
                features[i]
            )));
        }
        let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        let mut ptr = Vec::with_capacity(labels.len() + 1);
        let mut idx = Vec::new();
        ptr.push(0);
        for row in features.chunks_exact(n_features) {
            idx.extend((0..n_features as u32).filter(|&j| row[j as usize] != 0.0));
            ptr.push(idx.len());
        }
        Ok(Self {
            nonzero: Arc::new((ptr, idx)),
            features: Arc::new(features),
            labels,
            n_features,
            classes,
            image_dims: (1, n_features),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn features(&self) -> usize {
        self.n_features
    }

    /// One more than the largest label present.
    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.features[r * self.n_features..(r + 1) * self.n_features]
    }

    /// Ascending indices of the non-zero features of row `r`.
    pub fn nonzero(&self, r: usize) -> &[u32] {
        let (ptr, idx) = &*self.nonzero;
        &idx[ptr[r]..ptr[r + 1]]
    }

    pub fn label(&self, r: usize) -> u8 {
        self.labels[r]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Same pixels, new labels.
    pub fn with_labels(&self, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: labels.len(),
            });
        }
        let classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(0);
        Ok(Self {
            features: Arc::clone(&self.features),
            nonzero: Arc::clone(&self.nonzero),
            labels,
            n_features: self.n_features,
            classes,
            image_dims: self.image_dims,
        })
    }

    pub fn label_histogram(&self, rows: &[usize], classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &r in rows {
            h[self.labels[r] as usize] += 1;
        }
        h
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    let is_gz = path.extension().is_some_and(|e| e == "gz");
    if is_gz {
        GzDecoder::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
    } else {
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(bytes)
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Truncated {
            path: path.to_path_buf(),
            expected: at + 4,
            found: bytes.len(),
        })
}

/// Loads an IDX image/label pair. Files ending in `.gz` are decompressed.
/// Pixels are scaled by 1/255.
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (images, labels) = (images.as_ref(), labels.as_ref());

    let img = read_all(images)?;
    let magic = be_u32(&img, 0, images)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            path: images.to_path_buf(),
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let n = be_u32(&img, 4, images)? as usize;
    let rows = be_u32(&img, 8, images)? as usize;
    let cols = be_u32(&img, 12, images)? as usize;
    let p = rows * cols;
    let need = 16 + n * p;
    if img.len() < need {
        return Err(Error::Truncated {
            path: images.to_path_buf(),
            expected: need,
            found: img.len(),
        });
    }

    let lab = read_all(labels)?;
    let magic = be_u32(&lab, 0, labels)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            path: labels.to_path_buf(),
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let n_labels = be_u32(&lab, 4, labels)? as usize;
    if lab.len() < 8 + n_labels {
        return Err(Error::Truncated {
            path: labels.to_path_buf(),
            expected: 8 + n_labels,
            found: lab.len(),
        });
    }
    if n_labels != n {
        return Err(Error::CountMismatch {
            images: n,
            labels: n_labels,
        });
    }

    let features = img[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    let mut data = Dataset::new(features, lab[8..8 + n].to_vec(), p)?;
    data.image_dims = (rows, cols);
    Ok(data)
}

/// Writes `data` as an uncompressed IDX pair. Features are mapped back to
/// bytes with `round(255 x)`, so datasets that came from IDX round-trip
/// exactly.
pub fn write_idx(data: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let (images, labels) = (images.as_ref(), labels.as_ref());
    let (rows, cols) = data.image_dims;
    let mut img = Vec::with_capacity(16 + data.features.len());
    for word in [IDX_IMAGES_MAGIC, data.len() as u32, rows as u32, cols as u32] {
        img.extend_from_slice(&word.to_be_bytes());
    }
    img.extend(data.features.iter().map(|x| (x * 255.0).round() as u8));
    let mut lab = Vec::with_capacity(8 + data.len());
    for word in [IDX_LABELS_MAGIC, data.len() as u32] {
        lab.extend_from_slice(&word.to_be_bytes());
    }
    lab.extend_from_slice(&data.labels);
    for (path, bytes) in [(images, img), (labels, lab)] {
        File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// MNIST train and test splits from a directory holding the four standard
/// files, plain or gzipped.
pub fn load_mnist_dir(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let pick = |stem: &str| {
        let plain = dir.join(stem);
        if plain.exists() {
            plain
        } else {
            dir.join(format!("{stem}.gz"))
        }
    };
    let train = load_idx(pick("train-images-idx3-ubyte"), pick("train-labels-idx1-ubyte"))?;
    let test = load_idx(pick("t10k-images-idx3-ubyte"), pick("t10k-labels-idx1-ubyte"))?;
    Ok((train, test))
}

/// Class-conditional Gaussian blobs around `classes` seeded centroids,
/// clipped to `[0, 1]`.
pub fn synth_generate(seed: u64, n: usize, p: usize, classes: usize) -> Result<Dataset> {
    synth_generate_with_spread(seed, n, p, classes, 0.1)
}

pub fn synth_generate_with_spread(
    seed: u64,
    n: usize,
    p: usize,
    classes: usize,
    spread: f64,
) -> Result<Dataset> {
    if n == 0 || p == 0 || classes == 0 || classes > 256 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs n, p >= 1 and 1 <= C <= 256, got n={n}, p={p}, C={classes}"
        )));
    }
    let mut centroid_rng = RngStream::from_tuple(&SeedTuple::new(seed, 0, 0, 0, StreamKind::Init));
    let centroids: Vec<f64> = (0..classes * p).map(|_| centroid_rng.uniform()).collect();
    let mut rng = RngStream::from_tuple(&SeedTuple::new(seed, 1, 0, 0, StreamKind::Init));
    let mut features = Vec::with_capacity(n * p);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = rng.below(classes as u64) as usize;
        labels.push(y as u8);
        for j in 0..p {
            let x = centroids[y * p + j] + spread * rng.gaussian();
            features.push(x.clamp(0.0, 1.0));
        }
    }
    Dataset::new(features, labels, p)
}

/// Disjoint row-index shards, one per client.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    pub shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn clients(&self) -> usize {
        self.shards.len()
    }

    pub fn total_rows(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }
}

/// Seeded shuffle, then round-robin. Remainder rows land on the
/// lowest-index clients.
pub fn partition_iid(data: &Dataset, m: usize, seed: u64) -> Result<Partition> {
    if m == 0 || m > data.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} rows across {m} clients",
            data.len()
        )));
    }
    let mut rows: Vec<usize> = (0..data.len()).collect();
    RngStream::from_tuple(&SeedTuple::new(seed, 0, 0, 0, StreamKind::Partition)).shuffle(&mut rows);
    let mut shards = vec![Vec::with_capacity(data.len() / m + 1); m];
    for (i, r) in rows.into_iter().enumerate() {
        shards[i % m].push(r);
    }
    Ok(Partition { shards })
}

/// Labels owned by `client` under the round-robin ownership scheme.
///
/// With `m <= C`, label `l` belongs to client `l mod m`. With `m > C`,
/// client `i` owns label `i mod C`, so clients `C, C+1, ...` share labels
/// with clients `0, 1, ...`.
pub fn noniid_labels(client: usize, m: usize, classes: usize) -> Vec<usize> {
    if m <= classes {
        (0..classes).filter(|l| l % m == client).collect()
    } else {
        vec![client % classes]
    }
}

/// Each client holds a restricted label set; the rows of a label are
/// shuffled and dealt evenly among its owners.
pub fn partition_noniid(data: &Dataset, m: usize, seed: u64) -> Result<Partition> {
    if m == 0 || m > data.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot split {} rows across {m} clients",
            data.len()
        )));
    }
    let classes = data.classes();
    let mut owners = vec![Vec::new(); classes];
    for client in 0..m {
        for l in noniid_labels(client, m, classes) {
            owners[l].push(client);
        }
    }
    let mut shards = vec![Vec::new(); m];
    for (label, label_owners) in owners.iter().enumerate() {
        let mut rows: Vec<usize> = (0..data.len())
            .filter(|&r| data.label(r) as usize == label)
            .collect();
        RngStream::from_tuple(&SeedTuple::new(
            seed,
            label as u64 + 1,
            0,
            0,
            StreamKind::Partition,
        ))
        .shuffle(&mut rows);
        for (i, r) in rows.into_iter().enumerate() {
            shards[label_owners[i % label_owners.len()]].push(r);
        }
    }
    Ok(Partition { shards })
}

/// Stateless per-client batch schedule.
///
/// Batch `index` of a client comes from a without-replacement shuffle of
/// its shard; a fresh shuffle starts each pass over the shard and a
/// trailing partial batch is dropped. Shards smaller than the batch size
/// yield the whole shuffled shard.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    shard: Vec<usize>,
    client: usize,
    seed: u64,
    batch_size: usize,
    full: bool,
    cached: Option<(usize, Vec<usize>)>,
}

impl BatchSampler {
    pub fn new(shard: Vec<usize>, client: usize, seed: u64, batch_size: usize) -> Self {
        Self {
            shard,
            client,
            seed,
            batch_size: batch_size.max(1),
            full: false,
            cached: None,
        }
    }

    /// Every batch is the whole shard in storage order.
    pub fn full_shard(shard: Vec<usize>, client: usize) -> Self {
        Self {
            shard,
            client,
            seed: 0,
            batch_size: usize::MAX,
            full: true,
            cached: None,
        }
    }

    pub fn shard(&self) -> &[usize] {
        &self.shard
    }

    pub fn batch(&mut self, index: usize) -> &[usize] {
        if self.full || self.shard.is_empty() {
            return &self.shard;
        }
        let size = self.batch_size.min(self.shard.len());
        let per_pass = self.shard.len() / size;
        let pass = index / per_pass;
        let offset = (index % per_pass) * size;
        if self.cached.as_ref().map(|(p, _)| *p) != Some(pass) {
            let mut order = self.shard.clone();
            RngStream::from_tuple(&SeedTuple::new(
                self.seed,
                pass as u64,
                self.client as u64,
                0,
                StreamKind::DataShuffle,
            ))
            .shuffle(&mut order);
            self.cached = Some((pass, order));
        }
        let order = &self.cached.as_ref().expect("cached above").1;
        &order[offset..offset + size]
    }
}
