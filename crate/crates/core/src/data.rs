//! Datasets: CIFAR binary readers, a synthetic pattern generator, seeded
//! splits and per-epoch batch orders.
//!
//! CIFAR-10 records are 3073 bytes (label, then 3072 pixel bytes stored
//! channel-planar R, G, B with rows in order). CIFAR-100 records are 3074
//! bytes (coarse label, fine label, pixels); the fine label is used.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR10_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR100_RECORD: usize = 2 + CIFAR_PIXELS;
pub const CIFAR_BATCH_RECORDS: usize = 10_000;
pub const CIFAR10_CLASSES: usize = 10;
pub const CIFAR100_CLASSES: usize = 100;

/// Images stored back to back as `C×H×W` blocks with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    image_shape: [usize; 3],
    pixels: Vec<f64>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(
        image_shape: [usize; 3],
        pixels: Vec<f64>,
        labels: Vec<usize>,
        class_count: usize,
    ) -> Result<Self> {
        let per = image_shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::invalid(format!(
                "image shape {image_shape:?} is empty"
            )));
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::invalid(format!(
                "{} pixel values for {} images of shape {image_shape:?}",
                pixels.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::invalid(format!(
                "label {bad} outside [0, {class_count})"
            )));
        }
        Ok(Self {
            image_shape,
            pixels,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image_tensor(&self, i: usize) -> Tensor {
        Tensor::new(self.image_shape.to_vec(), self.image(i).to_vec()).expect("shape checked")
    }

    /// Images `N×C×H×W` and labels (as floats) for the given indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        if indices.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(n * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "sample {i} out of range ({})",
                    self.len()
                )));
            }
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i] as f64);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.image_shape);
        Ok((Tensor::new(shape, pixels)?, Tensor::from_vec(labels)))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let n = self.image_len();
        let mut pixels = Vec::with_capacity(n * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "sample {i} out of range ({})",
                    self.len()
                )));
            }
            pixels.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        Dataset::new(self.image_shape, pixels, labels, self.class_count)
    }

    /// Hex SHA-256 over shape, class count, labels and pixel bits.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for d in self.image_shape {
            h.update((d as u64).to_le_bytes());
        }
        h.update((self.class_count as u64).to_le_bytes());
        for &l in &self.labels {
            h.update((l as u64).to_le_bytes());
        }
        for &p in &self.pixels {
            h.update(p.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_error(path: &Path, offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn parse_records(
    path: &Path,
    bytes: &[u8],
    record: usize,
    label_at: usize,
    classes: usize,
) -> Result<Dataset> {
    let whole = bytes.len() / record * record;
    if whole != bytes.len() {
        return Err(format_error(
            path,
            whole,
            format!(
                "truncated record: {} trailing bytes, records are {record} bytes",
                bytes.len() - whole
            ),
        ));
    }
    let count = bytes.len() / record;
    let mut pixels = Vec::with_capacity(count * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(count);
    for (r, chunk) in bytes.chunks_exact(record).enumerate() {
        let label = chunk[label_at] as usize;
        if label >= classes {
            return Err(format_error(
                path,
                r * record + label_at,
                format!("label {label} outside [0, {classes})"),
            ));
        }
        labels.push(label);
        pixels.extend(
            chunk[record - CIFAR_PIXELS..]
                .iter()
                .map(|&b| b as f64 / 255.0),
        );
    }
    Dataset::new([3, CIFAR_SIDE, CIFAR_SIDE], pixels, labels, classes)
}

/// Reads a CIFAR-10 binary file with any number of whole records.
pub fn read_cifar10_file(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    parse_records(path, &bytes, CIFAR10_RECORD, 0, CIFAR10_CLASSES)
}

/// Reads a CIFAR-100 binary file with any number of whole records.
pub fn read_cifar100_file(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    parse_records(path, &bytes, CIFAR100_RECORD, 1, CIFAR100_CLASSES)
}

/// Reads a published CIFAR-10 batch file, which holds exactly 10000 records.
pub fn read_cifar10_batch(path: &Path) -> Result<Dataset> {
    let bytes = read_file(path)?;
    let expected = CIFAR_BATCH_RECORDS * CIFAR10_RECORD;
    if bytes.len() != expected {
        return Err(format_error(
            path,
            bytes.len().min(expected),
            format!("batch file is {} bytes, expected {expected}", bytes.len()),
        ));
    }
    parse_records(path, &bytes, CIFAR10_RECORD, 0, CIFAR10_CLASSES)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let first = parts
        .first()
        .ok_or_else(|| Error::invalid("no dataset parts"))?;
    let (shape, classes) = (first.image_shape, first.class_count);
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for p in parts {
        pixels.extend(p.pixels);
        labels.extend(p.labels);
    }
    Dataset::new(shape, pixels, labels, classes)
}

/// Train and validation split of a dataset directory.
#[derive(Clone, Debug)]
pub struct TrainValidation {
    pub train: Dataset,
    pub validation: Dataset,
}

/// Loads `cifar-10-batches-bin`: `data_batch_1.bin`…`data_batch_5.bin` for
/// training and `test_batch.bin` as validation.
pub fn load_cifar10(dir: &Path) -> Result<TrainValidation> {
    let train = (1..=5)
        .map(|i| read_cifar10_batch(&dir.join(format!("data_batch_{i}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainValidation {
        train: concat(train)?,
        validation: read_cifar10_batch(&dir.join("test_batch.bin"))?,
    })
}

/// Loads `cifar-100-binary`: `train.bin` and `test.bin` (as validation).
pub fn load_cifar100(dir: &Path) -> Result<TrainValidation> {
    Ok(TrainValidation {
        train: read_cifar100_file(&dir.join("train.bin"))?,
        validation: read_cifar100_file(&dir.join("test.bin"))?,
    })
}

fn pixel_bytes(path: &Path, data: &Dataset, i: usize) -> Result<Vec<u8>> {
    if data.image_shape != [3, CIFAR_SIDE, CIFAR_SIDE] {
        return Err(Error::invalid(format!(
            "{}: CIFAR records hold 3×32×32 images, got {:?}",
            path.display(),
            data.image_shape
        )));
    }
    Ok(data
        .image(i)
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect())
}

/// Writes `data` as CIFAR-10 records; pixels are rounded to the byte grid.
pub fn write_cifar10(path: &Path, data: &Dataset) -> Result<()> {
    let mut out = Vec::with_capacity(data.len() * CIFAR10_RECORD);
    for i in 0..data.len() {
        let label = u8::try_from(data.labels[i])
            .map_err(|_| Error::invalid("label does not fit in a byte"))?;
        out.push(label);
        out.extend(pixel_bytes(path, data, i)?);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes `data` as CIFAR-100 records with the given coarse labels.
pub fn write_cifar100(path: &Path, data: &Dataset, coarse: &[u8]) -> Result<()> {
    if coarse.len() != data.len() {
        return Err(Error::invalid("one coarse label per record is required"));
    }
    let mut out = Vec::with_capacity(data.len() * CIFAR100_RECORD);
    for i in 0..data.len() {
        let label = u8::try_from(data.labels[i])
            .map_err(|_| Error::invalid("label does not fit in a byte"))?;
        out.push(coarse[i]);
        out.push(label);
        out.extend(pixel_bytes(path, data, i)?);
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parameters of the synthetic pattern task.
///
/// Class `c` is a field of bright bars oriented at `π·c/classes`, tinted by a
/// per-class color. Each sample also gets two randomly oriented distractor
/// gratings. `noise` scales every per-sample perturbation (orientation and
/// tint jitter, bar phase, distractor contrast, multiplicative pixel noise),
/// so `noise = 0` makes all images of a class equal.
/// `label_noise` is the fraction of samples whose label is redrawn uniformly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    pub classes: usize,
    /// Height and width.
    pub image_size: usize,
    pub seed: u64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default)]
    pub label_noise: f64,
}

fn default_noise() -> f64 {
    1.0
}

/// Bar period in pixels is `side / BAR_CYCLES`.
const BAR_CYCLES: f64 = 2.5;
/// Exponent that narrows the raised cosine into thin bars.
const BAR_SHARPNESS: i32 = 4;
const BAR_GAIN: f64 = 2.0;
const DISTRACTORS: usize = 2;
const DISTRACTOR_GAIN: f64 = 0.5;
/// Orientation jitter in units of the class spacing, per unit noise.
const ANGLE_JITTER: f64 = 0.5;
const TINT_JITTER: f64 = 0.3;

impl SyntheticSpec {
    pub fn new(samples: usize, classes: usize, image_size: usize, seed: u64) -> Self {
        Self {
            samples,
            classes,
            image_size,
            seed,
            noise: default_noise(),
            label_noise: 0.0,
        }
    }
}

pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec {
        samples: n,
        classes,
        image_size: side,
        seed,
        noise,
        label_noise,
    } = *spec;
    if classes < 2 {
        return Err(Error::invalid("synthetic data needs at least two classes"));
    }
    if n < classes {
        return Err(Error::invalid(format!(
            "{n} samples cannot cover {classes} classes"
        )));
    }
    if side == 0 {
        return Err(Error::invalid("image size must be positive"));
    }
    if !(noise.is_finite() && noise >= 0.0) {
        return Err(Error::invalid(format!(
            "noise must be finite and >= 0, got {noise}"
        )));
    }
    if !(0.0..=1.0).contains(&label_noise) {
        return Err(Error::invalid(format!(
            "label_noise must lie in [0, 1], got {label_noise}"
        )));
    }
    use std::f64::consts::PI;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let colors: Vec<[f64; 3]> = (0..classes)
        .map(|_| [rng.random(), rng.random(), rng.random()])
        .collect();
    let gauss = Normal::new(0.0, 1.0).expect("unit normal");
    let freq = 2.0 * PI * BAR_CYCLES / side as f64;
    let bars = |x: usize, y: usize, (s, c): (f64, f64), phase: f64| {
        let g = 0.5 + 0.5 * (freq * (x as f64 * c + y as f64 * s) + phase).cos();
        g.powi(BAR_SHARPNESS)
    };
    let mut pixels = Vec::with_capacity(n * 3 * side * side);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // balanced classes in a fixed cycle
        let class = i % classes;
        // draw order per sample: tint, orientation, phase, distractors, pixels, label
        let tint: Vec<f64> = colors[class]
            .iter()
            .map(|b| (b + noise * TINT_JITTER * gauss.sample(&mut rng)).clamp(0.0, 1.0))
            .collect();
        let theta =
            PI * (class as f64 + noise * ANGLE_JITTER * gauss.sample(&mut rng)) / classes as f64;
        let dir = theta.sin_cos();
        let phase = noise * PI * (2.0 * rng.random::<f64>() - 1.0);
        let distractors: Vec<((f64, f64), f64, [f64; 3])> = (0..DISTRACTORS)
            .map(|_| {
                let angle = PI * rng.random::<f64>();
                let ph = 2.0 * PI * rng.random::<f64>();
                (
                    angle.sin_cos(),
                    ph,
                    [rng.random(), rng.random(), rng.random()],
                )
            })
            .collect();
        for (ch, &t) in tint.iter().enumerate() {
            for y in 0..side {
                for x in 0..side {
                    let jitter = 1.0 + noise * gauss.sample(&mut rng);
                    let mut v = (0.3 + 0.7 * t) * BAR_GAIN * bars(x, y, dir, phase) * jitter;
                    for &(d, ph, col) in &distractors {
                        v += noise * DISTRACTOR_GAIN * col[ch] * bars(x, y, d, ph);
                    }
                    pixels.push(v.clamp(0.0, 1.0));
                }
            }
        }
        let label = if label_noise > 0.0 && rng.random::<f64>() < label_noise {
            rng.random_range(0..classes)
        } else {
            class
        };
        labels.push(label);
    }
    Dataset::new([3, side, side], pixels, labels, classes)
}

/// Deterministic permutation of `0..n` for `seed`.
fn permutation(n: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Indices into the source dataset for a two-way split.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitIndices {
    pub kept: Vec<usize>,
    pub taken: Vec<usize>,
}

/// Takes `n` samples out by seeded shuffle; both parts keep source order.
pub fn split_indices(len: usize, n: usize, seed: u64) -> Result<SplitIndices> {
    if n > 0 && n >= len {
        return Err(Error::invalid(format!(
            "cannot take {n} of {len} samples and leave any behind"
        )));
    }
    let perm = permutation(len, seed, u64::MAX);
    let mut taken = perm[..n].to_vec();
    let mut kept = perm[n..].to_vec();
    taken.sort_unstable();
    kept.sort_unstable();
    Ok(SplitIndices { kept, taken })
}

/// Splits `n_monitor` samples off the training pool; returns `(train, monitor)`.
pub fn split_monitor(data: &Dataset, n_monitor: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_monitor == 0 {
        return Ok((
            data.clone(),
            Dataset::new(data.image_shape, vec![], vec![], data.class_count)?,
        ));
    }
    let s = split_indices(data.len(), n_monitor, seed)?;
    Ok((data.subset(&s.kept)?, data.subset(&s.taken)?))
}

/// Sample order for one epoch, chunked into batches; the last batch may be
/// short.
pub fn batch_iterator(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be at least 1");
    permutation(len, seed, epoch)
        .chunks(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Where a run's data come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    /// Generated pool split into train, validation and monitor parts.
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
        validation: usize,
    },
    Cifar10 {
        path: PathBuf,
        /// Use only the first `limit` training and validation records.
        #[serde(default)]
        limit: Option<usize>,
    },
    Cifar100 {
        path: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl DatasetSource {
    /// Training pool (monitor samples not yet removed) and validation set.
    pub fn load(&self) -> Result<TrainValidation> {
        match self {
            DatasetSource::Synthetic { spec, validation } => {
                let pool = synthetic_dataset(spec)?;
                let s = split_indices(pool.len(), *validation, spec.seed ^ 0x5eed)?;
                Ok(TrainValidation {
                    train: pool.subset(&s.kept)?,
                    validation: pool.subset(&s.taken)?,
                })
            }
            DatasetSource::Cifar10 { path, limit } => truncate(load_cifar10(path)?, *limit),
            DatasetSource::Cifar100 { path, limit } => truncate(load_cifar100(path)?, *limit),
        }
    }
}

fn truncate(tv: TrainValidation, limit: Option<usize>) -> Result<TrainValidation> {
    let Some(n) = limit else { return Ok(tv) };
    let cut = |d: &Dataset| d.subset(&(0..n.min(d.len())).collect::<Vec<_>>());
    Ok(TrainValidation {
        train: cut(&tv.train)?,
        validation: cut(&tv.validation)?,
    })
}

/// Reads a CIFAR file, picking the layout from whichever record size
/// divides the file length (CIFAR-10 first).
pub fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let len = fs::metadata(path).map_err(|e| Error::io(path, e))?.len() as usize;
    if len % CIFAR10_RECORD == 0 {
        read_cifar10_file(path)
    } else if len % CIFAR100_RECORD == 0 {
        read_cifar100_file(path)
    } else {
        Err(format_error(
            path,
            len / CIFAR10_RECORD * CIFAR10_RECORD,
            "length is not a whole number of CIFAR-10 or CIFAR-100 records",
        ))
    }
}
