//! Datasets: IDX and CIFAR-10 binary loaders, a synthetic crater generator,
//! stratified 50/50 splitting and seeded batch plans.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::init::{derive_stream, Purpose, RngStream};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, C, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.dims().len() != 4 || images.dims()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                op: "dataset",
                left: images.dims().to_vec(),
                right: vec![labels.len()],
            });
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::LabelOutOfRange {
                index,
                label,
                num_classes,
            });
        }
        Ok(Dataset {
            name: name.into(),
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn sample_dims(&self) -> &[usize] {
        &self.images.dims()[1..]
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Copies the selected samples into a batch tensor, in the given order.
    pub fn gather(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per: usize = self.sample_dims().iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut dims = self.images.dims().to_vec();
        dims[0] = indices.len();
        let images = Tensor::from_vec(Shape::new(dims).expect("non-empty selection"), data).expect("sizes agree");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], name: impl Into<String>) -> Dataset {
        let (images, labels) = self.gather(indices);
        Dataset {
            name: name.into(),
            images,
            labels,
            num_classes: self.num_classes,
        }
    }
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

/// Parses an IDX header; returns the dims and the payload offset.
fn idx_header(path: &Path, bytes: &[u8], magic: u32) -> Result<(Vec<usize>, usize)> {
    let ndims = (magic & 0xff) as usize;
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(format_err(path, bytes.len(), format!("file too short for magic: {} bytes", bytes.len())));
    }
    let found = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
    if found != magic {
        return Err(format_err(path, 0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}")));
    }
    if bytes.len() < header {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated header: expected {header} bytes, found {}", bytes.len()),
        ));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize)
        .collect();
    let payload: usize = dims.iter().product();
    if bytes.len() - header != payload {
        return Err(format_err(
            path,
            bytes.len(),
            format!("payload length mismatch: expected {payload} bytes, found {}", bytes.len() - header),
        ));
    }
    Ok((dims, header))
}

/// Reads an IDX image file (`0x00000803`, dims `[N, H, W]`) as `[N, 1, H, W]` scaled by 1/255.
pub fn read_idx_images(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let (dims, start) = idx_header(path, &bytes, IDX_IMAGES)?;
    let shape = Shape::new(vec![dims[0], 1, dims[1], dims[2]]).map_err(|e| format_err(path, 4, e.to_string()))?;
    let data = bytes[start..].iter().map(|&b| f64::from(b) / 255.0).collect();
    Tensor::from_vec(shape, data)
}

/// Reads an IDX label file (`0x00000801`, dims `[N]`).
pub fn read_idx_labels(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    let (_, start) = idx_header(path, &bytes, IDX_LABELS)?;
    Ok(bytes[start..].iter().map(|&b| b as usize).collect())
}

pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let x = read_idx_images(&images)?;
    let y = read_idx_labels(&labels)?;
    if x.dims()[0] != y.len() {
        return Err(format_err(
            labels.as_ref(),
            0,
            format!("{} labels for {} images", y.len(), x.dims()[0]),
        ));
    }
    let classes = y.iter().copied().max().map_or(2, |m| (m + 1).max(2));
    Dataset::new("idx", x, y, classes)
}

/// Writes a single-channel dataset as an IDX image/label pair, quantizing pixels to `round(255 v)`.
pub fn write_idx(dataset: &Dataset, images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<()> {
    let dims = dataset.images.dims();
    if dims[1] != 1 {
        return Err(Error::InvalidShape {
            dims: dims.to_vec(),
            reason: "IDX images must have one channel".into(),
        });
    }
    if let Some(&bad) = dataset.labels.iter().find(|&&l| l > 255) {
        return Err(Error::Config(format!("label {bad} does not fit in an IDX byte")));
    }
    let mut img = IDX_IMAGES.to_be_bytes().to_vec();
    for d in [dims[0], dims[2], dims[3]] {
        img.extend((d as u32).to_be_bytes());
    }
    img.extend(dataset.images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    let mut lab = IDX_LABELS.to_be_bytes().to_vec();
    lab.extend((dataset.len() as u32).to_be_bytes());
    lab.extend(dataset.labels.iter().map(|&l| l as u8));
    for (path, bytes) in [(images.as_ref(), img), (labels.as_ref(), lab)] {
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads a CIFAR-10 binary batch: records of one label byte followed by the
/// R, G and B 32x32 planes. Keeps at most `max_per_class` records per label,
/// in file order.
pub fn load_cifar10_binary(path: impl AsRef<Path>, max_per_class: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = read_file(path)?;
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(format_err(
            path,
            bytes.len() - bytes.len() % CIFAR_RECORD,
            format!("file size {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
        ));
    }
    let mut kept = [0usize; 10];
    let mut labels = Vec::new();
    let mut data = Vec::new();
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(format_err(path, r * CIFAR_RECORD, format!("label byte {label} out of range")));
        }
        if kept[label] >= max_per_class {
            continue;
        }
        kept[label] += 1;
        labels.push(label);
        data.extend(rec[1..].iter().map(|&b| f64::from(b) / 255.0));
    }
    if labels.is_empty() {
        return Err(format_err(path, 0, "no records selected"));
    }
    let images = Tensor::from_vec(Shape::new(vec![labels.len(), 3, 32, 32])?, data)?;
    Dataset::new("cifar10", images, labels, 10)
}

pub const CRATER_SIZE: usize = 15;

/// Draws a 15x15 grayscale image: noisy background, plus either a bright
/// annulus (crater, label 1) or a few Gaussian blobs (label 0).
fn crater_image(rng: &mut RngStream, crater: bool, out: &mut [f64]) {
    let n = CRATER_SIZE;
    let base = rng.uniform(0.05, 0.25);
    for v in out.iter_mut() {
        *v = base + rng.uniform(0.0, 0.2);
    }
    let mut add = |f: &dyn Fn(f64, f64) -> f64| {
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] += f(i as f64, j as f64);
            }
        }
    };
    if crater {
        let (cy, cx) = (rng.uniform(5.5, 8.5), rng.uniform(5.5, 8.5));
        let radius = rng.uniform(2.5, 5.0);
        let thickness = rng.uniform(0.8, 1.5);
        let amp = rng.uniform(0.25, 0.6);
        add(&|i, j| {
            let d = ((i - cy).powi(2) + (j - cx).powi(2)).sqrt();
            amp * (-((d - radius) / thickness).powi(2)).exp()
        });
    }
    let blobs = if crater {
        rng.below(2) as usize
    } else {
        1 + rng.below(3) as usize
    };
    for _ in 0..blobs {
        let (cy, cx) = (rng.uniform(1.0, 13.0), rng.uniform(1.0, 13.0));
        let sigma = rng.uniform(0.8, 2.5);
        let amp = rng.uniform(0.25, 0.6);
        add(&|i, j| amp * (-((i - cy).powi(2) + (j - cx).powi(2)) / (2.0 * sigma * sigma)).exp());
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// `n_pos` craters (label 1) followed by `n_neg` non-craters (label 0), fully determined by `seed`.
pub fn synth_craters(n_pos: usize, n_neg: usize, seed: u64) -> Result<Dataset> {
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config("synthetic class counts must be >= 1".into()));
    }
    let mut rng = derive_stream(seed, Purpose::Data, 0);
    let total = n_pos + n_neg;
    let per = CRATER_SIZE * CRATER_SIZE;
    let mut data = vec![0.0; total * per];
    let mut labels = Vec::with_capacity(total);
    for (i, img) in data.chunks_exact_mut(per).enumerate() {
        let crater = i < n_pos;
        crater_image(&mut rng, crater, img);
        labels.push(crater as usize);
    }
    let images = Tensor::from_vec(Shape::new(vec![total, 1, CRATER_SIZE, CRATER_SIZE])?, data)?;
    Dataset::new("synth_craters", images, labels, 2)
}

/// Stratified split into disjoint halves after a seeded shuffle within each class.
///
/// A class with an odd count gives its extra sample alternately to train and
/// test, so the halves differ in size by at most one.
pub fn split_50_50(dataset: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if dataset.len() < 2 {
        return Err(Error::Config("need at least 2 samples to split".into()));
    }
    let mut rng = derive_stream(seed, Purpose::Data, 1);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut extra_to_train = true;
    for class in 0..dataset.num_classes {
        let mut idx: Vec<usize> = (0..dataset.len()).filter(|&i| dataset.labels[i] == class).collect();
        rng.shuffle(&mut idx);
        let mut cut = idx.len() / 2;
        if idx.len() % 2 == 1 {
            if extra_to_train {
                cut += 1;
            }
            extra_to_train = !extra_to_train;
        }
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::Config("split produced an empty half".into()));
    }
    Ok((
        dataset.subset(&train, format!("{}/train", dataset.name)),
        dataset.subset(&test, format!("{}/test", dataset.name)),
    ))
}

/// Epoch-by-epoch minibatch order; epoch `e` uses a fresh permutation from the
/// data-order stream `(seed, e)`. The final batch of an epoch may be short; a
/// trailing batch of one sample is folded into the batch before it, since
/// train-mode BatchNorm needs at least two samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub epochs: usize,
    pub batch_size: usize,
    pub samples: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn batches_per_epoch(&self) -> usize {
        let n = self.samples.div_ceil(self.batch_size);
        if n > 1 && self.samples % self.batch_size == 1 {
            n - 1
        } else {
            n
        }
    }

    pub fn total_batches(&self) -> usize {
        self.epochs * self.batches_per_epoch()
    }

    pub fn permutation(&self, epoch: usize) -> Vec<usize> {
        derive_stream(self.seed, Purpose::DataOrder, epoch as u64).permutation(self.samples)
    }

    pub fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = self
            .permutation(epoch)
            .chunks(self.batch_size)
            .map(<[usize]>::to_vec)
            .collect();
        if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
            let tail = out.pop().expect("non-empty");
            out.last_mut().expect("non-empty").extend(tail);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_counts_and_determinism() {
        let a = synth_craters(458, 765, 3).unwrap();
        assert_eq!(a.class_counts(), vec![765, 458]);
        assert_eq!(a.sample_dims(), &[1, 15, 15]);
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a, synth_craters(458, 765, 3).unwrap());
        assert_ne!(a.images, synth_craters(458, 765, 4).unwrap().images);
    }

    #[test]
    fn split_ten_is_five_five() {
        let d = synth_craters(3, 7, 1).unwrap();
        let (tr, te) = split_50_50(&d, 9).unwrap();
        assert_eq!((tr.len(), te.len()), (5, 5));
        for (a, b) in tr.class_counts().iter().zip(te.class_counts()) {
            assert!(a.abs_diff(b) <= 1);
        }
    }

    #[test]
    fn split_union_is_original_multiset() {
        let d = synth_craters(11, 8, 2).unwrap();
        let (tr, te) = split_50_50(&d, 5).unwrap();
        let key = |ds: &Dataset| -> Vec<(Vec<u64>, usize)> {
            let per = 225;
            (0..ds.len())
                .map(|i| {
                    let px = ds.images.data()[i * per..(i + 1) * per].iter().map(|v| v.to_bits()).collect();
                    (px, ds.labels[i])
                })
                .collect()
        };
        let mut joined = key(&tr);
        joined.extend(key(&te));
        let mut orig = key(&d);
        joined.sort();
        orig.sort();
        assert_eq!(joined, orig);
    }

    #[test]
    fn batch_plan_covers_every_sample_each_epoch() {
        let plan = BatchPlan {
            epochs: 3,
            batch_size: 4,
            samples: 10,
            seed: 1,
        };
        assert_eq!(plan.batches_per_epoch(), 3);
        assert_eq!(plan.total_batches(), 9);
        for e in 0..3 {
            let mut all: Vec<usize> = plan.batches(e).concat();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
        assert_ne!(plan.permutation(0), plan.permutation(1));
        let odd = BatchPlan { samples: 9, ..plan };
        let sizes: Vec<usize> = odd.batches(0).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![4, 5]);
        assert_eq!(odd.batches_per_epoch(), 2);
        assert_eq!(plan.permutation(2), plan.permutation(2));
    }
}
