//! Image datasets: CIFAR-100 binary ingestion, synthetic class-conditional
//! images, and IID client partitioning.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR100_CLASSES: usize = 100;
const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
/// Coarse label byte, fine label byte, then R, G and B planes.
pub const CIFAR100_RECORD: usize = 2 + CIFAR_PIXELS;

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, 3, H, W]`, values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let s = images.shape();
        if s.len() != 4 || s[1] != 3 || s[0] != labels.len() {
            return Err(Error::Dimension(format!("{} labels for images of shape {s:?}", labels.len())));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset { images, labels, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    /// Copies the selected images into a new `[k, 3, H, W]` tensor.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let s = self.images.shape();
        let plane = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
        }
        Tensor::from_parts(vec![indices.len(), s[1], s[2], s[3]], data)
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }
}

pub fn load_cifar100_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar100(&bytes)
}

pub fn parse_cifar100(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR100_RECORD) {
        let offset = (bytes.len() / CIFAR100_RECORD * CIFAR100_RECORD) as u64;
        return Err(Error::Format {
            offset,
            message: format!(
                "file length {} is not a positive multiple of the {CIFAR100_RECORD}-byte record",
                bytes.len()
            ),
        });
    }
    let n = bytes.len() / CIFAR100_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for (i, record) in bytes.chunks_exact(CIFAR100_RECORD).enumerate() {
        let fine = record[1] as usize;
        if fine >= CIFAR100_CLASSES {
            return Err(Error::Format {
                offset: (i * CIFAR100_RECORD + 1) as u64,
                message: format!("fine label {fine} is not below {CIFAR100_CLASSES}"),
            });
        }
        labels.push(fine);
        pixels.extend(record[2..].iter().map(|&p| f32::from(p) / 255.0));
    }
    let images = Tensor::from_parts(vec![n, 3, CIFAR_SIDE, CIFAR_SIDE], pixels);
    Dataset::new(images, labels, CIFAR100_CLASSES)
}

/// Writes 32×32 images in the CIFAR-100 record layout with coarse label 0.
/// Pixels are quantized to `round(255 · v)`.
pub fn write_cifar100_binary(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let s = dataset.images.shape();
    if s[2] != CIFAR_SIDE || s[3] != CIFAR_SIDE || dataset.num_classes > CIFAR100_CLASSES {
        return Err(Error::Validation(format!("images of shape {s:?} do not fit the CIFAR-100 layout")));
    }
    let mut out = Vec::with_capacity(dataset.len() * CIFAR100_RECORD);
    for (img, &label) in dataset.images.data().chunks(CIFAR_PIXELS).zip(&dataset.labels) {
        out.push(0u8);
        out.push(label as u8);
        out.extend(img.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub n: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_noise")]
    pub noise_std: f32,
    #[serde(default)]
    pub n_test: usize,
    pub seed: u64,
}

fn default_side() -> usize {
    CIFAR_SIDE
}

fn default_noise() -> f32 {
    0.1
}

impl SynthSpec {
    pub fn new(num_classes: usize, n: usize, height: usize, width: usize, seed: u64) -> Self {
        SynthSpec { num_classes, n, height, width, noise_std: default_noise(), n_test: 0, seed }
    }
}

/// Number of sinusoidal components per template channel.
const TEMPLATE_WAVES: usize = 3;
/// Highest spatial frequency, in cycles per image side.
const TEMPLATE_MAX_FREQ: i32 = 3;

fn class_templates(spec: &SynthSpec) -> Vec<Vec<f32>> {
    let mut rng = stream_rng(spec.seed, Stream::Synth, &[0]);
    let (h, w) = (spec.height, spec.width);
    (0..spec.num_classes)
        .map(|_| {
            let mut template = vec![0.5f32; 3 * h * w];
            for c in 0..3 {
                for _ in 0..TEMPLATE_WAVES {
                    let (fy, fx) = loop {
                        let f = (
                            rng.random_range(-TEMPLATE_MAX_FREQ..=TEMPLATE_MAX_FREQ),
                            rng.random_range(0..=TEMPLATE_MAX_FREQ),
                        );
                        if f != (0, 0) {
                            break f;
                        }
                    };
                    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                    let amp: f32 = rng.random_range(0.08..0.16);
                    for y in 0..h {
                        for x in 0..w {
                            let arg = std::f32::consts::TAU
                                * (fy as f32 * y as f32 / h as f32 + fx as f32 * x as f32 / w as f32);
                            template[(c * h + y) * w + x] += amp * (arg + phase).sin();
                        }
                    }
                }
            }
            template
        })
        .collect()
}

fn validate_synth(spec: &SynthSpec) -> Result<()> {
    if spec.num_classes == 0 || spec.height == 0 || spec.width == 0 {
        return Err(Error::Validation(format!("degenerate synthetic spec {spec:?}")));
    }
    if spec.n < spec.num_classes {
        return Err(Error::Validation(format!("n = {} is smaller than num_classes = {}", spec.n, spec.num_classes)));
    }
    if !(spec.noise_std >= 0.0) {
        return Err(Error::Validation(format!("noise_std {} is negative", spec.noise_std)));
    }
    Ok(())
}

fn synth_samples(spec: &SynthSpec, n: usize, stream: u64) -> Result<Dataset> {
    validate_synth(spec)?;
    let templates = class_templates(spec);
    let mut rng = stream_rng(spec.seed, Stream::Synth, &[stream]);
    let plane = 3 * spec.height * spec.width;
    let mut data = Vec::with_capacity(n * plane);
    let labels: Vec<usize> = (0..n).map(|i| i % spec.num_classes).collect();
    for &label in &labels {
        for &t in &templates[label] {
            let noise = if spec.noise_std > 0.0 { spec.noise_std * rng.sample::<f32, _>(StandardNormal) } else { 0.0 };
            data.push((t + noise).clamp(0.0, 1.0));
        }
    }
    let images = Tensor::from_parts(vec![n, 3, spec.height, spec.width], data);
    Dataset::new(images, labels, spec.num_classes)
}

/// Class-conditional images: each class has a smooth low-frequency template
/// (a few sinusoids per channel around mid-grey) and every sample adds
/// independent Gaussian pixel noise. Labels cycle through the classes.
pub fn synth_dataset(spec: &SynthSpec) -> Result<Dataset> {
    synth_samples(spec, spec.n, 1)
}

/// Held-out samples drawn from the same class templates as
/// [`synth_dataset`].
pub fn synth_test_set(spec: &SynthSpec, n_test: usize) -> Result<Dataset> {
    if n_test == 0 {
        return Err(Error::Validation("test set must be non-empty".into()));
    }
    let mut spec = spec.clone();
    spec.n = spec.n.max(n_test);
    synth_samples(&spec, n_test, 2)
}

/// Disjoint client shards of dataset indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub client_shards: Vec<Vec<usize>>,
}

impl Partition {
    pub fn num_clients(&self) -> usize {
        self.client_shards.len()
    }

    pub fn shard(&self, client: usize) -> &[usize] {
        &self.client_shards[client]
    }
}

/// Random permutation of `0..n` cut into `clients` shards whose sizes
/// differ by at most one.
pub fn partition_iid(n: usize, clients: usize, seed: u64) -> Result<Partition> {
    if clients == 0 || clients > n {
        return Err(Error::Validation(format!("cannot split {n} examples across {clients} clients")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(seed, Stream::Partition, &[]));
    let (base, extra) = (n / clients, n % clients);
    let mut shards = Vec::with_capacity(clients);
    let mut start = 0;
    for c in 0..clients {
        let len = base + usize::from(c < extra);
        shards.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(Partition { client_shards: shards })
}
