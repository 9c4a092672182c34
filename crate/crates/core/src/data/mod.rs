//! Dataset ingestion, the synthetic surrogate task, Gaussian corruption,
//! and stratified splitting.
//!
//! Pixels are normalized to `[0, 1]` at load time and stay there until noise
//! injection, which happens only on evaluation copies — training data is
//! never corrupted by the sweep protocol.

mod formats;
mod synth;

pub use formats::{
    manifest_to_csv, parse_idx_images, parse_idx_labels, parse_pgm, read_idx_images,
    read_idx_labels, read_pgm, DatasetManifest, GrayImage, ManifestEntry,
};
pub use synth::synthesize_dataset;

use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Element, Tensor};

/// Gaussian corruption settings; the mean is identically zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    /// Standard deviation in normalized pixel units.
    pub std: f64,
    /// Clamp the corrupted pixels back to `[0, 1]`.
    pub clip_to_unit: bool,
}

impl NoiseSpec {
    pub fn new(std: f64) -> Self {
        NoiseSpec {
            std,
            clip_to_unit: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.std < 0.0 || !self.std.is_finite() {
            return Err(Error::parameter(format!(
                "noise std must be finite and >= 0, got {}",
                self.std
            )));
        }
        Ok(())
    }
}

/// Default noise-sweep grid of standard deviations.
pub const NOISE_STD_GRID: [f64; 9] = [0.0001, 0.001, 0.01, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6];

/// In-memory labeled image set. Samples are `[C, H, W]` tensors in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset<T: Element> {
    pub samples: Vec<Tensor<T>>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl<T: Element> Dataset<T> {
    pub fn new(samples: Vec<Tensor<T>>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(Error::data(format!(
                "{} samples but {} labels",
                samples.len(),
                labels.len()
            )));
        }
        let k = class_names.len();
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::data(format!("label {bad} out of range for {k} classes")));
        }
        Ok(Dataset {
            samples,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Per-class sample counts.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for &label in &self.labels {
            counts[label] += 1;
        }
        counts
    }

    /// Stacks the indexed samples into a `[B, C, H, W]` batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<Tensor<T>> {
        let first = self
            .samples
            .first()
            .ok_or_else(|| Error::data("cannot batch an empty dataset"))?;
        let sample_shape = first.shape().to_vec();
        let mut data = Vec::with_capacity(indices.len() * first.len());
        for &i in indices {
            let sample = self
                .samples
                .get(i)
                .ok_or_else(|| Error::index(format!("sample index {i} of {}", self.len())))?;
            if sample.shape() != sample_shape {
                return Err(Error::shape(format!(
                    "sample {i} has shape {:?}, expected {sample_shape:?}",
                    sample.shape()
                )));
            }
            data.extend_from_slice(sample.data());
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&sample_shape);
        Tensor::from_vec(shape, data)
    }

    /// Sub-dataset at the given indices (shared buffers, cheap).
    pub fn subset(&self, indices: &[usize]) -> Result<Dataset<T>> {
        let mut samples = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::index(format!("subset index {i} of {}", self.len())));
            }
            samples.push(self.samples[i].clone());
            labels.push(self.labels[i]);
        }
        Dataset::new(samples, labels, self.class_names.clone())
    }
}

/// Converts raw 8-bit pixels to a `[1, target_h, target_w]` tensor in
/// `[0, 1]`, resizing bilinearly when the geometry differs.
pub fn image_to_tensor<T: Element>(
    image: &GrayImage,
    target_h: usize,
    target_w: usize,
) -> Result<Tensor<T>> {
    let normalized: Vec<f64> = image.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let resized = if image.height == target_h && image.width == target_w {
        normalized
    } else {
        bilinear_resize(&normalized, image.height, image.width, target_h, target_w)
    };
    Tensor::from_vec(
        vec![1, target_h, target_w],
        resized.into_iter().map(T::from_f64).collect(),
    )
}

/// Bilinear resampling with half-pixel centers, clamped at the borders.
fn bilinear_resize(src: &[f64], sh: usize, sw: usize, dh: usize, dw: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(dh * dw);
    let scale_y = sh as f64 / dh as f64;
    let scale_x = sw as f64 / dw as f64;
    for dy in 0..dh {
        let fy = ((dy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (sh - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f64;
        for dx in 0..dw {
            let fx = ((dx as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (sw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * sw + x0] * (1.0 - wx) + src[y0 * sw + x1] * wx;
            let bottom = src[y1 * sw + x0] * (1.0 - wx) + src[y1 * sw + x1] * wx;
            out.push(top * (1.0 - wy) + bottom * wy);
        }
    }
    out
}

/// Loads every manifest entry as a normalized, resized tensor.
///
/// `.idx`/`-ubyte` entries are treated as IDX3 archives whose images all
/// carry the row's label; anything else is read as binary PGM.
pub fn load_dataset<T: Element>(
    manifest: &DatasetManifest,
    target_h: usize,
    target_w: usize,
) -> Result<Dataset<T>> {
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    for entry in &manifest.entries {
        if is_idx_path(&entry.path) {
            for image in read_idx_images(&entry.path)? {
                samples.push(image_to_tensor(&image, target_h, target_w)?);
                labels.push(entry.label);
            }
        } else {
            let image = read_pgm(&entry.path)?;
            samples.push(image_to_tensor(&image, target_h, target_w)?);
            labels.push(entry.label);
        }
    }
    Dataset::new(samples, labels, manifest.class_names.clone())
}

fn is_idx_path(path: &Path) -> bool {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
    name.ends_with(".idx3-ubyte") || name.ends_with("-idx3-ubyte") || name.ends_with(".idx")
}

/// Loads a paired IDX3/IDX1 archive (images plus per-image labels).
pub fn load_idx_dataset<T: Element>(
    images_path: &Path,
    labels_path: &Path,
    class_names: Vec<String>,
    target_h: usize,
    target_w: usize,
) -> Result<Dataset<T>> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(Error::load(format!(
            "{}: {} images vs {} labels",
            images_path.display(),
            images.len(),
            labels.len()
        )));
    }
    let samples = images
        .iter()
        .map(|img| image_to_tensor(img, target_h, target_w))
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(
        samples,
        labels.into_iter().map(|l| l as usize).collect(),
        class_names,
    )
}

/// Adds `N(0, std^2)` to every element, deterministic per seed. `std = 0`
/// returns the input bit-exactly.
pub fn add_gaussian_noise<T: Element>(
    x: &Tensor<T>,
    spec: &NoiseSpec,
    seed: u64,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.std == 0.0 {
        return Ok(x.clone());
    }
    let mut rng = Rng::new(seed);
    let data: Vec<T> = x
        .iter()
        .map(|&v| {
            let noisy = v.as_f64() + rng.next_normal() * spec.std;
            let noisy = if spec.clip_to_unit {
                noisy.clamp(0.0, 1.0)
            } else {
                noisy
            };
            T::from_f64(noisy)
        })
        .collect();
    Tensor::from_vec(x.shape().to_vec(), data)
}

/// Corrupts every sample of a dataset with per-sample derived noise streams.
pub fn corrupt_dataset<T: Element>(
    dataset: &Dataset<T>,
    spec: &NoiseSpec,
    seed: u64,
) -> Result<Dataset<T>> {
    spec.validate()?;
    let samples = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let stream = Rng::derive(seed, i as u64).next_u64();
            add_gaussian_noise(s, spec, stream)
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(samples, dataset.labels.clone(), dataset.class_names.clone())
}

/// Splits per class proportionally to `fractions` (which must sum to 1);
/// rounding remainders go to the first part. Seed-deterministic, disjoint,
/// exhaustive.
pub fn stratified_split<T: Element>(
    dataset: &Dataset<T>,
    fractions: &[f64],
    seed: u64,
) -> Result<Vec<Dataset<T>>> {
    if fractions.is_empty() || fractions.iter().any(|&f| f <= 0.0) {
        return Err(Error::parameter("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::parameter(format!("split fractions sum to {total}, need 1")));
    }
    let counts = dataset.class_counts();
    if let Some((label, &n)) = counts.iter().enumerate().find(|&(_, &n)| n < fractions.len()) {
        return Err(Error::data(format!(
            "class {label} ({:?}) has {n} samples, fewer than {} split parts",
            dataset.class_names.get(label).map(String::as_str).unwrap_or("?"),
            fractions.len()
        )));
    }

    let mut part_indices: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    for label in 0..dataset.num_classes() {
        let mut class_indices: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.labels[i] == label)
            .collect();
        let mut rng = Rng::derive(seed, label as u64);
        rng.shuffle(&mut class_indices);

        let n = class_indices.len();
        let mut sizes: Vec<usize> = fractions
            .iter()
            .map(|f| (n as f64 * f).floor() as usize)
            .collect();
        let assigned: usize = sizes.iter().skip(1).sum();
        sizes[0] = n - assigned;

        let mut cursor = 0usize;
        for (part, &size) in sizes.iter().enumerate() {
            part_indices[part].extend(&class_indices[cursor..cursor + size]);
            cursor += size;
        }
    }

    part_indices
        .into_iter()
        .map(|mut idx| {
            idx.sort_unstable();
            dataset.subset(&idx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n_per_class: usize) -> Dataset<f32> {
        synthesize_dataset::<f32>(n_per_class, 7, 16).unwrap()
    }

    #[test]
    fn black_pgm_loads_as_zeros() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend([0u8; 16]);
        let image = parse_pgm(&bytes, "test").unwrap();
        let t: Tensor<f32> = image_to_tensor(&image, 4, 4).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn idx_image_resizes_into_range() {
        let image = GrayImage {
            height: 28,
            width: 28,
            pixels: (0..28 * 28).map(|i| (i % 256) as u8).collect(),
        };
        let t: Tensor<f32> = image_to_tensor(&image, 64, 64).unwrap();
        assert_eq!(t.shape(), &[1, 64, 64]);
        assert!(t.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn resize_preserves_constant_images() {
        let src = vec![0.5f64; 10 * 10];
        let out = bilinear_resize(&src, 10, 10, 7, 13);
        assert!(out.iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn dataset_rejects_out_of_range_label() {
        let samples = vec![Tensor::<f32>::zeros(&[1, 4, 4]).unwrap()];
        assert!(Dataset::new(samples, vec![3], vec!["a".into(), "b".into(), "c".into()]).is_err());
    }

    #[test]
    fn noise_zero_std_is_bit_exact() {
        let x = Tensor::<f32>::randn(&[100], 3, 1.0).unwrap().map(|v| v.abs().min(1.0));
        let out = add_gaussian_noise(&x, &NoiseSpec { std: 0.0, clip_to_unit: true }, 5).unwrap();
        assert!(out.bit_eq(&x));
    }

    #[test]
    fn noise_statistics_match_requested_std() {
        let x = Tensor::<f64>::full(&[1_000_000], 0.5).unwrap();
        let spec = NoiseSpec { std: 0.2, clip_to_unit: false };
        let out = add_gaussian_noise(&x, &spec, 11).unwrap();
        let deltas: Vec<f64> = out.iter().zip(x.iter()).map(|(&o, &i)| o - i).collect();
        let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
        let var = deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / deltas.len() as f64;
        assert!(mean.abs() < 0.001, "noise mean {mean}");
        assert!((var.sqrt() - 0.2).abs() < 0.002, "noise std {}", var.sqrt());
    }

    #[test]
    fn noise_clip_keeps_unit_range() {
        let x = Tensor::<f32>::zeros(&[10_000]).unwrap();
        let spec = NoiseSpec { std: 0.5, clip_to_unit: true };
        let out = add_gaussian_noise(&x, &spec, 13).unwrap();
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn noise_rejects_negative_std() {
        let x = Tensor::<f32>::zeros(&[4]).unwrap();
        assert!(add_gaussian_noise(&x, &NoiseSpec { std: -0.1, clip_to_unit: true }, 1).is_err());
    }

    #[test]
    fn noise_deterministic_per_seed() {
        let x = Tensor::<f32>::full(&[64], 0.5).unwrap();
        let spec = NoiseSpec::new(0.3);
        let a = add_gaussian_noise(&x, &spec, 9).unwrap();
        let b = add_gaussian_noise(&x, &spec, 9).unwrap();
        let c = add_gaussian_noise(&x, &spec, 10).unwrap();
        assert!(a.bit_eq(&b));
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn split_follows_fraction_arithmetic() {
        let ds = tiny_dataset(100); // 300 samples, 100 per class
        let parts = stratified_split(&ds, &[0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(parts.len(), 3);
        assert_eq!(parts[0].len(), 180);
        assert_eq!(parts[1].len(), 60);
        assert_eq!(parts[2].len(), 60);
        for part in &parts {
            assert!(part.class_counts().iter().all(|&c| c == part.len() / 3));
        }
    }

    #[test]
    fn split_is_seed_deterministic_partition() {
        let ds = tiny_dataset(20);
        let a = stratified_split(&ds, &[0.5, 0.5], 42).unwrap();
        let b = stratified_split(&ds, &[0.5, 0.5], 42).unwrap();
        for (pa, pb) in a.iter().zip(b.iter()) {
            assert_eq!(pa.labels, pb.labels);
            for (sa, sb) in pa.samples.iter().zip(pb.samples.iter()) {
                assert!(sa.bit_eq(sb));
            }
        }
    }

    #[test]
    fn split_rejects_starved_class() {
        let ds = tiny_dataset(2);
        assert!(stratified_split(&ds, &[0.4, 0.3, 0.3], 1).is_err());
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let ds = tiny_dataset(10);
        assert!(stratified_split(&ds, &[0.5, 0.4], 1).is_err());
        assert!(stratified_split(&ds, &[], 1).is_err());
        assert!(stratified_split(&ds, &[1.5, -0.5], 1).is_err());
    }
}
