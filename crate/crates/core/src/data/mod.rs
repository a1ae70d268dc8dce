//! Dataset ingestion, deterministic synthetic multi-label image generation,
//! splitting, normalization, and augmentation.

pub mod manifest;
pub mod png_io;
pub mod synth;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

pub use manifest::{load_manifest, write_manifest};
pub use synth::{generate_in_memory, generate_synthetic, SyntheticConfig};

/// One grayscale image plus a multi-hot label vector.
#[derive(Debug, Clone)]
pub struct MultiLabelSample {
    pub id: String,
    /// Row-major H*W pixel values in [0,1] (before normalization).
    pub image: Vec<f32>,
    /// One 0/1 entry per class.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub samples: Vec<MultiLabelSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Scalar mean/std computed over the training split only.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct DatasetStats {
    pub mean: f64,
    pub std: f64,
}

impl DatasetStats {
    /// Population mean/std over every pixel of `ds`.
    pub fn compute(ds: &Dataset) -> Result<DatasetStats> {
        if ds.is_empty() {
            return Err(Error::Contract("stats: empty dataset".to_string()));
        }
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for s in &ds.samples {
            for &p in &s.image {
                sum += p as f64;
            }
            count += s.image.len();
        }
        let mean = sum / count as f64;
        let mut var = 0.0f64;
        for s in &ds.samples {
            for &p in &s.image {
                let c = p as f64 - mean;
                var += c * c;
            }
        }
        let std = (var / count as f64).sqrt();
        if std <= 0.0 {
            return Err(Error::Contract(
                "stats: zero variance over the training split".to_string(),
            ));
        }
        Ok(DatasetStats { mean, std })
    }
}

/// Seeded disjoint and exhaustive three-way split.
pub fn split(ds: &Dataset, ratios: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let (r0, r1, r2) = ratios;
    if r0 <= 0.0 || r1 <= 0.0 || r2 <= 0.0 {
        return Err(Error::Config(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    if ((r0 + r1 + r2) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    let n = ds.len();
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = crate::util::rng_for(seed, "split");
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    let n0 = (r0 * n as f64).floor() as usize;
    let n1 = (r1 * n as f64).floor() as usize;
    let take = |range: &[usize]| Dataset {
        classes: ds.classes,
        height: ds.height,
        width: ds.width,
        samples: range.iter().map(|&i| ds.samples[i].clone()).collect(),
    };
    Ok((
        take(&idx[..n0]),
        take(&idx[n0..n0 + n1]),
        take(&idx[n0 + n1..]),
    ))
}

/// Mirror an image left-right in place.
pub fn hflip(image: &mut [f32], width: usize) {
    for row in image.chunks_mut(width) {
        row.reverse();
    }
}

/// Normalize to the training statistics and, in train mode, mirror
/// horizontally with probability 0.5. Labels pass through unchanged.
pub fn normalize_and_augment(
    sample: &MultiLabelSample,
    stats: DatasetStats,
    train_mode: bool,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> MultiLabelSample {
    let mut image: Vec<f32> = sample
        .image
        .iter()
        .map(|&p| ((p as f64 - stats.mean) / stats.std) as f32)
        .collect();
    if train_mode && rng.gen::<f64>() < 0.5 {
        hflip(&mut image, width);
    }
    MultiLabelSample {
        id: sample.id.clone(),
        image,
        labels: sample.labels.clone(),
    }
}

/// Stack normalized (and optionally augmented) samples into a `[B,1,H,W]`
/// input tensor plus a `[B,C]` multi-hot label matrix.
pub fn assemble_batch<S: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    stats: DatasetStats,
    train_mode: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<S>, Vec<u8>)> {
    let b = indices.len();
    let hw = ds.height * ds.width;
    let mut pixels = Vec::with_capacity(b * hw);
    let mut labels = Vec::with_capacity(b * ds.classes);
    for &i in indices {
        let s = normalize_and_augment(&ds.samples[i], stats, train_mode, ds.width, rng);
        pixels.extend(s.image.iter().map(|&p| S::from_f64(p as f64)));
        labels.extend_from_slice(&s.labels);
    }
    let x = Tensor::leaf(pixels, &[b, 1, ds.height, ds.width], false)?;
    Ok((x, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_dataset(n: usize) -> Dataset {
        Dataset {
            classes: 2,
            height: 2,
            width: 2,
            samples: (0..n)
                .map(|i| MultiLabelSample {
                    id: format!("s{i}"),
                    image: vec![0.1 * i as f32; 4],
                    labels: vec![(i % 2) as u8, 1],
                })
                .collect(),
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let ds = toy_dataset(10);
        let (a, b, c) = split(&ds, (0.8, 0.1, 0.1), 5).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (8, 1, 1));
        let (a2, ..) = split(&ds, (0.8, 0.1, 0.1), 5).unwrap();
        let ids: Vec<_> = a.samples.iter().map(|s| &s.id).collect();
        let ids2: Vec<_> = a2.samples.iter().map(|s| &s.id).collect();
        assert_eq!(ids, ids2);
    }

    #[test]
    fn split_rejects_bad_ratios() {
        let ds = toy_dataset(4);
        assert!(matches!(
            split(&ds, (0.5, 0.5, 0.5), 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn normalization_zeroes_constant_image_at_mean() {
        let stats = DatasetStats { mean: 0.25, std: 0.5 };
        let s = MultiLabelSample {
            id: "x".into(),
            image: vec![0.25; 4],
            labels: vec![1],
        };
        let mut rng = crate::util::rng_for(0, "aug");
        let out = normalize_and_augment(&s, stats, false, 2, &mut rng);
        assert!(out.image.iter().all(|&p| p.abs() < 1e-7));
    }

    #[test]
    fn flip_is_an_involution() {
        let mut img = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let orig = img.clone();
        hflip(&mut img, 3);
        assert_ne!(img, orig);
        hflip(&mut img, 3);
        assert_eq!(img, orig);
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let stats = DatasetStats { mean: 0.0, std: 1.0 };
        let s = MultiLabelSample {
            id: "x".into(),
            image: vec![0.9, 0.1, 0.2, 0.4],
            labels: vec![1],
        };
        let mut r1 = crate::util::rng_for(1, "a");
        let mut r2 = crate::util::rng_for(2, "b");
        let o1 = normalize_and_augment(&s, stats, false, 2, &mut r1);
        let o2 = normalize_and_augment(&s, stats, false, 2, &mut r2);
        assert_eq!(o1.image, o2.image);
    }

    #[test]
    fn normalized_training_split_is_standardized() {
        let cfg = crate::data::SyntheticConfig::default_benchmark(120, 3);
        let ds = crate::data::generate_in_memory(&cfg);
        let stats = DatasetStats::compute(&ds).unwrap();
        let mut rng = crate::util::rng_for(0, "norm");
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut count = 0usize;
        for s in &ds.samples {
            let out = normalize_and_augment(s, stats, false, ds.width, &mut rng);
            for &p in &out.image {
                sum += p as f64;
                sum_sq += (p as f64) * (p as f64);
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sum_sq / count as f64 - mean * mean;
        assert!(mean.abs() < 1e-6 * stats.std, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "variance {var}");
    }

    #[test]
    fn stats_reject_constant_data() {
        let ds = Dataset {
            classes: 1,
            height: 2,
            width: 2,
            samples: vec![MultiLabelSample {
                id: "c".into(),
                image: vec![0.5; 4],
                labels: vec![0],
            }],
        };
        assert!(DatasetStats::compute(&ds).is_err());
    }
}
