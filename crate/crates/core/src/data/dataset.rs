use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::netmodels::InputNorm;

/// Images in `[0, 1]` with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    name: String,
    images: Tensor<f32>,
    labels: Option<Vec<usize>>,
    classes: usize,
    norm: InputNorm,
}

impl Dataset {
    /// Validates shape, pixel range, and labels, and computes the per-channel
    /// normalization constants.
    pub fn new(name: impl Into<String>, images: Tensor<f32>, labels: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::shape("dataset", format!("images must be NxCxHxW, got {:?}", images.shape())));
        }
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("dataset needs at least two classes, got {classes}")));
        }
        if let Some((index, &value)) = images.data().iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::PixelRange { index, value });
        }
        if let Some(labels) = &labels {
            if labels.len() != images.batch() {
                return Err(Error::shape("dataset", format!("{} labels for {} images", labels.len(), images.batch())));
            }
            if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
                return Err(Error::LabelOutOfRange { label, classes });
            }
        }
        let norm = channel_norm(&images);
        Ok(Self {
            name: name.into(),
            images,
            labels,
            classes,
            norm,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn set_name(&mut self, name: impl Into<String>) {
        self.name = name.into();
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels().ok_or(Error::MissingLabels)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `[C, H, W]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// Per-channel mean and std over every pixel.
    pub fn norm(&self) -> &InputNorm {
        &self.norm
    }

    /// Same images without labels.
    pub fn unlabeled(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    /// Replaces the images, keeping labels and name.
    pub fn with_images(&self, images: Tensor<f32>) -> Result<Self> {
        if images.batch() != self.len() {
            return Err(Error::shape("dataset", format!("{} images replace {}", images.batch(), self.len())));
        }
        Self::new(self.name.clone(), images, self.labels.clone(), self.classes)
    }

    /// The items at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::new(self.name.clone(), self.images.gather_batch(indices)?, labels, self.classes)
    }

    pub fn batches(&self, plan: BatchPlan) -> Result<Batches<'_>> {
        batches(self, plan)
    }
}

fn channel_norm(images: &Tensor<f32>) -> InputNorm {
    let s = images.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let mut mean = vec![0.0f64; c];
    let mut sq = vec![0.0f64; c];
    for sample in images.data().chunks(c * plane.max(1)).take(n) {
        for (ch, p) in sample.chunks(plane.max(1)).enumerate() {
            mean[ch] += p.iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    let count = (n * plane) as f64;
    if count == 0.0 {
        return InputNorm::identity(c);
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for sample in images.data().chunks(c * plane) {
        for (ch, p) in sample.chunks(plane).enumerate() {
            sq[ch] += p.iter().map(|&v| (v as f64 - mean[ch]).powi(2)).sum::<f64>();
        }
    }
    InputNorm {
        mean: mean.iter().map(|&m| m as f32).collect(),
        std: sq.iter().map(|&s| ((s / count).sqrt() as f32).max(1e-3)).collect(),
    }
}

/// How to cut a dataset into batches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    pub batch_size: usize,
    /// `None` keeps dataset order.
    pub shuffle_seed: Option<u64>,
    pub drop_last: bool,
}

impl BatchPlan {
    pub fn sequential(batch_size: usize) -> Self {
        Self {
            batch_size,
            shuffle_seed: None,
            drop_last: false,
        }
    }

    pub fn shuffled(batch_size: usize, seed: u64) -> Self {
        Self {
            batch_size,
            shuffle_seed: Some(seed),
            drop_last: false,
        }
    }

    /// Number of batches for `n` items.
    pub fn count(&self, n: usize) -> usize {
        if self.drop_last {
            n / self.batch_size
        } else {
            n.div_ceil(self.batch_size)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub images: Tensor<f32>,
    pub labels: Option<Vec<usize>>,
}

pub struct Batches<'a> {
    data: &'a Dataset,
    order: Vec<usize>,
    size: usize,
    pos: usize,
    end: usize,
}

/// Deterministic partition of `dataset` following `plan`.
pub fn batches(dataset: &Dataset, plan: BatchPlan) -> Result<Batches<'_>> {
    if plan.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = plan.shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    let end = plan.count(dataset.len()) * plan.batch_size;
    Ok(Batches {
        data: dataset,
        end: end.min(order.len()),
        order,
        size: plan.batch_size,
        pos: 0,
    })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.pos >= self.end {
            return None;
        }
        let stop = (self.pos + self.size).min(self.end);
        let indices = self.order[self.pos..stop].to_vec();
        self.pos = stop;
        let images = self.data.images.gather_batch(&indices).expect("indices in range");
        let labels = self.data.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Some(Batch { indices, images, labels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let data = (0..n * 4).map(|i| (i % 5) as f32 / 4.0).collect();
        Dataset::new("toy", Tensor::new(vec![n, 1, 2, 2], data).unwrap(), Some((0..n).map(|i| i % 3).collect()), 3).unwrap()
    }

    #[test]
    fn validation() {
        let bad = Tensor::new(vec![1, 1, 1, 1], vec![1.5]).unwrap();
        assert!(matches!(Dataset::new("x", bad, None, 2), Err(Error::PixelRange { .. })));
        let ok = Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap();
        assert!(matches!(
            Dataset::new("x", ok.clone(), Some(vec![2]), 2),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(Dataset::new("x", ok, Some(vec![0, 1]), 2).is_err());
    }

    #[test]
    fn norm_constants() {
        let d = Dataset::new("x", Tensor::new(vec![2, 1, 1, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap(), None, 2).unwrap();
        assert_eq!(d.norm().mean, vec![0.5]);
        assert_eq!(d.norm().std, vec![0.5]);
    }

    #[test]
    fn partition_and_determinism() {
        let d = toy(23);
        let plan = BatchPlan::shuffled(5, 7);
        let a: Vec<_> = d.batches(plan).unwrap().collect();
        let b: Vec<_> = d.batches(plan).unwrap().collect();
        assert_eq!(a.len(), 5);
        assert_eq!(a.last().unwrap().indices.len(), 3);
        let mut all: Vec<usize> = a.iter().flat_map(|b| b.indices.clone()).collect();
        assert_eq!(all, b.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>());
        assert_ne!(all, (0..23).collect::<Vec<_>>());
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        for batch in &a {
            let labels = batch.labels.as_ref().unwrap();
            assert!(batch.indices.iter().zip(labels).all(|(&i, &l)| l == i % 3));
        }
    }

    #[test]
    fn drop_last_and_oversized_batch() {
        let d = toy(23);
        let plan = BatchPlan {
            drop_last: true,
            ..BatchPlan::sequential(5)
        };
        assert_eq!(d.batches(plan).unwrap().count(), 4);
        let one: Vec<_> = d.batches(BatchPlan::sequential(100)).unwrap().collect();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].indices, (0..23).collect::<Vec<_>>());
        assert!(d.batches(BatchPlan::sequential(0)).is_err());
    }
}
