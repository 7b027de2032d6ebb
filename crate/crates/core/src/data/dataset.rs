use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// In-memory labelled image set. Images are stored contiguously, each
/// `C*H*W` floats in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    image_shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<u16>,
    classes: usize,
    by_class: Vec<Vec<usize>>,
}

impl Dataset {
    pub fn new(image_shape: [usize; 3], pixels: Vec<f32>, labels: Vec<u16>, classes: usize) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || pixels.len() != per * labels.len() {
            return Err(Error::ShapeMismatch {
                context: "dataset pixels".into(),
                expected: vec![labels.len(), per],
                actual: vec![pixels.len()],
            });
        }
        let mut by_class = vec![Vec::new(); classes];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
            by_class[l].push(i);
        }
        Ok(Self {
            image_shape,
            pixels,
            labels,
            classes,
            by_class,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn image_len(&self) -> usize {
        self.image_shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// Example indices per class; together they partition `0..len()`.
    pub fn by_class(&self) -> &[Vec<usize>] {
        &self.by_class
    }

    /// Gathers `indices` into an `[N, C, H, W]` batch and its labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.image_shape;
        let t = Tensor::new(vec![indices.len(), c, h, w], data).expect("batch shape");
        (t, indices.iter().map(|&i| self.label(i)).collect())
    }

    /// Per-channel mean and standard deviation over every pixel.
    pub fn channel_stats(&self) -> (Vec<f32>, Vec<f32>) {
        let [c, h, w] = self.image_shape;
        let plane = h * w;
        let mut sum = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.pixels.chunks(c * plane) {
            for ch in 0..c {
                for v in &img[ch * plane..(ch + 1) * plane] {
                    sum[ch] += *v as f64;
                    sq[ch] += (*v as f64) * (*v as f64);
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / count - m * m).max(0.0)).sqrt().max(1e-6) as f32)
            .collect();
        (mean.into_iter().map(|m| m as f32).collect(), std)
    }

    /// Standardises each channel in place: `(x - mean) / std`.
    pub fn normalize(&mut self, mean: &[f32], std: &[f32]) {
        let [c, h, w] = self.image_shape;
        let plane = h * w;
        for img in self.pixels.chunks_mut(c * plane) {
            for ch in 0..c {
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = (*v - mean[ch]) / std[ch];
                }
            }
        }
    }

    /// Distinct labels among `indices`, ascending.
    pub fn label_set(&self, indices: &[usize]) -> Vec<usize> {
        let mut seen = vec![false; self.classes];
        for &i in indices {
            seen[self.label(i)] = true;
        }
        (0..self.classes).filter(|&c| seen[c]).collect()
    }
}

/// Train and test halves of one benchmark.
#[derive(Debug, Clone)]
pub struct DataSplit {
    pub train: Dataset,
    pub test: Dataset,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_lists_partition_indices() {
        let d = Dataset::new([1, 1, 2], vec![0.0; 10], vec![1, 0, 1, 2, 0], 3).unwrap();
        let mut all: Vec<usize> = d.by_class().iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3, 4]);
        assert_eq!(d.by_class()[1], vec![0, 2]);
        assert_eq!(d.label_set(&[0, 2, 3]), vec![1, 2]);
    }

    #[test]
    fn rejects_bad_labels_and_lengths() {
        assert!(Dataset::new([1, 1, 1], vec![0.0; 2], vec![0, 3], 3).is_err());
        assert!(Dataset::new([1, 1, 2], vec![0.0; 3], vec![0, 1], 3).is_err());
    }

    #[test]
    fn normalization_standardises_channels() {
        let mut d = Dataset::new([2, 1, 1], vec![1.0, 10.0, 3.0, 30.0], vec![0, 0], 1).unwrap();
        let (m, s) = d.channel_stats();
        assert_eq!(m, vec![2.0, 20.0]);
        d.normalize(&m, &s);
        let (m2, s2) = d.channel_stats();
        assert!(m2.iter().all(|v| v.abs() < 1e-6));
        assert!(s2.iter().all(|v| (v - 1.0).abs() < 1e-5));
    }
}
