use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::dataset::{DataSplit, Dataset};
use crate::rng::{stream, TAG_SYNTH_MEANS, TAG_SYNTH_TEST, TAG_SYNTH_TRAIN};

/// Gaussian class clusters rendered as single-channel images.
///
/// Each class has a mean image `separation * mu_c` with `mu_c ~ N(0, I)`;
/// examples add unit Gaussian noise per pixel plus `nuisance_rank` shared
/// factors of standard deviation `nuisance_scale` along fixed random unit
/// directions. At `separation = 0` the classes are indistinguishable.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub side: usize,
    /// Rank of a nuisance subspace shared by every class.
    pub nuisance_rank: usize,
    /// Standard deviation of each nuisance factor.
    pub nuisance_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize, separation: f64, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            test_per_class: per_class / 5,
            separation,
            side: 8,
            nuisance_rank: 0,
            nuisance_scale: 0.0,
            seed,
        }
    }

    fn means(&self) -> Vec<Vec<f32>> {
        let d = self.side * self.side;
        let mut rng = stream(self.seed, &[TAG_SYNTH_MEANS]);
        (0..self.classes)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        (z * self.separation) as f32
                    })
                    .collect()
            })
            .collect()
    }

    /// Shared nuisance directions, `rank x d`, each of unit norm.
    fn nuisance(&self) -> Vec<Vec<f32>> {
        let d = self.side * self.side;
        let mut rng = stream(self.seed, &[TAG_SYNTH_MEANS, 1]);
        (0..self.nuisance_rank)
            .map(|_| {
                let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter().map(|x| (x / norm) as f32).collect()
            })
            .collect()
    }

    fn draw(&self, means: &[Vec<f32>], nuisance: &[Vec<f32>], per_class: usize, tag: u64) -> Dataset {
        let d = self.side * self.side;
        let mut rng = stream(self.seed, &[tag]);
        let mut pixels = Vec::with_capacity(self.classes * per_class * d);
        let mut labels = Vec::with_capacity(self.classes * per_class);
        for (c, mu) in means.iter().enumerate() {
            for _ in 0..per_class {
                let start = pixels.len();
                for m in mu {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    pixels.push(m + z as f32);
                }
                for dir in nuisance {
                    let u: f64 = StandardNormal.sample(&mut rng);
                    let u = (u * self.nuisance_scale) as f32;
                    for (p, v) in pixels[start..].iter_mut().zip(dir) {
                        *p += u * v;
                    }
                }
                labels.push(c as u16);
            }
        }
        // interleave classes so the raw order carries no label structure
        let n = labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let mut px = Vec::with_capacity(pixels.len());
        let mut lb = Vec::with_capacity(n);
        for &i in &order {
            px.extend_from_slice(&pixels[i * d..(i + 1) * d]);
            lb.push(labels[i]);
        }
        Dataset::new([1, self.side, self.side], px, lb, self.classes).expect("synthetic layout")
    }

    /// Train and test sets sharing the same class means.
    pub fn generate(&self) -> DataSplit {
        let means = self.means();
        let nuisance = self.nuisance();
        DataSplit {
            train: self.draw(&means, &nuisance, self.per_class, TAG_SYNTH_TRAIN),
            test: self.draw(&means, &nuisance, self.test_per_class.max(1), TAG_SYNTH_TEST),
        }
    }
}

/// Training half of [`SynthSpec::generate`] with default image size.
pub fn synth_dataset(classes: usize, per_class: usize, separation: f64, seed: u64) -> Dataset {
    SynthSpec::new(classes, per_class, separation, seed).generate().train
}
