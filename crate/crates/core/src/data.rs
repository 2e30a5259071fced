//! Procedural class-conditional gratings.
//!
//! Superclass `s` fixes the grating orientation `π·s/N_c`; the class index
//! within its superclass fixes the spatial frequency. Pixels are
//! `clamp(a·cos(2π·f·(x·cosθ + y·sinθ)/H) + noise, −1, 1)`.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_superclasses: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub amplitude: f64,
    /// Cycles per image for the first class of each superclass.
    pub base_frequency: f64,
    /// Added cycles per image for each following class in a superclass.
    pub frequency_step: f64,
    pub noise_std: f64,
    /// Random horizontal flips.
    pub flip: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_superclasses: 4,
            image_size: 16,
            patch_size: 4,
            amplitude: 0.8,
            base_frequency: 2.0,
            frequency_step: 2.0,
            noise_std: 0.1,
            flip: false,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_superclasses == 0 || !self.num_classes.is_multiple_of(self.num_superclasses) {
            return Err(Error::Config(format!(
                "{} classes do not split evenly into {} superclasses",
                self.num_classes, self.num_superclasses
            )));
        }
        if self.image_size == 0 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config(format!("noise std {} is negative", self.noise_std)));
        }
        Ok(())
    }

    pub fn classes_per_superclass(&self) -> usize {
        self.num_classes / self.num_superclasses
    }

    pub fn superclass_of(&self, class: usize) -> usize {
        class / self.classes_per_superclass()
    }

    pub fn orientation(&self, class: usize) -> f64 {
        PI * self.superclass_of(class) as f64 / self.num_superclasses as f64
    }

    pub fn frequency(&self, class: usize) -> f64 {
        self.base_frequency + self.frequency_step * (class % self.classes_per_superclass()) as f64
    }

    /// Noise-free (pre-clamp) grating value at pixel `(y, x)`.
    pub fn pattern(&self, class: usize, y: usize, x: usize) -> f64 {
        let th = self.orientation(class);
        let u = x as f64 * th.cos() + y as f64 * th.sin();
        self.amplitude * (2.0 * PI * self.frequency(class) * u / self.image_size as f64).cos()
    }

    /// Noise-free class image, `[H·W]`.
    pub fn template(&self, class: usize) -> Vec<f64> {
        let h = self.image_size;
        (0..h * h)
            .map(|i| self.pattern(class, i / h, i % h).clamp(-1.0, 1.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthBatch<T> {
    /// `[B, 1, H, W]`
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub superclass: Vec<usize>,
}

/// Draws `batch` labelled images; a pure function of `spec` and the stream.
pub fn generate_batch<T: Real, R: Rng>(spec: &SynthSpec, batch: usize, rng: &mut R) -> Result<SynthBatch<T>> {
    spec.validate()?;
    let h = spec.image_size;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..spec.num_classes)).collect();
    let mut data = Vec::with_capacity(batch * h * h);
    for &c in &labels {
        let flip = spec.flip && rng.random::<bool>();
        for y in 0..h {
            for x in 0..h {
                let xx = if flip { h - 1 - x } else { x };
                let noise = if spec.noise_std > 0.0 {
                    spec.noise_std * standard_normal(rng)
                } else {
                    0.0
                };
                data.push(T::cast((spec.pattern(c, y, xx) + noise).clamp(-1.0, 1.0)));
            }
        }
    }
    Ok(SynthBatch {
        images: Tensor::new([batch, 1, h, h], data)?,
        superclass: labels.iter().map(|&c| spec.superclass_of(c)).collect(),
        labels,
    })
}

fn centered_unit(v: &[f64]) -> Option<Vec<f64>> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let norm = c.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 1e-12).then(|| c.into_iter().map(|x| x / norm).collect())
}

/// Nearest-template classification by Pearson correlation; ties (including
/// constant images) go to the lowest class index.
pub fn oracle_classify<T: Real>(images: &Tensor<T>, spec: &SynthSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let h = spec.image_size;
    let s = images.shape();
    if s.len() != 4 || s[1] != 1 || s[2] != h || s[3] != h {
        return Err(Error::shape("oracle_classify", s, &[0, 1, h, h]));
    }
    let templates: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|c| centered_unit(&spec.template(c)).expect("gratings are not constant"))
        .collect();
    let per = h * h;
    let data = images.to_f64_vec();
    Ok(data
        .chunks_exact(per)
        .map(|img| {
            let Some(u) = centered_unit(img) else { return 0 };
            let mut best = (0, f64::NEG_INFINITY);
            for (c, t) in templates.iter().enumerate() {
                let r: f64 = u.iter().zip(t).map(|(a, b)| a * b).sum();
                if r > best.1 {
                    best = (c, r);
                }
            }
            best.0
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    #[test]
    fn superclass_mapping() {
        let s = SynthSpec::default();
        let got: Vec<usize> = (0..8).map(|c| s.superclass_of(c)).collect();
        assert_eq!(got, vec![0, 0, 1, 1, 2, 2, 3, 3]);
        assert!(SynthSpec {
            num_classes: 7,
            ..s
        }
        .validate()
        .is_err());
    }

    #[test]
    fn noise_free_same_class_identical() {
        let spec = SynthSpec {
            noise_std: 0.0,
            ..Default::default()
        };
        let b: SynthBatch<f64> = generate_batch(&spec, 64, &mut stream(1, Purpose::Data, 0)).unwrap();
        let per = 256;
        for i in 0..64 {
            for j in 0..64 {
                if b.labels[i] == b.labels[j] {
                    assert_eq!(
                        &b.images.data()[i * per..(i + 1) * per],
                        &b.images.data()[j * per..(j + 1) * per]
                    );
                }
            }
        }
        assert_eq!(oracle_classify(&b.images, &spec).unwrap(), b.labels);
    }

    #[test]
    fn generation_is_pure() {
        let spec = SynthSpec::default();
        let a: SynthBatch<f32> = generate_batch(&spec, 8, &mut stream(2, Purpose::Data, 5)).unwrap();
        let b: SynthBatch<f32> = generate_batch(&spec, 8, &mut stream(2, Purpose::Data, 5)).unwrap();
        assert_eq!(a, b);
        assert!(a.images.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn oracle_constant_image_ties_to_zero() {
        let spec = SynthSpec::default();
        let img = Tensor::<f64>::full([1, 1, 16, 16], 0.3);
        assert_eq!(oracle_classify(&img, &spec).unwrap(), vec![0]);
        assert!(oracle_classify(&Tensor::<f64>::zeros([1, 1, 8, 8]), &spec).is_err());
    }

    #[test]
    fn oracle_accurate_at_training_noise() {
        let spec = SynthSpec::default();
        let b: SynthBatch<f64> = generate_batch(&spec, 2000, &mut stream(3, Purpose::Data, 0)).unwrap();
        let pred = oracle_classify(&b.images, &spec).unwrap();
        let acc = pred.iter().zip(&b.labels).filter(|(a, b)| a == b).count() as f64 / 2000.0;
        assert!(acc > 0.99, "{acc}");
    }
}
