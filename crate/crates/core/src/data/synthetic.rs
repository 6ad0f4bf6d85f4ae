//! Synthetic few-shot datasets.
//!
//! Every class has a smooth random template (a few Gaussian bumps on a 28x28
//! canvas); its examples are the template plus i.i.d. Gaussian pixel noise.
//! The noise standard deviation is `d_min / (2 * separation)`, where `d_min`
//! is the smallest pixel-space distance between any two templates, so the
//! nearest-template rule confuses a given pair of classes with probability at
//! most `Phi(-separation)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{ClassRecord, DatasetSplit, Regime, Rotation, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,
    pub examples_per_class: usize,
    pub separation: f64,
    /// Consecutive classes grouped into one alphabet.
    pub alphabet_size: usize,
    pub bumps: usize,
    pub regime: Regime,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_classes: 20,
            val_classes: 0,
            test_classes: 10,
            examples_per_class: 20,
            separation: 3.0,
            alphabet_size: 5,
            bumps: 4,
            regime: Regime::BetweenAlphabet,
        }
    }
}

/// Smooth random template in `[0, 1]`.
fn template(rng: &mut ChaCha8Rng, bumps: usize) -> Vec<f32> {
    let centers: Vec<(f64, f64, f64)> = (0..bumps)
        .map(|_| {
            (
                rng.gen_range(5.0..23.0),
                rng.gen_range(5.0..23.0),
                rng.gen_range(1.5..3.5),
            )
        })
        .collect();
    let mut img = vec![0.0f32; IMAGE_SIZE * IMAGE_SIZE];
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let v: f64 = centers
                .iter()
                .map(|&(cx, cy, s)| {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    (-d2 / (2.0 * s * s)).exp()
                })
                .sum();
            img[y * IMAGE_SIZE + x] = v.min(1.0) as f32;
        }
    }
    img
}

pub fn pixel_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Generated dataset together with the class templates.
#[derive(Debug, Clone)]
pub struct Synthetic {
    pub split: DatasetSplit,
    /// Templates indexed by `class_id`.
    pub templates: Vec<Vec<f32>>,
    pub noise_std: f64,
}

pub fn make_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Synthetic> {
    if !(spec.separation > 0.0) {
        return Err(Error::InvalidHyperparameter {
            name: "separation",
            value: spec.separation,
        });
    }
    let total = spec.train_classes + spec.val_classes + spec.test_classes;
    if total < 2 || spec.examples_per_class == 0 || spec.alphabet_size == 0 || spec.bumps == 0 {
        return Err(Error::Config(
            "synthetic dataset needs two classes, one example, one bump and a positive alphabet size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f32>> = (0..total).map(|_| template(&mut rng, spec.bumps)).collect();
    let mut d_min = f64::INFINITY;
    for i in 0..total {
        for j in i + 1..total {
            d_min = d_min.min(pixel_distance(&templates[i], &templates[j]));
        }
    }
    let noise_std = d_min / (2.0 * spec.separation);

    let mut split = DatasetSplit {
        regime: spec.regime,
        examples_per_class: spec.examples_per_class,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    let mut alphabet_base = 0;
    let mut class_id = 0;
    for (count, target) in [
        (spec.train_classes, 0usize),
        (spec.val_classes, 1),
        (spec.test_classes, 2),
    ] {
        for local in 0..count {
            let tpl = &templates[class_id];
            let examples = (0..spec.examples_per_class)
                .map(|_| {
                    let data = tpl
                        .iter()
                        .map(|&p| p + (noise_std * rng.sample::<f64, _>(StandardNormal)) as f32)
                        .collect();
                    Tensor::new(&[1, IMAGE_SIZE, IMAGE_SIZE], data)
                })
                .collect::<Result<Vec<_>>>()?;
            let record = ClassRecord {
                class_id,
                alphabet_id: alphabet_base + local / spec.alphabet_size,
                rotation: Rotation::R0,
                source: format!("synthetic/{class_id}"),
                examples,
            };
            match target {
                0 => split.train.push(record),
                1 => split.validation.push(record),
                _ => split.test.push(record),
            }
            class_id += 1;
        }
        alphabet_base += count.div_ceil(spec.alphabet_size);
    }
    split.validate()?;
    Ok(Synthetic {
        split,
        templates,
        noise_std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_dataset() {
        let spec = SyntheticSpec::default();
        let a = make_synthetic(&spec, 4).unwrap();
        let b = make_synthetic(&spec, 4).unwrap();
        assert_eq!(a.split, b.split);
        let c = make_synthetic(&spec, 5).unwrap();
        assert_ne!(a.split, c.split);
    }

    #[test]
    fn split_shape_and_alphabets() {
        let spec = SyntheticSpec {
            train_classes: 12,
            val_classes: 3,
            test_classes: 7,
            alphabet_size: 5,
            ..Default::default()
        };
        let s = make_synthetic(&spec, 1).unwrap().split;
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (12, 3, 7));
        assert!(s.train.iter().all(|c| c.alphabet_id < 3));
        assert!(s.validation.iter().all(|c| c.alphabet_id == 3));
        assert!(s.test.iter().all(|c| (4..6).contains(&c.alphabet_id)));
        s.validate().unwrap();
    }

    #[test]
    fn non_positive_separation_is_rejected() {
        let spec = SyntheticSpec {
            separation: 0.0,
            ..Default::default()
        };
        assert!(make_synthetic(&spec, 0).is_err());
    }

    fn nearest_template_accuracy(spec: &SyntheticSpec, seed: u64) -> f64 {
        let syn = make_synthetic(spec, seed).unwrap();
        let classes: Vec<&ClassRecord> = syn.split.train.iter().chain(&syn.split.test).collect();
        let mut correct = 0;
        let mut total = 0;
        for c in &classes {
            for e in &c.examples {
                let best = (0..syn.templates.len())
                    .min_by(|&a, &b| {
                        pixel_distance(e.data(), &syn.templates[a])
                            .total_cmp(&pixel_distance(e.data(), &syn.templates[b]))
                    })
                    .unwrap();
                correct += (best == c.class_id) as usize;
                total += 1;
            }
        }
        correct as f64 / total as f64
    }

    #[test]
    fn well_separated_classes_are_pixel_separable() {
        let spec = SyntheticSpec {
            train_classes: 10,
            test_classes: 0,
            separation: 5.0,
            ..Default::default()
        };
        assert!(nearest_template_accuracy(&spec, 3) > 0.99);
    }

    #[test]
    fn huge_separation_is_perfect() {
        let spec = SyntheticSpec {
            separation: 1e6,
            ..Default::default()
        };
        assert_eq!(nearest_template_accuracy(&spec, 8), 1.0);
    }
}
