//! Omniglot directory loader.
//!
//! Expects `root/<alphabet>/<character>/*.png`, or a root holding the
//! `images_background` and `images_evaluation` trees of the official
//! release. Alphabets are assigned to splits by a seeded shuffle of their
//! sorted names.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::image::{resize_bilinear, rotate, Rotation};
use crate::data::{alphabet_counts, ClassRecord, DatasetSplit, Regime, IMAGE_SIZE};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct OmniglotOptions {
    pub split_seed: u64,
    pub expected_examples: usize,
    /// Map white-background/black-ink scans to ink near 1.
    pub invert: bool,
}

impl Default for OmniglotOptions {
    fn default() -> Self {
        Self {
            split_seed: 0,
            expected_examples: 20,
            invert: true,
        }
    }
}

fn dataset_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Dataset {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let read = fs::read_dir(dir).map_err(|e| dataset_err(dir, e.to_string()))?;
    let mut out = Vec::new();
    for entry in read {
        let path = entry?.path();
        let is_dir = path.is_dir();
        let png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if (want_dirs && is_dir) || (!want_dirs && !is_dir && png) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn alphabet_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if !root.is_dir() {
        return Err(dataset_err(root, "dataset root is not a directory"));
    }
    let official: Vec<PathBuf> = ["images_background", "images_evaluation"]
        .iter()
        .map(|d| root.join(d))
        .filter(|p| p.is_dir())
        .collect();
    let mut alphabets = Vec::new();
    if official.is_empty() {
        alphabets = sorted_entries(root, true)?;
    } else {
        for dir in official {
            alphabets.extend(sorted_entries(&dir, true)?);
        }
    }
    if alphabets.is_empty() {
        return Err(dataset_err(root, "no alphabet directories found"));
    }
    alphabets.sort_by(|a, b| a.file_name().cmp(&b.file_name()).then(a.cmp(b)));
    Ok(alphabets)
}

/// Decodes an image to a 28x28 plane in `[0, 1]`.
pub fn load_image(path: &Path, invert: bool) -> Result<Vec<f32>> {
    let img = ::image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane: Vec<f32> = img
        .into_raw()
        .into_iter()
        .map(|p| {
            let v = p as f32 / 255.0;
            if invert {
                1.0 - v
            } else {
                v
            }
        })
        .collect();
    Ok(resize_bilinear(&plane, w, h, IMAGE_SIZE, IMAGE_SIZE))
}

struct Character {
    alphabet: usize,
    source: String,
    images: Vec<Vec<f32>>,
}

pub fn load_omniglot(root: &Path, regime: Regime, options: OmniglotOptions) -> Result<DatasetSplit> {
    let alphabets = alphabet_dirs(root)?;
    let mut characters: Vec<Character> = Vec::new();
    for (alphabet_id, dir) in alphabets.iter().enumerate() {
        let alphabet_name = dir.file_name().unwrap().to_string_lossy().into_owned();
        let chars = sorted_entries(dir, true)?;
        if chars.is_empty() {
            return Err(dataset_err(dir, "alphabet has no character directories"));
        }
        for char_dir in chars {
            let files = sorted_entries(&char_dir, false)?;
            if files.len() != options.expected_examples {
                return Err(dataset_err(
                    &char_dir,
                    format!(
                        "character has {} images, expected {}",
                        files.len(),
                        options.expected_examples
                    ),
                ));
            }
            let images = files
                .iter()
                .map(|f| load_image(f, options.invert))
                .collect::<Result<Vec<_>>>()?;
            characters.push(Character {
                alphabet: alphabet_id,
                source: format!(
                    "{alphabet_name}/{}",
                    char_dir.file_name().unwrap().to_string_lossy()
                ),
                images,
            });
        }
    }

    let (n_train, n_val, _) = alphabet_counts(alphabets.len())?;
    let mut order: Vec<usize> = (0..alphabets.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(options.split_seed));
    let mut assignment = vec![0u8; alphabets.len()];
    for (rank, &a) in order.iter().enumerate() {
        assignment[a] = if rank < n_train {
            0
        } else if rank < n_train + n_val {
            1
        } else {
            2
        };
    }

    let rotations: &[Rotation] = match regime {
        Regime::WithinAlphabet => &[Rotation::R0],
        Regime::BetweenAlphabet => &Rotation::ALL,
    };
    let mut split = DatasetSplit {
        regime,
        examples_per_class: options.expected_examples,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    let mut next_id = 0;
    for ch in characters {
        for &rotation in rotations {
            let examples = ch
                .images
                .iter()
                .map(|img| Tensor::new(&[1, IMAGE_SIZE, IMAGE_SIZE], rotate(img, IMAGE_SIZE, rotation)))
                .collect::<Result<Vec<_>>>()?;
            let record = ClassRecord {
                class_id: next_id,
                alphabet_id: ch.alphabet,
                rotation,
                source: ch.source.clone(),
                examples,
            };
            next_id += 1;
            match assignment[ch.alphabet] {
                0 => split.train.push(record),
                1 => split.validation.push(record),
                _ => split.test.push(record),
            }
        }
    }
    split.validate()?;
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ::image::{GrayImage, Luma};

    fn write_tree(root: &Path, alphabets: usize, chars: usize, images: usize) {
        write_tree_named(root, "alpha", alphabets, chars, images);
    }

    fn write_tree_named(root: &Path, prefix: &str, alphabets: usize, chars: usize, images: usize) {
        for a in 0..alphabets {
            for c in 0..chars {
                let dir = root.join(format!("{prefix}{a:02}")).join(format!("character{c:02}"));
                fs::create_dir_all(&dir).unwrap();
                for i in 0..images {
                    let img = GrayImage::from_fn(35, 35, |x, y| {
                        Luma([if (x + y + a as u32 + c as u32 + i as u32) % 7 == 0 { 0 } else { 255 }])
                    });
                    img.save(dir.join(format!("{i:02}.png"))).unwrap();
                }
            }
        }
    }

    #[test]
    fn loads_both_regimes() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 5, 3, 4);
        let opts = OmniglotOptions {
            expected_examples: 4,
            ..Default::default()
        };
        let within = load_omniglot(dir.path(), Regime::WithinAlphabet, opts).unwrap();
        assert_eq!(within.total_classes(), 15);
        let between = load_omniglot(dir.path(), Regime::BetweenAlphabet, opts).unwrap();
        assert_eq!(between.total_classes(), 60);
        assert_eq!(between.train.len(), 4 * within.train.len());
        assert_eq!(between.test.len(), 4 * within.test.len());
        let img = &within.train[0].examples[0];
        assert_eq!(img.shape(), &[1, 28, 28]);
        assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        // white background inverted to zero
        assert!(img.data().iter().filter(|&&v| v < 0.5).count() > 392);
    }

    #[test]
    fn rotated_classes_are_rotations_of_the_source() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 3, 1, 2);
        let opts = OmniglotOptions {
            expected_examples: 2,
            ..Default::default()
        };
        let split = load_omniglot(dir.path(), Regime::BetweenAlphabet, opts).unwrap();
        let all: Vec<&ClassRecord> = split.train.iter().chain(&split.validation).chain(&split.test).collect();
        let base = all.iter().find(|c| c.rotation == Rotation::R0).unwrap();
        let r180 = all
            .iter()
            .find(|c| c.source == base.source && c.rotation == Rotation::R180)
            .unwrap();
        let back = rotate(r180.examples[0].data(), 28, Rotation::R180);
        assert_eq!(back.as_slice(), base.examples[0].data());
    }

    #[test]
    fn wrong_image_count_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        write_tree(dir.path(), 3, 2, 3);
        let err = load_omniglot(dir.path(), Regime::WithinAlphabet, OmniglotOptions::default()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("3 images, expected 20"), "{msg}");
    }

    #[test]
    fn empty_root_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_omniglot(dir.path(), Regime::WithinAlphabet, OmniglotOptions::default()).unwrap_err();
        assert!(err.to_string().contains(&dir.path().display().to_string()));
        let missing = dir.path().join("nope");
        let err = load_omniglot(&missing, Regime::WithinAlphabet, OmniglotOptions::default()).unwrap_err();
        assert!(err.to_string().contains("nope"));
    }

    #[test]
    fn official_layout_is_merged() {
        let dir = tempfile::tempdir().unwrap();
        write_tree_named(&dir.path().join("images_background"), "bg", 2, 1, 2);
        write_tree_named(&dir.path().join("images_evaluation"), "ev", 2, 1, 2);
        let opts = OmniglotOptions {
            expected_examples: 2,
            ..Default::default()
        };
        let split = load_omniglot(dir.path(), Regime::WithinAlphabet, opts).unwrap();
        assert_eq!(split.total_classes(), 4);
    }
}
