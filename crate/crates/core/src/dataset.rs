//! Labeled image sets: class-per-subdirectory PNG folders, plus a procedural
//! 10-class generator used to bootstrap a desk-scale experiment.

use std::path::{Path, PathBuf};

use image::{ImageBuffer, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor3;

#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub image: Tensor3<T>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample<T>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn label_count(&self) -> usize {
        self.class_names.len()
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            class_names: self.class_names.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    id: s.id.clone(),
                    image: s.image.cast(),
                    label: s.label,
                })
                .collect(),
        }
    }

    /// Loads `root/<class>/<image>.png`. Classes are the sorted subdirectory
    /// names; unreadable files are skipped with a warning.
    pub fn load_dir(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
            .map_err(|e| Error::io(root, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        class_dirs.sort();
        if class_dirs.is_empty() {
            return Err(Error::Input(format!(
                "{} contains no class directories",
                root.display()
            )));
        }
        let mut class_names = Vec::with_capacity(class_dirs.len());
        let mut samples = Vec::new();
        for (label, dir) in class_dirs.iter().enumerate() {
            let name = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .map_err(|e| Error::io(dir, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            files.sort();
            let before = samples.len();
            for file in files {
                match image::open(&file) {
                    Ok(img) => {
                        let rgb = img.to_rgb8();
                        let file_name = file
                            .file_name()
                            .map(|n| n.to_string_lossy().into_owned())
                            .unwrap_or_default();
                        samples.push(Sample {
                            id: format!("{name}/{file_name}"),
                            image: rgb_to_tensor(&rgb),
                            label,
                        });
                    }
                    Err(e) => log::warn!("skipping unreadable image {}: {e}", file.display()),
                }
            }
            if samples.len() == before {
                return Err(Error::Input(format!(
                    "class directory {} has no readable images",
                    dir.display()
                )));
            }
            class_names.push(name);
        }
        Ok(Self {
            class_names,
            samples,
        })
    }

    pub fn save_dir(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for name in &self.class_names {
            let dir = root.join(name);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        for s in &self.samples {
            let path = root.join(&s.id);
            tensor_to_rgb(&s.image)?
                .save(&path)
                .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor3<T> {
    let (w, h) = img.dimensions();
    Tensor3::from_fn(3, h as usize, w as usize, |c, y, x| {
        T::lit(img.get_pixel(x as u32, y as u32).0[c] as f64 / 255.0)
    })
}

pub fn tensor_to_rgb<T: Scalar>(t: &Tensor3<T>) -> Result<RgbImage> {
    if t.channels != 3 && t.channels != 1 {
        return Err(Error::Input(format!(
            "cannot encode a {}-channel tensor as RGB",
            t.channels
        )));
    }
    Ok(ImageBuffer::from_fn(
        t.width as u32,
        t.height as u32,
        |x, y| {
            let px = |c: usize| {
                let c = if t.channels == 1 { 0 } else { c };
                (t.get(c, y as usize, x as usize).as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
            };
            Rgb([px(0), px(1), px(2)])
        },
    ))
}

/// Names of the generated pattern classes.
pub const SHAPE_CLASSES: [&str; 10] = [
    "00_hbar",
    "01_vbar",
    "02_diag",
    "03_antidiag",
    "04_plus",
    "05_cross",
    "06_frame",
    "07_block",
    "08_ring",
    "09_corner",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShapesConfig {
    pub side: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Std-dev of additive pixel noise.
    pub noise: f64,
    /// Probability of blanking each stroke pixel.
    pub dropout: f64,
    /// Max absolute jitter of the shape center, in pixels.
    pub jitter: i64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        Self {
            side: 16,
            train_per_class: 120,
            test_per_class: 60,
            noise: 0.28,
            dropout: 0.3,
            jitter: 3,
            seed: 7,
        }
    }
}

fn stroke(class: usize, side: i64, cx: i64, cy: i64, size: i64, x: i64, y: i64) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    let inside = dx.abs() <= size && dy.abs() <= size;
    match class {
        0 => dy.abs() <= 1 && dx.abs() <= size,
        1 => dx.abs() <= 1 && dy.abs() <= size,
        2 => inside && (dx - dy).abs() <= 1,
        3 => inside && (dx + dy).abs() <= 1,
        4 => inside && (dx.abs() <= 0 || dy.abs() <= 0),
        5 => inside && (dx.abs() - dy.abs()).abs() <= 0,
        6 => inside && (dx.abs() == size || dy.abs() == size),
        7 => dx.abs() <= size / 2 + 1 && dy.abs() <= size / 2 + 1,
        8 => {
            let r2 = dx * dx + dy * dy;
            r2 <= size * size + size && r2 >= (size - 1) * (size - 1) - size / 2
        }
        9 => inside && ((dx == -size || dx == -size + 1) || (dy == size || dy == size - 1)),
        _ => {
            let _ = side;
            false
        }
    }
}

fn render_shape<T: Scalar>(class: usize, cfg: &ShapesConfig, rng: &mut ChaCha8Rng) -> Tensor3<T> {
    let side = cfg.side as i64;
    let half = side / 2;
    let cx = half + rng.random_range(-cfg.jitter..=cfg.jitter) - 1;
    let cy = half + rng.random_range(-cfg.jitter..=cfg.jitter) - 1;
    let size = rng.random_range(3..=5);
    let bg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..0.45));
    let fg: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.35..1.0));
    let noise = Normal::new(0.0, cfg.noise).expect("noise std is finite");
    let mut pixels = vec![[0.0f64; 3]; (side * side) as usize];
    for y in 0..side {
        for x in 0..side {
            let on = stroke(class, side, cx, cy, size, x, y) && !rng.random_bool(cfg.dropout);
            let base = if on { fg } else { bg };
            let px = &mut pixels[(y * side + x) as usize];
            for c in 0..3 {
                px[c] = base[c] + noise.sample(rng);
            }
        }
    }
    // Quantize exactly as a PNG round trip would.
    Tensor3::from_fn(3, cfg.side, cfg.side, |c, y, x| {
        let v = pixels[y * cfg.side + x][c].clamp(0.0, 1.0);
        T::lit((v * 255.0).round() / 255.0)
    })
}

/// Deterministic (train, test) split of the pattern dataset.
pub fn generate_shapes<T: Scalar>(cfg: &ShapesConfig) -> (Dataset<T>, Dataset<T>) {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let class_names: Vec<String> = SHAPE_CLASSES.iter().map(|s| s.to_string()).collect();
    let mut split = |per_class: usize| {
        let mut samples = Vec::with_capacity(per_class * SHAPE_CLASSES.len());
        for (label, name) in SHAPE_CLASSES.iter().enumerate() {
            for i in 0..per_class {
                samples.push(Sample {
                    id: format!("{name}/{i:05}.png"),
                    image: render_shape(label, cfg, &mut rng),
                    label,
                });
            }
        }
        Dataset {
            class_names: class_names.clone(),
            samples,
        }
    };
    let train = split(cfg.train_per_class);
    let test = split(cfg.test_per_class);
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ShapesConfig {
        ShapesConfig {
            train_per_class: 2,
            test_per_class: 1,
            ..ShapesConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, _) = generate_shapes::<f64>(&small());
        let (b, _) = generate_shapes::<f64>(&small());
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        assert!(a.samples.iter().all(|s| s.image.shape() == (3, 16, 16)));
    }

    #[test]
    fn png_round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = generate_shapes::<f64>(&small());
        train.save_dir(dir.path()).unwrap();
        let back = Dataset::<f64>::load_dir(dir.path()).unwrap();
        assert_eq!(back, train);
    }

    #[test]
    fn empty_inputs_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            Dataset::<f64>::load_dir(dir.path()),
            Err(Error::Input(_))
        ));
        std::fs::create_dir(dir.path().join("a")).unwrap();
        std::fs::write(dir.path().join("a/broken.png"), b"nope").unwrap();
        assert!(matches!(
            Dataset::<f64>::load_dir(dir.path()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn unreadable_files_are_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let (train, _) = generate_shapes::<f64>(&small());
        train.save_dir(dir.path()).unwrap();
        std::fs::write(dir.path().join("00_hbar/zz_broken.png"), b"nope").unwrap();
        assert_eq!(Dataset::<f64>::load_dir(dir.path()).unwrap().len(), 20);
    }
}
