//! Synthetic classification sets and an MNIST IDX reader.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        inputs: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            inputs,
            labels,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() || self.inputs.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "dataset {} has {} inputs and {} labels",
                self.name,
                self.inputs.len(),
                self.labels.len()
            )));
        }
        let d = self.inputs[0].len();
        if self.inputs.iter().any(|x| x.len() != d) {
            return Err(Error::Shape(format!(
                "dataset {} has ragged inputs",
                self.name
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::Domain(format!(
                "label {l} out of range for {} classes",
                self.num_classes
            )));
        }
        if self.inputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "dataset {} has non-finite inputs",
                self.name
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    fn select(&self, idx: &[usize], name: String) -> Self {
        Self {
            name,
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }
}

/// Angular range of each spiral arm.
pub const SPIRAL_THETA: (f64, f64) = (0.5 * PI, 3.0 * PI);
/// Radius per radian: noiseless points satisfy `r = SPIRAL_SCALE · θ`.
pub const SPIRAL_SCALE: f64 = 1.0 / (3.0 * PI);

/// Two interleaved Archimedean spirals. Class `c` follows
/// `(r cos(θ + cπ), r sin(θ + cπ))` with `r = SPIRAL_SCALE·θ`, plus
/// isotropic Gaussian noise.
pub fn gen_spirals(n_per_class: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || !(noise_sd >= 0.0) {
        return Err(Error::Domain(
            "spirals need n_per_class > 0 and noise_sd ≥ 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Domain(e.to_string()))?;
    let mut inputs = Vec::with_capacity(2 * n_per_class);
    let mut labels = Vec::with_capacity(2 * n_per_class);
    for c in 0..2 {
        for _ in 0..n_per_class {
            let theta = rng.gen_range(SPIRAL_THETA.0..SPIRAL_THETA.1);
            let r = SPIRAL_SCALE * theta;
            let phase = theta + c as f64 * PI;
            let (ex, ey) = if noise_sd > 0.0 {
                (noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            inputs.push(vec![r * phase.cos() + ex, r * phase.sin() + ey]);
            labels.push(c);
        }
    }
    Dataset::new("spirals", inputs, labels, 2)
}

/// Two Gaussian blobs centred at `(±separation/2, 0)`.
pub fn gen_blobs(n_per_class: usize, separation: f64, sd: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || !(sd >= 0.0) {
        return Err(Error::Domain(
            "blobs need n_per_class > 0 and sd ≥ 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, sd).map_err(|e| Error::Domain(e.to_string()))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        let cx = if c == 0 {
            -0.5 * separation
        } else {
            0.5 * separation
        };
        for _ in 0..n_per_class {
            inputs.push(vec![cx + noise.sample(&mut rng), noise.sample(&mut rng)]);
            labels.push(c);
        }
    }
    Dataset::new("blobs", inputs, labels, 2)
}

/// Two interleaving half circles.
pub fn gen_moons(n_per_class: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n_per_class == 0 || !(noise_sd >= 0.0) {
        return Err(Error::Domain(
            "moons need n_per_class > 0 and noise_sd ≥ 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).map_err(|e| Error::Domain(e.to_string()))?;
    let mut inputs = Vec::new();
    let mut labels = Vec::new();
    for c in 0..2 {
        for _ in 0..n_per_class {
            let a = rng.gen_range(0.0..PI);
            let (x, y) = if c == 0 {
                (a.cos(), a.sin())
            } else {
                (1.0 - a.cos(), 0.5 - a.sin())
            };
            let (ex, ey) = if noise_sd > 0.0 {
                (noise.sample(&mut rng), noise.sample(&mut rng))
            } else {
                (0.0, 0.0)
            };
            inputs.push(vec![x - 0.5 + ex, y - 0.25 + ey]);
            labels.push(c);
        }
    }
    Dataset::new("moons", inputs, labels, 2)
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_err(path, format!("truncated header at byte {at}")))
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

/// Parse an IDX image file into flattened rows scaled to `[0, 1]`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Vec<Vec<f64>>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES {
        return Err(format_err(
            path,
            format!("magic {magic:#010x}, expected {IDX_IMAGES:#010x} for images"),
        ));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)? as usize;
    let cols = read_u32(bytes, 12, path)? as usize;
    let per = rows * cols;
    let payload = &bytes[16..];
    if payload.len() != n * per {
        return Err(format_err(
            path,
            format!(
                "expected {} pixel bytes for {n} images of {rows}×{cols}, found {}",
                n * per,
                payload.len()
            ),
        ));
    }
    Ok(payload
        .chunks_exact(per.max(1))
        .take(n)
        .map(|img| img.iter().map(|&p| f64::from(p) / 255.0).collect())
        .collect())
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>> {
    let magic = read_u32(bytes, 0, path)?;
    if magic != IDX_LABELS {
        return Err(format_err(
            path,
            format!("magic {magic:#010x}, expected {IDX_LABELS:#010x} for labels"),
        ));
    }
    let n = read_u32(bytes, 4, path)? as usize;
    let payload = &bytes[8..];
    if payload.len() != n {
        return Err(format_err(
            path,
            format!("expected {n} label bytes, found {}", payload.len()),
        ));
    }
    if let Some(&l) = payload.iter().find(|&&l| l > 9) {
        return Err(format_err(path, format!("label {l} outside 0-9")));
    }
    Ok(payload.iter().map(|&l| usize::from(l)).collect())
}

pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = parse_idx_images(&std::fs::read(images_path)?, images_path)?;
    let labels = parse_idx_labels(&std::fs::read(labels_path)?, labels_path)?;
    if images.len() != labels.len() {
        return Err(format_err(
            labels_path,
            format!(
                "{} labels for {} images in {}",
                labels.len(),
                images.len(),
                images_path.display()
            ),
        ));
    }
    Dataset::new("mnist", images, labels, 10)
}

/// Class-stratified deterministic subsample of size `n`: each class gets
/// its proportional share, remainders going to the largest fractional parts.
pub fn subsample(ds: &Dataset, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || n > ds.len() {
        return Err(Error::Domain(format!(
            "cannot draw {n} items from {}",
            ds.len()
        )));
    }
    let counts = ds.class_counts();
    let total = ds.len() as f64;
    let exact: Vec<f64> = counts
        .iter()
        .map(|&c| c as f64 * n as f64 / total)
        .collect();
    let mut take: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        (exact[b] - exact[b].floor())
            .total_cmp(&(exact[a] - exact[a].floor()))
            .then(a.cmp(&b))
    });
    let mut left = n - take.iter().sum::<usize>();
    for &c in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if take[c] < counts[c] {
            take[c] += 1;
            left -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::with_capacity(n);
    for (c, &k) in take.iter().enumerate() {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..k]);
    }
    chosen.shuffle(&mut rng);
    Ok(ds.select(&chosen, ds.name.clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn noiseless_spirals_lie_on_the_curve() {
        let ds = gen_spirals(50, 0.0, 1).unwrap();
        assert_eq!(ds.class_counts(), vec![50, 50]);
        for (x, &c) in ds.inputs.iter().zip(&ds.labels) {
            let r = x[0].hypot(x[1]);
            let theta = r / SPIRAL_SCALE;
            let phase = theta + c as f64 * PI;
            assert!((x[0] - r * phase.cos()).abs() < 1e-12);
            assert!((x[1] - r * phase.sin()).abs() < 1e-12);
            assert!(theta >= SPIRAL_THETA.0 - 1e-12 && theta < SPIRAL_THETA.1 + 1e-12);
        }
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(
            gen_spirals(20, 0.1, 5).unwrap(),
            gen_spirals(20, 0.1, 5).unwrap()
        );
        assert_ne!(
            gen_spirals(20, 0.1, 5).unwrap(),
            gen_spirals(20, 0.1, 6).unwrap()
        );
        assert_eq!(
            gen_moons(20, 0.1, 5).unwrap(),
            gen_moons(20, 0.1, 5).unwrap()
        );
        assert_eq!(gen_blobs(20, 4.0, 0.5, 5).unwrap().len(), 40);
        assert!(gen_spirals(0, 0.1, 1).is_err());
    }

    fn image_file(magic: u32, n: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [magic, n, 28, 28] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(pixels);
        b
    }

    #[test]
    fn idx_fixture_round_trip() {
        let mut pixels = vec![0u8; 2 * 784];
        pixels[0] = 255;
        pixels[783] = 51;
        pixels[784 + 400] = 102;
        let imgs = parse_idx_images(&image_file(IDX_IMAGES, 2, &pixels), Path::new("img")).unwrap();
        let mut want0 = vec![0.0; 784];
        want0[0] = 1.0;
        want0[783] = 0.2;
        let mut want1 = vec![0.0; 784];
        want1[400] = 0.4;
        assert_eq!(imgs, vec![want0, want1]);

        let mut lab = Vec::new();
        lab.extend_from_slice(&IDX_LABELS.to_be_bytes());
        lab.extend_from_slice(&2u32.to_be_bytes());
        lab.extend_from_slice(&[7, 3]);
        assert_eq!(
            parse_idx_labels(&lab, Path::new("lab")).unwrap(),
            vec![7, 3]
        );
    }

    #[test]
    fn idx_errors_name_the_file() {
        let err = parse_idx_images(&image_file(IDX_LABELS, 0, &[]), Path::new("train-images"))
            .unwrap_err();
        assert!(matches!(&err, Error::Format { path, .. } if path == Path::new("train-images")));
        assert!(parse_idx_images(&[], Path::new("empty")).is_err());
        assert!(
            parse_idx_images(&image_file(IDX_IMAGES, 2, &[0; 784]), Path::new("short")).is_err()
        );
    }

    #[test]
    fn mnist_count_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("img");
        let lab = dir.path().join("lab");
        std::fs::write(&img, image_file(IDX_IMAGES, 1, &[0; 784])).unwrap();
        let mut l = Vec::new();
        l.extend_from_slice(&IDX_LABELS.to_be_bytes());
        l.extend_from_slice(&2u32.to_be_bytes());
        l.extend_from_slice(&[1, 2]);
        std::fs::write(&lab, l).unwrap();
        assert!(matches!(
            load_mnist_idx(&img, &lab),
            Err(Error::Format { .. })
        ));
        std::fs::write(&lab, []).unwrap();
        assert!(matches!(
            load_mnist_idx(&img, &lab),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn full_subsample_is_a_permutation() {
        let ds = gen_moons(30, 0.1, 2).unwrap();
        let s = subsample(&ds, ds.len(), 4).unwrap();
        let key = |d: &Dataset| {
            let mut v: Vec<(Vec<u64>, usize)> = d
                .inputs
                .iter()
                .zip(&d.labels)
                .map(|(x, &l)| (x.iter().map(|v| v.to_bits()).collect(), l))
                .collect();
            v.sort();
            v
        };
        assert_eq!(key(&s), key(&ds));
        assert_eq!(
            subsample(&ds, 17, 9).unwrap(),
            subsample(&ds, 17, 9).unwrap()
        );
        assert!(subsample(&ds, 61, 0).is_err());
    }

    proptest! {
        #[test]
        fn subsample_is_stratified(a in 1usize..40, b in 1usize..40, n_frac in 0.05f64..1.0, seed in 0u64..100) {
            let mut inputs = Vec::new();
            let mut labels = Vec::new();
            for i in 0..a + b {
                inputs.push(vec![i as f64]);
                labels.push(usize::from(i >= a));
            }
            let ds = Dataset::new("t", inputs, labels, 2).unwrap();
            let n = ((ds.len() as f64 * n_frac).round() as usize).clamp(1, ds.len());
            let s = subsample(&ds, n, seed).unwrap();
            prop_assert_eq!(s.len(), n);
            let counts = s.class_counts();
            for (c, &orig) in ds.class_counts().iter().enumerate() {
                let expect = orig as f64 * n as f64 / ds.len() as f64;
                prop_assert!((counts[c] as f64 - expect).abs() <= 1.0);
            }
        }
    }
}
