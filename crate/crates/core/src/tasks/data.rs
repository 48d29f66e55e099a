//! Classification datasets: a seeded Gaussian mixture and an IDX reader.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::TaskError;
use crate::util::rng_for;

/// Row-major features with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }
}

/// K-class mixture: class means drawn from N(0, mean_scale²) per dimension,
/// unit isotropic covariance, uniform class priors.
pub fn gaussian_mixture(samples: usize, dim: usize, classes: usize, mean_scale: f64, seed: u64) -> Dataset {
    let mut rng = rng_for(seed, &[0x6d69_7874]);
    let means_dist = Normal::new(0.0, mean_scale).expect("finite scale");
    let means: Vec<f64> = (0..classes * dim).map(|_| means_dist.sample(&mut rng)).collect();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let y = rng.random_range(0..classes);
        labels.push(y);
        for j in 0..dim {
            features.push(means[y * dim + j] + noise.sample(&mut rng));
        }
    }
    Dataset { features, labels, dim, classes }
}

fn read_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32, TaskError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| TaskError::Format(format!("{what}: truncated header")))
}

/// Reads an IDX image file (magic 0x803) and label file (magic 0x801).
/// Pixels are scaled to [0, 1].
pub fn load_idx(images: &Path, labels: &Path) -> Result<Dataset, TaskError> {
    let img = fs::read(images).map_err(|e| TaskError::Io(format!("{}: {e}", images.display())))?;
    let lab = fs::read(labels).map_err(|e| TaskError::Io(format!("{}: {e}", labels.display())))?;
    parse_idx(&img, &lab)
}

pub fn parse_idx(img: &[u8], lab: &[u8]) -> Result<Dataset, TaskError> {
    let magic = read_u32(img, 0, "images")?;
    if magic != 0x0000_0803 {
        return Err(TaskError::Format(format!("images: bad magic {magic:#010x}")));
    }
    let n = read_u32(img, 4, "images")? as usize;
    let rows = read_u32(img, 8, "images")? as usize;
    let cols = read_u32(img, 12, "images")? as usize;
    let dim = rows * cols;
    let pixels = &img[16..];
    if pixels.len() < n * dim {
        return Err(TaskError::Format(format!(
            "images: truncated, expected {} pixel bytes, found {}",
            n * dim,
            pixels.len()
        )));
    }
    let magic = read_u32(lab, 0, "labels")?;
    if magic != 0x0000_0801 {
        return Err(TaskError::Format(format!("labels: bad magic {magic:#010x}")));
    }
    let m = read_u32(lab, 4, "labels")? as usize;
    if m != n {
        return Err(TaskError::Format(format!("{n} images but {m} labels")));
    }
    let raw = &lab[8..];
    if raw.len() < m {
        return Err(TaskError::Format(format!("labels: truncated, expected {m}, found {}", raw.len())));
    }
    let labels: Vec<usize> = raw[..m].iter().map(|&b| b as usize).collect();
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(TaskError::Format(format!("label {bad} outside 0..=9")));
    }
    let features = pixels[..n * dim].iter().map(|&p| p as f64 / 255.0).collect();
    Ok(Dataset { features, labels, dim, classes: 10 })
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn idx_fixture(n: usize, rows: usize, cols: usize) -> (Vec<u8>, Vec<u8>) {
        let mut img = vec![0, 0, 8, 3];
        for d in [n, rows, cols] {
            img.extend_from_slice(&(d as u32).to_be_bytes());
        }
        img.extend((0..n * rows * cols).map(|i| if i == 0 { 255 } else { (i % 256) as u8 }));
        let mut lab = vec![0, 0, 8, 1];
        lab.extend_from_slice(&(n as u32).to_be_bytes());
        lab.extend((0..n).map(|i| (i % 10) as u8));
        (img, lab)
    }

    #[test]
    fn reads_well_formed_fixture() {
        let (img, lab) = idx_fixture(4, 2, 3);
        let d = parse_idx(&img, &lab).unwrap();
        assert_eq!((d.len(), d.dim), (4, 6));
        assert_eq!(d.features[0], 1.0);
        assert_eq!(d.labels, vec![0, 1, 2, 3]);
    }

    #[test]
    fn rejects_bad_files() {
        let (mut img, lab) = idx_fixture(2, 2, 2);
        let good = img.clone();
        img[3] = 4;
        assert!(matches!(parse_idx(&img, &lab), Err(TaskError::Format(m)) if m.contains("magic")));
        assert!(matches!(parse_idx(&good[..good.len() - 1], &lab), Err(TaskError::Format(m)) if m.contains("truncated")));
        let (_, lab3) = idx_fixture(3, 2, 2);
        assert!(matches!(parse_idx(&good, &lab3), Err(TaskError::Format(m)) if m.contains("labels")));
    }

    #[test]
    fn mixture_is_reproducible() {
        let a = gaussian_mixture(64, 4, 3, 1.5, 9);
        let b = gaussian_mixture(64, 4, 3, 1.5, 9);
        assert_eq!(a, b);
        assert_ne!(a, gaussian_mixture(64, 4, 3, 1.5, 10));
    }
}
