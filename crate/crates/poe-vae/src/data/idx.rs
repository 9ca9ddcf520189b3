//! IDX file ingestion and emission (the MNIST distribution format).
//!
//! Big-endian magic (0x00000803 for images, 0x00000801 for labels),
//! dimension sizes, then raw unsigned bytes. `.gz` paths are decompressed
//! transparently.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Images with labels, pixel values scaled to [0, 1].
#[derive(Debug, Clone)]
pub struct LabeledImages {
    /// Row-major pixels, `len = labels.len() * shape.iter().product()`.
    pub images: Vec<f32>,
    /// Per-image shape, e.g. `[1, 28, 28]`.
    pub shape: Vec<usize>,
    pub labels: Vec<u8>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    /// Keeps `indices` in order.
    pub fn select(&self, indices: &[usize]) -> LabeledImages {
        let p = self.pixels_per_image();
        let mut images = Vec::with_capacity(indices.len() * p);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        LabeledImages {
            images,
            shape: self.shape.clone(),
            labels,
        }
    }
}

fn open_maybe_gz(path: &Path) -> Result<Box<dyn Read>> {
    let file = File::open(path)
        .map_err(|e| Error::format(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    if path.extension().is_some_and(|e| e == "gz") {
        Ok(Box::new(flate2::bufread::GzDecoder::new(reader)))
    } else {
        Ok(Box::new(reader))
    }
}

fn read_u32_be(r: &mut dyn Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::format(format!("truncated IDX file while reading {what}")))?;
    Ok(u32::from_be_bytes(b))
}

/// Raw image tensor from an IDX images file: `(data, dims)` with
/// `dims[0] = N`.
pub fn load_idx_images(path: &Path) -> Result<(Vec<u8>, Vec<usize>)> {
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut r, "magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::format(format!(
            "{}: bad images magic 0x{magic:08x} (expected 0x{IMAGES_MAGIC:08x})",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r, "count")? as usize;
    let rows = read_u32_be(&mut r, "rows")? as usize;
    let cols = read_u32_be(&mut r, "cols")? as usize;
    let mut data = vec![0u8; n * rows * cols];
    r.read_exact(&mut data)
        .map_err(|_| Error::format(format!("{}: truncated pixel data", path.display())))?;
    Ok((data, vec![n, rows, cols]))
}

pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let mut r = open_maybe_gz(path)?;
    let magic = read_u32_be(&mut r, "magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::format(format!(
            "{}: bad labels magic 0x{magic:08x} (expected 0x{LABELS_MAGIC:08x})",
            path.display()
        )));
    }
    let n = read_u32_be(&mut r, "count")? as usize;
    let mut data = vec![0u8; n];
    r.read_exact(&mut data)
        .map_err(|_| Error::format(format!("{}: truncated label data", path.display())))?;
    Ok(data)
}

/// Loads an images/labels pair, scaling pixels to [0, 1] (255 → 1.0) and
/// checking that the counts agree and labels lie in 0..=9.
pub fn load_idx_pair(images: &Path, labels: &Path) -> Result<LabeledImages> {
    let (pixels, dims) = load_idx_images(images)?;
    let lab = load_idx_labels(labels)?;
    if dims[0] != lab.len() {
        return Err(Error::format(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            dims[0],
            labels.display(),
            lab.len()
        )));
    }
    if let Some(&bad) = lab.iter().find(|&&l| l > 9) {
        return Err(Error::format(format!("label {bad} outside 0..=9")));
    }
    Ok(LabeledImages {
        images: pixels.iter().map(|&b| b as f32 / 255.0).collect(),
        shape: vec![1, dims[1], dims[2]],
        labels: lab,
    })
}

pub fn save_idx_images(path: &Path, data: &[u8], n: usize, rows: usize, cols: usize) -> Result<()> {
    assert_eq!(data.len(), n * rows * cols);
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&IMAGES_MAGIC.to_be_bytes())?;
    w.write_all(&(n as u32).to_be_bytes())?;
    w.write_all(&(rows as u32).to_be_bytes())?;
    w.write_all(&(cols as u32).to_be_bytes())?;
    w.write_all(data)?;
    w.flush()?;
    Ok(())
}

pub fn save_idx_labels(path: &Path, labels: &[u8]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&LABELS_MAGIC.to_be_bytes())?;
    w.write_all(&(labels.len() as u32).to_be_bytes())?;
    w.write_all(labels)?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img");
        let labels = dir.path().join("lab");
        let pixels: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 23 % 256) as u8).collect();
        save_idx_images(&images, &pixels, 2, 3, 3).unwrap();
        save_idx_labels(&labels, &[7, 2]).unwrap();
        let loaded = load_idx_pair(&images, &labels).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.shape, vec![1, 3, 3]);
        assert_eq!(loaded.labels, vec![7, 2]);
        // byte value 255 -> pixel 1.0
        let max_idx = pixels.iter().position(|&b| b == 253).unwrap_or(0);
        assert!((loaded.images[max_idx] - pixels[max_idx] as f32 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img");
        let labels = dir.path().join("lab");
        save_idx_images(&images, &[0; 9], 1, 3, 3).unwrap();
        // an images file where labels are expected
        assert!(load_idx_labels(&images).is_err());
        save_idx_labels(&labels, &[1]).unwrap();
        assert!(load_idx_images(&labels).is_err());
    }

    #[test]
    fn count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img");
        let labels = dir.path().join("lab");
        save_idx_images(&images, &[0; 18], 2, 3, 3).unwrap();
        save_idx_labels(&labels, &[1, 2, 3]).unwrap();
        assert!(load_idx_pair(&images, &labels).is_err());
    }

    #[test]
    fn truncated_file_detected() {
        let dir = tempfile::tempdir().unwrap();
        let images = dir.path().join("img");
        save_idx_images(&images, &[0; 18], 2, 3, 3).unwrap();
        let bytes = std::fs::read(&images).unwrap();
        std::fs::write(&images, &bytes[..bytes.len() - 4]).unwrap();
        assert!(load_idx_images(&images).is_err());
    }

    #[test]
    fn gz_transparent() {
        use flate2::write::GzEncoder;
        use flate2::Compression;
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("img");
        save_idx_images(&plain, &[9; 9], 1, 3, 3).unwrap();
        let gz = dir.path().join("img.gz");
        let mut enc = GzEncoder::new(File::create(&gz).unwrap(), Compression::default());
        enc.write_all(&std::fs::read(&plain).unwrap()).unwrap();
        enc.finish().unwrap();
        let (a, da) = load_idx_images(&plain).unwrap();
        let (b, db) = load_idx_images(&gz).unwrap();
        assert_eq!(a, b);
        assert_eq!(da, db);
    }
}
