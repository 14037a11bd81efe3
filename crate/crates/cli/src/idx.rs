//! IDX (MNIST container) reading and the rotated-digit preprocessing.

use std::f64::consts::PI;
use std::path::Path;

use dsf_core::tensor::{rotate_interp, Tensor4};
use dsf_core::train::Dataset;
use dsf_core::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxDataset {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub rows: usize,
    pub cols: usize,
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Format(format!("{what}: header is truncated")))
}

/// Parses an image file (`magic, count, rows, cols, pixels`).
pub fn parse_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let magic = be_u32(bytes, 0, "image file")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Format(format!("image file magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "image file")? as usize;
    let rows = be_u32(bytes, 8, "image file")? as usize;
    let cols = be_u32(bytes, 12, "image file")? as usize;
    let len = count
        .checked_mul(rows)
        .and_then(|v| v.checked_mul(cols))
        .ok_or_else(|| Error::Format("image file dimensions overflow".into()))?;
    let body = &bytes[16..];
    if body.len() < len {
        return Err(Error::Format(format!("image file holds {} of {len} pixel bytes", body.len())));
    }
    Ok((count, rows, cols, body[..len].to_vec()))
}

/// Parses a label file (`magic, count, labels`).
pub fn parse_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "label file")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Format(format!("label file magic {magic:#010x}, expected {LABEL_MAGIC:#010x}")));
    }
    let count = be_u32(bytes, 4, "label file")? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(Error::Format(format!("label file holds {} of {count} labels", body.len())));
    }
    Ok(body[..count].to_vec())
}

pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<IdxDataset> {
    let (count, rows, cols, pixels) = parse_images(images)?;
    let labels = parse_labels(labels)?;
    if labels.len() != count {
        return Err(Error::Consistency(format!("{count} images but {} labels", labels.len())));
    }
    Ok(IdxDataset { images: pixels, labels, rows, cols })
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<IdxDataset> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::Format(format!("{}: {e}", p.display())));
    parse_idx(&read(images_path)?, &read(labels_path)?)
}

impl IdxDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let area = self.rows * self.cols;
        &self.images[i * area..(i + 1) * area]
    }

    /// The first `count` samples (all of them when `count` exceeds the size).
    pub fn take(&self, count: usize) -> Self {
        let count = count.min(self.len());
        Self {
            images: self.images[..count * self.rows * self.cols].to_vec(),
            labels: self.labels[..count].to_vec(),
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Scales pixels to `[0, 1]` and brings every image to `size x size`:
    /// centered zero padding when growing, area averaging when shrinking.
    pub fn to_dataset(&self, size: usize) -> Result<Dataset> {
        if size == 0 {
            return Err(Error::Config("image size must be positive".into()));
        }
        let mut data = Vec::with_capacity(self.len() * size * size);
        for i in 0..self.len() {
            let img: Vec<f64> = self.image(i).iter().map(|&p| f64::from(p) / 255.0).collect();
            data.extend(resize(&img, self.rows, self.cols, size)?);
        }
        Dataset::new(data, self.labels.iter().map(|&l| usize::from(l)).collect(), 1, size, size)
    }
}

fn resize(img: &[f64], rows: usize, cols: usize, size: usize) -> Result<Vec<f64>> {
    if rows == size && cols == size {
        return Ok(img.to_vec());
    }
    if size >= rows && size >= cols {
        if (size - rows) % 2 != 0 || (size - cols) % 2 != 0 {
            return Err(Error::Config(format!("cannot center a {rows}x{cols} image in {size}x{size}")));
        }
        let (top, left) = ((size - rows) / 2, (size - cols) / 2);
        let mut out = vec![0.0; size * size];
        for y in 0..rows {
            out[(y + top) * size + left..(y + top) * size + left + cols].copy_from_slice(&img[y * cols..(y + 1) * cols]);
        }
        return Ok(out);
    }
    if rows != cols {
        return Err(Error::Config("only square images can be shrunk".into()));
    }
    Ok(area_downsample(img, rows, size))
}

/// Each output pixel is the mean of the source region it covers, with
/// fractional overlap weights.
fn area_downsample(img: &[f64], from: usize, to: usize) -> Vec<f64> {
    let scale = from as f64 / to as f64;
    // weights[o] lists (source index, overlap) along one axis.
    let weights: Vec<Vec<(usize, f64)>> = (0..to)
        .map(|o| {
            let (a, b) = (o as f64 * scale, (o + 1) as f64 * scale);
            (a.floor() as usize..(b.ceil() as usize).min(from))
                .map(|s| (s, ((s + 1) as f64).min(b) - (s as f64).max(a)))
                .filter(|&(_, w)| w > 0.0)
                .collect()
        })
        .collect();
    let norm = scale * scale;
    let mut out = vec![0.0; to * to];
    for (oy, wy) in weights.iter().enumerate() {
        for (ox, wx) in weights.iter().enumerate() {
            let mut acc = 0.0;
            for &(sy, fy) in wy {
                for &(sx, fx) in wx {
                    acc += fy * fx * img[sy * from + sx];
                }
            }
            out[oy * to + ox] = acc / norm;
        }
    }
    out
}

/// Rotates every image by its own angle drawn uniformly from `[0, 2 pi)`
/// (bilinear interpolation about the image center, zero fill). Angles are
/// drawn in sample order from a generator seeded with `seed`.
pub fn rotate_augment(ds: &IdxDataset, seed: u64) -> IdxDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let angles: Vec<f64> = (0..ds.len()).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    rotate_each(ds, &angles)
}

/// Rotates image `i` by `angles[i]` radians counter-clockwise.
pub fn rotate_each(ds: &IdxDataset, angles: &[f64]) -> IdxDataset {
    assert_eq!(angles.len(), ds.len(), "one angle per image");
    let (h, w) = (ds.rows, ds.cols);
    let mut images = Vec::with_capacity(ds.images.len());
    for (i, &theta) in angles.iter().enumerate() {
        let plane = Tensor4::new([1, 1, h, w], ds.image(i).iter().map(|&p| f64::from(p)).collect()).expect("image size");
        let rotated = rotate_interp(&plane, theta);
        images.extend(rotated.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
    }
    IdxDataset { images, labels: ds.labels.clone(), rows: h, cols: w }
}

/// Serialises a dataset back to the two IDX files' bytes.
pub fn encode_idx(ds: &IdxDataset) -> (Vec<u8>, Vec<u8>) {
    let mut images = Vec::with_capacity(16 + ds.images.len());
    for v in [IMAGE_MAGIC, ds.len() as u32, ds.rows as u32, ds.cols as u32] {
        images.extend_from_slice(&v.to_be_bytes());
    }
    images.extend_from_slice(&ds.images);
    let mut labels = Vec::with_capacity(8 + ds.len());
    for v in [LABEL_MAGIC, ds.len() as u32] {
        labels.extend_from_slice(&v.to_be_bytes());
    }
    labels.extend_from_slice(&ds.labels);
    (images, labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(count: usize) -> IdxDataset {
        IdxDataset { images: (0..count * 16).map(|i| (i * 7 % 256) as u8).collect(), labels: vec![3; count], rows: 4, cols: 4 }
    }

    #[test]
    fn round_trip_through_bytes() {
        let ds = tiny(3);
        let (im, lb) = encode_idx(&ds);
        assert_eq!(parse_idx(&im, &lb).unwrap(), ds);
    }

    #[test]
    fn wrong_magic_and_counts() {
        let (mut im, lb) = encode_idx(&tiny(2));
        let (_, lb3) = encode_idx(&tiny(3));
        assert!(matches!(parse_idx(&im, &lb3), Err(Error::Consistency(_))));
        im[..4].copy_from_slice(&0u32.to_be_bytes());
        assert!(matches!(parse_idx(&im, &lb), Err(Error::Format(_))));
        let (im, _) = encode_idx(&tiny(2));
        assert!(matches!(parse_idx(&im[..im.len() - 1], &lb), Err(Error::Format(_))));
        assert!(matches!(parse_idx(&lb, &im), Err(Error::Format(_))));
    }

    #[test]
    fn zero_angle_leaves_images_unchanged() {
        let ds = tiny(2);
        assert_eq!(rotate_each(&ds, &[0.0, 0.0]), ds);
    }

    #[test]
    fn padding_and_area_shrinking() {
        let img: Vec<f64> = (1..=16).map(f64::from).collect();
        let padded = resize(&img, 4, 4, 6).unwrap();
        assert_eq!((padded[0], padded[7], padded[14], padded[35]), (0.0, 1.0, 6.0, 0.0));
        let half = resize(&img, 4, 4, 2).unwrap();
        assert_eq!(half, vec![3.5, 5.5, 11.5, 13.5]);
        let ones = area_downsample(&[1.0; 49], 7, 4);
        assert!(ones.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(resize(&img, 4, 4, 5).is_err());
    }
}
