//! IDX (MNIST / FashionMNIST) reader and writer.
//!
//! Big-endian header: a 4-byte magic (`0x00000803` for u8 images with three
//! dimensions, `0x00000801` for u8 labels) followed by one u32 per dimension,
//! then the raw unsigned bytes.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

struct Cursor<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: offset as u64,
            msg: msg.into(),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let end = self.pos + 4;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.err(self.pos, "truncated header"))?;
        self.pos = end;
        Ok(u32::from_be_bytes(slice.try_into().expect("4 bytes")))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| self.err(self.pos, "size overflow"))?;
        if end > self.bytes.len() {
            return Err(self.err(
                self.bytes.len(),
                format!("truncated payload: expected {n} bytes from offset {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn expect_magic(&mut self, expected: u32) -> Result<()> {
        let magic = self.u32()?;
        if magic != expected {
            return Err(self.err(0, format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}")));
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parsed image file: `(count, rows, cols, pixels)`.
fn parse_images(path: &Path, bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut c = Cursor { path, bytes, pos: 0 };
    c.expect_magic(IMAGES_MAGIC)?;
    let n = c.u32()? as usize;
    let rows = c.u32()? as usize;
    let cols = c.u32()? as usize;
    if n == 0 || rows == 0 || cols == 0 {
        return Err(c.err(4, "zero-sized dimension"));
    }
    let pixels = c.take(n * rows * cols)?.to_vec();
    Ok((n, rows, cols, pixels))
}

fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let mut c = Cursor { path, bytes, pos: 0 };
    c.expect_magic(LABELS_MAGIC)?;
    let n = c.u32()? as usize;
    Ok(c.take(n)?.to_vec())
}

/// Loads an image/label IDX pair; pixels are scaled to `[0, 1]`.
pub fn load_idx<T: Scalar>(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset<T>> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    let (n, rows, cols, pixels) = parse_images(images_path, &read(images_path)?)?;
    let labels = parse_labels(labels_path, &read(labels_path)?)?;
    if labels.len() != n {
        return Err(Error::Format {
            path: labels_path.to_path_buf(),
            offset: 4,
            msg: format!("{} labels but {n} images", labels.len()),
        });
    }
    let scale = T::lit(255.0);
    let data = pixels.into_iter().map(|p| T::from_u8(p).expect("u8 fits") / scale).collect();
    let inputs = Tensor::new(vec![n, rows * cols], data)?;
    let labels: Vec<usize> = labels.into_iter().map(usize::from).collect();
    let num_classes = labels.iter().max().map_or(1, |&m| m + 1);
    let name = images_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "idx".into());
    Dataset::new(inputs, labels, num_classes, name)
}

/// Writes `dataset` as an IDX pair with images of `rows × cols` pixels.
/// Inputs must lie in `[0, 1]`; they are quantised to `round(255·v)`.
pub fn write_idx<T: Scalar>(
    dataset: &Dataset<T>,
    rows: usize,
    cols: usize,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    if rows * cols != dataset.dim() {
        return Err(Error::Shape(format!("{rows}x{cols} images for {}-dim inputs", dataset.dim())));
    }
    if let Some(&bad) = dataset.labels.iter().find(|&&y| y > 255) {
        return Err(Error::Input(format!("label {bad} does not fit in a byte")));
    }
    let n = dataset.len();
    let mut img = Vec::with_capacity(16 + n * rows * cols);
    img.extend_from_slice(&IMAGES_MAGIC.to_be_bytes());
    for d in [n, rows, cols] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    for &v in dataset.inputs.data() {
        let v = v.as_f64();
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::Input(format!("pixel value {v} outside [0,1]")));
        }
        img.push((v * 255.0).round() as u8);
    }
    let mut lab = Vec::with_capacity(8 + n);
    lab.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(n as u32).to_be_bytes());
    lab.extend(dataset.labels.iter().map(|&y| y as u8));
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();
    fs::write(images_path, img).map_err(|e| Error::io(images_path, e))?;
    fs::write(labels_path, lab).map_err(|e| Error::io(labels_path, e))?;
    Ok(())
}
