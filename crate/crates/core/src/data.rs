//! IDX image and label files, binarized at load time.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[n, rows * cols]` with entries in `{0, 1}`.
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub rows: usize,
    pub cols: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, offset: usize, message: impl Into<String>) -> Error {
        Error::Format {
            offset,
            message: format!("{}: {}", self.path.display(), message.into()),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let end = self.pos + 4;
        let b = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| self.fail(self.bytes.len(), format!("truncated header, missing {what}")))?;
        self.pos = end;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: u32) -> Result<()> {
        let m = self.u32("magic number")?;
        if m != expected {
            return Err(self.fail(0, format!("bad magic 0x{m:08x}, expected 0x{expected:08x}")));
        }
        Ok(())
    }

    fn body(&self, count: usize, item: usize) -> Result<&[u8]> {
        let need = count * item;
        let have = self.bytes.len() - self.pos;
        if have < need {
            return Err(self.fail(
                self.bytes.len(),
                format!("truncated body, {need} bytes declared but {have} present"),
            ));
        }
        Ok(&self.bytes[self.pos..self.pos + need])
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let bytes = read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    r.magic(IMAGE_MAGIC)?;
    let count = r.u32("image count")? as usize;
    let rows = r.u32("row count")? as usize;
    let cols = r.u32("column count")? as usize;
    let pixels = r.body(count, rows * cols)?.to_vec();
    Ok((count, rows, cols, pixels))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    r.magic(LABEL_MAGIC)?;
    let count = r.u32("label count")? as usize;
    Ok(r.body(count, 1)?.to_vec())
}

/// First `n` images of an IDX file, each pixel set to 1 with probability
/// `intensity / 255` using a generator seeded by `binarize_seed`.
pub fn load_mnist_idx(
    images: &Path,
    labels: Option<&Path>,
    n: usize,
    binarize_seed: u64,
) -> Result<Dataset> {
    let (count, rows, cols, pixels) = read_idx_images(images)?;
    if n > count {
        return Err(Error::config(format!(
            "requested {n} images but {} holds {count}",
            images.display()
        )));
    }
    let size = rows * cols;
    let mut rng = ChaCha8Rng::seed_from_u64(binarize_seed);
    let data = pixels[..n * size]
        .iter()
        .map(|&p| if rng.random::<f64>() * 255.0 < p as f64 { 1.0 } else { 0.0 })
        .collect();
    let labels = match labels {
        Some(path) => {
            let l = read_idx_labels(path)?;
            if l.len() != count {
                return Err(Error::Format {
                    offset: 4,
                    message: format!("{}: {} labels for {count} images", path.display(), l.len()),
                });
            }
            Some(l[..n].to_vec())
        }
        None => None,
    };
    Ok(Dataset {
        images: Tensor::matrix(n, size, data)?,
        labels,
        rows,
        cols,
    })
}

/// Serializes images in IDX format.
pub fn encode_idx_images(rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let count = pixels.len() / (rows * cols).max(1);
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGE_MAGIC, count as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, bytes).unwrap();
        p
    }

    #[test]
    fn parses_header_and_binarizes_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let pixels: Vec<u8> = (0..3 * 784).map(|i| (i % 256) as u8).collect();
        let p = write(dir.path(), "img", &encode_idx_images(28, 28, &pixels));
        let mut labels = vec![0, 0, 8, 1, 0, 0, 0, 3];
        labels.extend([7, 2, 9]);
        let l = write(dir.path(), "lbl", &labels);
        let a = load_mnist_idx(&p, Some(&l), 2, 5).unwrap();
        assert_eq!((a.rows, a.cols, a.len()), (28, 28, 2));
        assert_eq!(a.labels, Some(vec![7, 2]));
        assert!(a.images.data().iter().all(|&v| v == 0.0 || v == 1.0));
        // Intensity 0 never fires, 255 always does.
        assert_eq!(a.images.data()[0], 0.0);
        assert_eq!(a.images.data()[255], 1.0);
        assert_eq!(a, load_mnist_idx(&p, Some(&l), 2, 5).unwrap());
        assert_ne!(a.images, load_mnist_idx(&p, None, 2, 6).unwrap().images);
        assert!(load_mnist_idx(&p, None, 0, 5).unwrap().is_empty());
        assert!(matches!(load_mnist_idx(&p, None, 4, 5), Err(Error::Config(_))));
    }

    #[test]
    fn malformed_files_report_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let mut bad_magic = encode_idx_images(2, 2, &[0; 4]);
        bad_magic[3] = 0x01;
        let p = write(dir.path(), "a", &bad_magic);
        assert!(matches!(read_idx_images(&p), Err(Error::Format { offset: 0, .. })));

        let p = write(dir.path(), "b", &[0, 0, 8, 3, 0, 0]);
        assert!(matches!(read_idx_images(&p), Err(Error::Format { offset: 6, .. })));

        let mut short = encode_idx_images(2, 2, &[0; 8]);
        short.truncate(20);
        let p = write(dir.path(), "c", &short);
        match read_idx_images(&p) {
            Err(e @ Error::Format { offset: 20, .. }) => assert_eq!(e.exit_code(), 3),
            other => panic!("{other:?}"),
        }
    }
}
