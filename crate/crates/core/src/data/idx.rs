use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::Array2;

use crate::error::{Error, Result};

const IMAGE_MAGIC: u32 = 0x0000_0803;
const LABEL_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Images scaled to `[0, 1]` and flattened row-major, with their labels.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Array2<f32>,
    pub labels: Vec<u8>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Array2<f32>, labels: Vec<u8>, split: Split) -> Result<Self> {
        if images.nrows() != labels.len() {
            return Err(Error::Integrity(format!(
                "{} images but {} labels",
                images.nrows(),
                labels.len()
            )));
        }
        Ok(Dataset { images, labels, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            split: self.split,
        }
    }

    pub fn label_histogram(&self) -> [usize; 10] {
        let mut h = [0usize; 10];
        for &l in &self.labels {
            h[l as usize % 10] += 1;
        }
        h
    }
}

/// Opens `path`, or `path.gz` when only the compressed file exists.
fn open_maybe_gz(path: &Path) -> Result<(PathBuf, Box<dyn Read>)> {
    if path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let is_gz = path.extension().is_some_and(|e| e == "gz");
        let r: Box<dyn Read> = if is_gz {
            Box::new(GzDecoder::new(BufReader::new(f)))
        } else {
            Box::new(BufReader::new(f))
        };
        return Ok((path.to_path_buf(), r));
    }
    let mut gz = path.as_os_str().to_owned();
    gz.push(".gz");
    let gz = PathBuf::from(gz);
    match File::open(&gz) {
        Ok(f) => Ok((gz, Box::new(GzDecoder::new(BufReader::new(f))))),
        Err(_) => Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file (nor .gz)"),
        )),
    }
}

fn read_u32(r: &mut dyn Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_be_bytes(b))
}

fn read_payload(r: &mut dyn Read, path: &Path, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

/// Reads an IDX3 image file. Returns `(count, rows, cols, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let (path, mut r) = open_maybe_gz(path)?;
    let magic = read_u32(&mut r, &path)?;
    if magic != IMAGE_MAGIC {
        return Err(Error::format(
            &path,
            format!("bad image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(&mut r, &path)? as usize;
    let rows = read_u32(&mut r, &path)? as usize;
    let cols = read_u32(&mut r, &path)? as usize;
    let pixels = read_payload(&mut r, &path, n * rows * cols)?;
    Ok((n, rows, cols, pixels))
}

/// Reads an IDX1 label file.
pub fn read_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let (path, mut r) = open_maybe_gz(path)?;
    let magic = read_u32(&mut r, &path)?;
    if magic != LABEL_MAGIC {
        return Err(Error::format(
            &path,
            format!("bad label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"),
        ));
    }
    let n = read_u32(&mut r, &path)? as usize;
    read_payload(&mut r, &path, n)
}

/// Loads one split from a directory holding the standard MNIST file names
/// (`train-images-idx3-ubyte`, `t10k-labels-idx1-ubyte`, ... optionally `.gz`).
pub fn load_split(dir: &Path, split: Split) -> Result<Dataset> {
    let img_path = dir.join(format!("{}-images-idx3-ubyte", split.prefix()));
    let lbl_path = dir.join(format!("{}-labels-idx1-ubyte", split.prefix()));
    let (n, rows, cols, pixels) = read_idx_images(&img_path)?;
    let labels = read_idx_labels(&lbl_path)?;
    if labels.len() != n {
        return Err(Error::Integrity(format!(
            "{} holds {n} images but {} holds {} labels",
            img_path.display(),
            lbl_path.display(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 9) {
        return Err(Error::format(&lbl_path, format!("label {bad} out of range")));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Array2::from_shape_vec((n, rows * cols), data).expect("pixel count");
    Dataset::new(images, labels, split)
}

/// Loads `(train, test)`.
pub fn load_mnist(dir: &Path) -> Result<(Dataset, Dataset)> {
    Ok((load_split(dir, Split::Train)?, load_split(dir, Split::Test)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn idx_images(n: u32, fill: u8) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IMAGE_MAGIC, n, 28, 28] {
            b.extend(v.to_be_bytes());
        }
        b.extend(std::iter::repeat_n(fill, (n * 784) as usize));
        b
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend(LABEL_MAGIC.to_be_bytes());
        b.extend((labels.len() as u32).to_be_bytes());
        b.extend(labels);
        b
    }

    #[test]
    fn saturated_image_scales_to_one() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), idx_images(1, 255)).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[7])).unwrap();
        let ds = load_split(dir.path(), Split::Test).unwrap();
        assert_eq!(ds.len(), 1);
        assert!(ds.images.iter().all(|&v| v == 1.0));
        assert_eq!(ds.labels, vec![7]);
    }

    #[test]
    fn gzip_files_are_read() {
        let dir = tempfile::tempdir().unwrap();
        let gz = |name: &str, bytes: Vec<u8>| {
            let f = File::create(dir.path().join(name)).unwrap();
            let mut e = flate2::write::GzEncoder::new(f, flate2::Compression::fast());
            e.write_all(&bytes).unwrap();
            e.finish().unwrap();
        };
        gz("train-images-idx3-ubyte.gz", idx_images(2, 51));
        gz("train-labels-idx1-ubyte.gz", idx_labels(&[0, 3]));
        let ds = load_split(dir.path(), Split::Train).unwrap();
        assert_eq!(ds.len(), 2);
        assert!(ds.images.iter().all(|&v| (v - 0.2).abs() < 1e-7));
    }

    #[test]
    fn bad_magic_names_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = idx_images(1, 0);
        bytes[3] = 0x99;
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), bytes).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[1])).unwrap();
        let err = load_split(dir.path(), Split::Test).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        assert!(err.to_string().contains("t10k-images-idx3-ubyte"));
    }

    #[test]
    fn truncated_file_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut bytes = idx_images(2, 0);
        bytes.truncate(bytes.len() - 10);
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), bytes).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[1, 2])).unwrap();
        assert!(matches!(load_split(dir.path(), Split::Test), Err(Error::Io { .. })));
    }

    #[test]
    fn count_mismatch_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t10k-images-idx3-ubyte"), idx_images(2, 0)).unwrap();
        std::fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&[1])).unwrap();
        assert!(matches!(load_split(dir.path(), Split::Test), Err(Error::Integrity(_))));
    }

    #[test]
    fn missing_directory_is_io_error_naming_path() {
        let err = load_split(Path::new("/definitely/not/here"), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
        assert!(err.to_string().contains("/definitely/not/here"));
    }
}
