use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;

use crate::error::{invalid, Error, Result};

/// Environment variable naming the default dataset root.
pub const DATA_DIR_ENV: &str = "CAPSOSR_DATA_DIR";

/// `$CAPSOSR_DATA_DIR`, or `./data` when unset.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}

/// A labelled image collection with pixels in `[0, 1]`, stored row-major as `[n, c, h, w]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        let size = channels * height * width;
        if size == 0 || pixels.len() != size * labels.len() {
            return Err(invalid!(
                "{} pixels for {} images of shape {channels}x{height}x{width}",
                pixels.len(),
                labels.len()
            ));
        }
        Ok(ImageSet {
            channels,
            height,
            width,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let s = self.image_size();
        &self.pixels[i * s..(i + 1) * s]
    }

    pub fn subset(&self, indices: &[usize]) -> ImageSet {
        let mut pixels = Vec::with_capacity(indices.len() * self.image_size());
        for &i in indices {
            pixels.extend_from_slice(self.image(i));
        }
        ImageSet {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Samples whose label is in `classes`, relabelled to their position in `classes`.
    pub fn select_classes(&self, classes: &[usize]) -> ImageSet {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| classes.contains(&self.labels[i]))
            .collect();
        let mut out = self.subset(&idx);
        for l in out.labels.iter_mut() {
            *l = classes.iter().position(|c| c == l).expect("filtered above");
        }
        out
    }

    pub fn with_labels(mut self, label: usize) -> ImageSet {
        self.labels.iter_mut().for_each(|l| *l = label);
        self
    }

    pub fn concat(&self, other: &ImageSet) -> Result<ImageSet> {
        if self.shape() != other.shape() {
            return Err(invalid!("cannot concatenate {:?} and {:?} images", self.shape(), other.shape()));
        }
        let mut out = self.clone();
        out.pixels.extend_from_slice(&other.pixels);
        out.labels.extend_from_slice(&other.labels);
        Ok(out)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn parse_idx(path: &Path, bytes: &[u8], rank: usize) -> Result<(Vec<usize>, usize)> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(format_err(path, "missing IDX magic"));
    }
    if bytes[2] != 0x08 {
        return Err(format_err(path, format!("unsupported IDX element type {:#04x}", bytes[2])));
    }
    if bytes[3] as usize != rank {
        return Err(format_err(path, format!("expected rank {rank}, found {}", bytes[3])));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(format_err(path, "truncated IDX header"));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expected: usize = dims.iter().product();
    if bytes.len() - header != expected {
        return Err(format_err(
            path,
            format!("{} payload bytes, header promises {expected}", bytes.len() - header),
        ));
    }
    Ok((dims, header))
}

/// Reads an IDX3 ubyte image file (optionally gzipped) into `[0, 1]` pixels.
/// Returns `(n, height, width, pixels)`.
pub fn read_idx_images(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let bytes = read_maybe_gz(path)?;
    let (dims, header) = parse_idx(path, &bytes, 3)?;
    let pixels = bytes[header..].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((dims[0], dims[1], dims[2], pixels))
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let bytes = read_maybe_gz(path)?;
    let (_, header) = parse_idx(path, &bytes, 1)?;
    Ok(bytes[header..].iter().map(|&b| b as usize).collect())
}

fn first_existing(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [stem.to_string(), format!("{stem}.gz")] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    Err(Error::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "IDX file not found (plain or .gz)"),
    ))
}

/// Loads the MNIST train or test split from `dir` using the standard IDX file names.
pub fn load_mnist(dir: &Path, train: bool) -> Result<ImageSet> {
    let prefix = if train { "train" } else { "t10k" };
    let img_path = first_existing(dir, &format!("{prefix}-images-idx3-ubyte"))?;
    let lbl_path = first_existing(dir, &format!("{prefix}-labels-idx1-ubyte"))?;
    let (n, h, w, pixels) = read_idx_images(&img_path)?;
    let labels = read_idx_labels(&lbl_path)?;
    if labels.len() != n {
        return Err(format_err(&lbl_path, format!("{} labels for {n} images", labels.len())));
    }
    ImageSet::new(1, h, w, pixels, labels)
}

/// Loads `root/<class>/<image>` with classes numbered in sorted directory-name order.
///
/// Every image must decode to `height x width`; `channels` is 1 (luma) or 3 (RGB).
pub fn load_image_folder(root: &Path, channels: usize, height: usize, width: usize) -> Result<(ImageSet, Vec<String>)> {
    if channels != 1 && channels != 3 {
        return Err(invalid!("channels must be 1 or 3, got {channels}"));
    }
    let mut class_dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    let names: Vec<String> = class_dirs
        .iter()
        .map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned())
        .collect();
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for (label, dir) in class_dirs.iter().enumerate() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let img = image::open(&file).map_err(|e| format_err(&file, e.to_string()))?;
            if img.width() as usize != width || img.height() as usize != height {
                return Err(format_err(
                    &file,
                    format!("image is {}x{}, expected {width}x{height}", img.width(), img.height()),
                ));
            }
            if channels == 1 {
                pixels.extend(img.to_luma8().as_raw().iter().map(|&b| b as f32 / 255.0));
            } else {
                let rgb = img.to_rgb8();
                let raw = rgb.as_raw();
                for c in 0..3 {
                    pixels.extend(raw.iter().skip(c).step_by(3).map(|&b| b as f32 / 255.0));
                }
            }
            labels.push(label);
        }
    }
    Ok((ImageSet::new(channels, height, width, pixels, labels)?, names))
}
