//! The `root/{split}/{A,B,label}/name.png` layout.

use std::path::{Path, PathBuf};

pub use image::{GrayImage, RgbImage};
use image::{ImageBuffer, Rgb};
use mfds_core::sample::SamplePair;
use mfds_core::Tensor;

use crate::error::{DataError, Result};

pub const DIRS: [&str; 3] = ["A", "B", "label"];
/// 8-bit label values at or above this are "changed".
pub const LABEL_THRESHOLD: u8 = 128;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn split_dir(root: &Path, split: &str) -> PathBuf {
    if split.is_empty() {
        root.to_path_buf()
    } else {
        root.join(split)
    }
}

fn list_pngs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if entry.path().is_file() && name.to_ascii_lowercase().ends_with(".png") {
            names.push(name);
        }
    }
    names.sort();
    Ok(names)
}

/// Lazily loaded triples in a fixed order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub names: Vec<String>,
}

/// Indexes `root/split`; every file in `A/`, `B/` or `label/` must have
/// counterparts in the other two. Order is lexicographic by file name.
pub fn load_dataset(root: &Path, split: &str) -> Result<Dataset> {
    let dir = split_dir(root, split);
    let lists = DIRS
        .iter()
        .map(|d| list_pngs(&dir.join(d)))
        .collect::<Result<Vec<_>>>()?;
    for (i, list) in lists.iter().enumerate() {
        for name in list {
            for (j, other) in lists.iter().enumerate() {
                if i != j && other.binary_search(name).is_err() {
                    return Err(DataError::Orphan {
                        orphan: dir.join(DIRS[i]).join(name),
                        missing_dir: dir.join(DIRS[j]),
                    });
                }
            }
        }
    }
    Ok(Dataset { dir, names: lists.into_iter().next().unwrap_or_default() })
}

/// Reads a manifest of file names, one per line; blank lines and `#`
/// comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<String>> {
    Ok(std::fs::read_to_string(path)
        .map_err(io_err(path))?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// A dataset restricted to an explicit list of file names, in list order.
pub fn load_with_manifest(root: &Path, split: &str, names: Vec<String>) -> Result<Dataset> {
    let dir = split_dir(root, split);
    for name in &names {
        for d in DIRS {
            let p = dir.join(d).join(name);
            if !p.is_file() {
                return Err(DataError::Orphan { orphan: PathBuf::from(name), missing_dir: dir.join(d) });
            }
        }
    }
    Ok(Dataset { dir, names })
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    image::open(path).map_err(|source| DataError::Image { file: path.to_path_buf(), source })
}

pub fn read_rgb(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn([1, 3, h as usize, w as usize], |[_, c, y, x]| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

pub fn read_label(path: &Path) -> Result<Tensor<f32>> {
    let img = open(path)?.to_luma8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn([1, 1, h as usize, w as usize], |[_, _, y, x]| {
        if img.get_pixel(x as u32, y as u32)[0] >= LABEL_THRESHOLD { 1.0 } else { 0.0 }
    }))
}

fn dims(t: &Tensor<f32>) -> (u32, u32) {
    (t.width() as u32, t.height() as u32)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        let n = &self.names[i];
        n.rsplit_once('.').map_or(n.as_str(), |(stem, _)| stem)
    }

    pub fn get(&self, i: usize) -> Result<SamplePair> {
        let name = &self.names[i];
        let pa = self.dir.join(DIRS[0]).join(name);
        let a = read_rgb(&pa)?;
        let expected = dims(&a);
        let pb = self.dir.join(DIRS[1]).join(name);
        let b = read_rgb(&pb)?;
        if dims(&b) != expected {
            return Err(DataError::SizeMismatch { file: pb, expected, got: dims(&b) });
        }
        let pl = self.dir.join(DIRS[2]).join(name);
        let gt = read_label(&pl)?;
        if dims(&gt) != expected {
            return Err(DataError::SizeMismatch { file: pl, expected, got: dims(&gt) });
        }
        Ok(SamplePair::new(self.id(i), a, b, gt)?)
    }

    pub fn iter(&self) -> impl Iterator<Item = Result<SamplePair>> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    pub fn load_all(&self) -> Result<Vec<SamplePair>> {
        self.iter().collect()
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// First batch element of a `[B, 3, H, W]` tensor in `[0, 1]` as 8-bit RGB.
pub fn rgb_image(t: &Tensor<f32>) -> RgbImage {
    ImageBuffer::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        Rgb(std::array::from_fn(|c| quantize(t.at(0, c, y as usize, x as usize))))
    })
}

/// First batch element of a binary `[B, 1, H, W]` mask as 0/255.
pub fn mask_image(t: &Tensor<f32>) -> GrayImage {
    ImageBuffer::from_fn(t.width() as u32, t.height() as u32, |x, y| {
        image::Luma([if t.at(0, 0, y as usize, x as usize) >= 0.5 { 255 } else { 0 }])
    })
}

pub fn save_png<P, C>(path: &Path, img: &ImageBuffer<P, C>) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    img.save(path).map_err(|source| DataError::Image { file: path.to_path_buf(), source })
}

/// Writes every sample as `dir/{A,B,label}/{id}.png`.
pub fn write_dataset(root: &Path, split: &str, samples: &[SamplePair]) -> Result<()> {
    let dir = split_dir(root, split);
    for d in DIRS {
        let p = dir.join(d);
        std::fs::create_dir_all(&p).map_err(io_err(&p))?;
    }
    for s in samples {
        let file = format!("{}.png", s.id);
        save_png(&dir.join("A").join(&file), &rgb_image(&s.image_a))?;
        save_png(&dir.join("B").join(&file), &rgb_image(&s.image_b))?;
        save_png(&dir.join("label").join(&file), &mask_image(&s.gt))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantize_round_trips_8bit_values() {
        for v in 0..=255u8 {
            assert_eq!(quantize(v as f32 / 255.0), v);
        }
    }
}
