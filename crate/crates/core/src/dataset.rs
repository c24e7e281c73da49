//! Image directories: flat folders of PPM/RAWF32 files or the GTSRB layout,
//! where each class lives in a zero-padded numeric subdirectory (`00012/`).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::load_image;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// Path relative to the dataset root, without extension, `/`-separated.
    pub id: String,
    /// Parsed from a numeric parent directory when present.
    pub class: Option<usize>,
    pub image: Tensor,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm" | "rawf32" | "rwf")
    )
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, out)?;
        } else if is_image(&path) {
            out.push(path);
        }
    }
    Ok(())
}

/// Bilinear resize of an `H x W x C` image (pixel centres aligned).
pub fn resize_bilinear(img: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (h, w, c) = img
        .hwc()
        .filter(|_| img.rank() == 3)
        .ok_or_else(|| Error::Image(format!("expected an H x W x C image, got {:?}", img.shape())))?;
    if (h, w) == (height, width) {
        return Ok(img.clone());
    }
    if height == 0 || width == 0 {
        return Err(Error::Image("target size must be positive".into()));
    }
    let src = img.data();
    let sample = |len: usize, out: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * len as f64 / out as f64 - 0.5).clamp(0.0, (len - 1) as f64);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(len - 1), pos - lo as f64)
    };
    let mut data = Vec::with_capacity(height * width * c);
    for r in 0..height {
        let (r0, r1, fr) = sample(h, height, r);
        for col in 0..width {
            let (c0, c1, fc) = sample(w, width, col);
            for ch in 0..c {
                let at = |rr: usize, cc: usize| src[(rr * w + cc) * c + ch];
                let top = at(r0, c0) * (1.0 - fc) + at(r0, c1) * fc;
                let bottom = at(r1, c0) * (1.0 - fc) + at(r1, c1) * fc;
                data.push(top * (1.0 - fr) + bottom * fr);
            }
        }
    }
    Tensor::new(vec![height, width, c], data)
}

/// Loads every image below `root`, sorted by id, resized to `side x side`.
pub fn load_image_dir(root: impl AsRef<Path>, side: usize) -> Result<Vec<LabeledImage>> {
    let root = root.as_ref();
    let mut paths = Vec::new();
    collect(root, &mut paths)?;
    let mut images = paths
        .into_iter()
        .map(|path| {
            let rel = path.strip_prefix(root).unwrap_or(&path).with_extension("");
            let id = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy())
                .collect::<Vec<_>>()
                .join("/");
            let class = rel
                .parent()
                .and_then(|p| p.file_name())
                .and_then(|n| n.to_str())
                .and_then(|n| n.parse().ok());
            let image = resize_bilinear(&load_image(&path)?, side, side)?;
            Ok(LabeledImage { id, class, image })
        })
        .collect::<Result<Vec<_>>>()?;
    images.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(images)
}
