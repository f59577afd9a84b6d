//! PNG conversion for images and label maps.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use image::{GrayImage, Luma, Rgb, RgbImage};

use dpseg::decoder::LabelMap;
use dpseg::harness::scene::class_color;
use dpseg::harness::SyntheticScene;
use dpseg::Tensor;

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

/// `(H, W, 3)` tensor in `[0, 1]`.
pub fn read_rgb(path: &Path) -> anyhow::Result<Tensor> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect();
    Ok(Tensor::from_vec(&[h as usize, w as usize, 3], data)?)
}

pub fn write_rgb(path: &Path, t: &Tensor) -> anyhow::Result<()> {
    let [h, w, 3] = *t.shape() else {
        bail!("expected an (H, W, 3) image, got {:?}", t.shape());
    };
    let bytes = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let img = RgbImage::from_raw(w as u32, h as u32, bytes).context("image buffer size")?;
    ensure_parent(path)?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Label map rendered in class colours, for viewing.
pub fn write_labels(path: &Path, labels: &LabelMap) -> anyhow::Result<()> {
    let img = RgbImage::from_fn(labels.width as u32, labels.height as u32, |x, y| {
        let c = class_color(labels.get(y as usize, x as usize));
        Rgb(c.map(|v| (v * 255.0).round() as u8))
    });
    ensure_parent(path)?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Label map with the class index as the grey value.
pub fn write_label_indices(path: &Path, labels: &LabelMap) -> anyhow::Result<()> {
    if labels.labels.iter().any(|&l| l > 255) {
        bail!("label indices above 255 do not fit an 8-bit PNG");
    }
    let img = GrayImage::from_fn(labels.width as u32, labels.height as u32, |x, y| {
        Luma([labels.get(y as usize, x as usize) as u8])
    });
    ensure_parent(path)?;
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

pub fn read_label_indices(path: &Path) -> anyhow::Result<LabelMap> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?.to_luma8();
    let (w, h) = img.dimensions();
    let labels = img.into_raw().into_iter().map(usize::from).collect();
    Ok(LabelMap::new(h as usize, w as usize, labels)?)
}

/// Scenes from `NNNN.png` / `NNNN_labels.png` pairs, in name order.
pub fn read_dataset(dir: &Path) -> anyhow::Result<Vec<SyntheticScene>> {
    let mut images: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension().is_some_and(|x| x == "png")
                && p.file_stem().and_then(|s| s.to_str()).is_some_and(|s| !s.ends_with("_labels"))
        })
        .collect();
    images.sort();
    if images.is_empty() {
        bail!("no images in {}", dir.display());
    }
    images
        .into_iter()
        .map(|p| {
            let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let labels = read_label_indices(&p.with_file_name(format!("{stem}_labels.png")))?;
            let image = read_rgb(&p)?;
            if image.shape()[..2] != [labels.height, labels.width] {
                bail!("{} and its labels differ in size", p.display());
            }
            Ok(SyntheticScene {
                image,
                labels,
                meta: Vec::new(),
            })
        })
        .collect()
}
