//! Two-pass inference: segment with the initial prompts, crop every detected
//! category out of the image using its predicted mask, re-embed the crops as
//! scene-specific visual prompts, and segment again.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::decoder::{LabelMap, SegmentationResult};
use crate::error::{Error, Result};
use crate::kernels::bilinear_resize;
use crate::promptbank::PromptEmbeddings;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackgroundFill {
    #[default]
    Zero,
    /// Mean colour of the whole image.
    Mean,
}

impl FromStr for BackgroundFill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "mean" => Ok(Self::Mean),
            _ => Err(Error::InvalidConfig(format!("unknown background fill {s:?}"))),
        }
    }
}

impl fmt::Display for BackgroundFill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Zero => "zero",
            Self::Mean => "mean",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefinementConfig {
    /// Minimum fraction of argmax pixels for a category to count as detected.
    pub detection_threshold: f64,
    /// Bounding-box growth on each side, as a fraction of the box's size.
    pub crop_padding: f64,
    pub prompt_resolution: usize,
    pub background_fill: BackgroundFill,
    /// One crop per 4-connected component instead of one per category.
    pub per_component: bool,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            detection_threshold: 0.005,
            crop_padding: 0.0,
            prompt_resolution: 768,
            background_fill: BackgroundFill::Zero,
            per_component: false,
        }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.detection_threshold > 0.0 && self.detection_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "detection threshold {} must lie in (0, 1)",
                self.detection_threshold
            )));
        }
        if !(self.crop_padding >= 0.0 && self.crop_padding.is_finite()) {
            return Err(Error::InvalidConfig("crop padding must be finite and non-negative".into()));
        }
        if self.prompt_resolution == 0 {
            return Err(Error::InvalidConfig("prompt resolution must be positive".into()));
        }
        Ok(())
    }
}

/// Inclusive pixel box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub top: usize,
    pub left: usize,
    pub bottom: usize,
    pub right: usize,
}

impl BBox {
    pub fn height(&self) -> usize {
        self.bottom - self.top + 1
    }

    pub fn width(&self) -> usize {
        self.right - self.left + 1
    }

    fn of(pixels: &[(usize, usize)]) -> Option<Self> {
        let (&(y0, x0), rest) = pixels.split_first()?;
        let mut b = BBox {
            top: y0,
            left: x0,
            bottom: y0,
            right: x0,
        };
        for &(y, x) in rest {
            b.top = b.top.min(y);
            b.left = b.left.min(x);
            b.bottom = b.bottom.max(y);
            b.right = b.right.max(x);
        }
        Some(b)
    }

    /// Grow by `fraction` of the box size on every side, clipped to `h × w`.
    pub fn padded(&self, fraction: f64, h: usize, w: usize) -> Self {
        let py = (fraction * self.height() as f64).round() as usize;
        let px = (fraction * self.width() as f64).round() as usize;
        BBox {
            top: self.top.saturating_sub(py),
            left: self.left.saturating_sub(px),
            bottom: (self.bottom + py).min(h - 1),
            right: (self.right + px).min(w - 1),
        }
    }
}

/// Pixels labelled `k`, in raster order.
pub fn mask_pixels(labels: &LabelMap, k: usize) -> Vec<(usize, usize)> {
    (0..labels.height)
        .flat_map(|y| (0..labels.width).map(move |x| (y, x)))
        .filter(|&(y, x)| labels.get(y, x) == k)
        .collect()
}

pub fn mask_bbox(labels: &LabelMap, k: usize) -> Option<BBox> {
    BBox::of(&mask_pixels(labels, k))
}

/// 4-connected components of the `k` mask, ordered by their first pixel in
/// raster order.
pub fn connected_components(labels: &LabelMap, k: usize) -> Vec<Vec<(usize, usize)>> {
    let (h, w) = (labels.height, labels.width);
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    for start in 0..h * w {
        if seen[start] || labels.labels[start] != k {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut comp = Vec::new();
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            comp.push((y, x));
            let mut visit = |j: usize| {
                if !seen[j] && labels.labels[j] == k {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryCrop {
    pub category: usize,
    /// Padded box the crop was cut from.
    pub bbox: BBox,
    /// `(R, R, 3)`.
    pub image: Tensor,
}

fn check_rgb(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 3] => Ok((h, w)),
        _ => Err(Error::Dimension(format!("image must be (H, W, 3), got {:?}", image.shape()))),
    }
}

fn cut(image: &Tensor, mask: &[bool], bbox: BBox, fill: [f64; 3], resolution: usize) -> Result<Tensor> {
    let w = image.shape()[1];
    let side = bbox.height().max(bbox.width());
    let (oy, ox) = ((side - bbox.height()) / 2, (side - bbox.width()) / 2);
    let mut square = Tensor::zeros(&[side, side, 1, 3]);
    for (i, px) in square.data_mut().chunks_exact_mut(3).enumerate() {
        px.copy_from_slice(&fill);
        let (sy, sx) = (i / side, i % side);
        if sy < oy || sx < ox || sy - oy >= bbox.height() || sx - ox >= bbox.width() {
            continue;
        }
        let (y, x) = (bbox.top + sy - oy, bbox.left + sx - ox);
        if mask[y * w + x] {
            px.copy_from_slice(&image.data()[(y * w + x) * 3..(y * w + x) * 3 + 3]);
        }
    }
    bilinear_resize(&square, resolution, resolution)?.into_reshaped(&[resolution, resolution, 3])
}

/// Crops for every category the result marks as detected: the masked
/// bounding box (or each component's box), padded, background-filled,
/// centred on a square canvas and resized to `prompt_resolution`.
pub fn extract_category_crops(
    image: &Tensor,
    result: &SegmentationResult,
    cfg: &RefinementConfig,
) -> Result<BTreeMap<usize, Vec<CategoryCrop>>> {
    cfg.validate()?;
    let (h, w) = check_rgb(image)?;
    let labels = &result.labels;
    if (labels.height, labels.width) != (h, w) {
        return Err(Error::Dimension(format!(
            "labels {}x{} do not match image {h}x{w}",
            labels.height, labels.width
        )));
    }
    let fill = match cfg.background_fill {
        BackgroundFill::Zero => [0.0; 3],
        BackgroundFill::Mean => {
            let mut m = [0.0; 3];
            for px in image.data().chunks_exact(3) {
                (0..3).for_each(|c| m[c] += px[c]);
            }
            m.map(|v| v / (h * w) as f64)
        }
    };
    let mut out = BTreeMap::new();
    for (k, _) in result.detected.iter().enumerate().filter(|(_, &d)| d) {
        let parts = if cfg.per_component {
            connected_components(labels, k)
        } else {
            vec![mask_pixels(labels, k)]
        };
        if parts.first().is_none_or(|p| p.is_empty()) {
            return Err(Error::Consistency(format!("category {k} is detected but has an empty mask")));
        }
        let mut crops = Vec::with_capacity(parts.len());
        for pixels in parts {
            let mut mask = vec![false; h * w];
            pixels.iter().for_each(|&(y, x)| mask[y * w + x] = true);
            let bbox = BBox::of(&pixels).expect("non-empty").padded(cfg.crop_padding, h, w);
            crops.push(CategoryCrop {
                category: k,
                bbox,
                image: cut(image, &mask, bbox, fill, cfg.prompt_resolution)?,
            });
        }
        out.insert(k, crops);
    }
    Ok(out)
}

/// A prompt image's pooled embedding `(D_z)` and its maps `V_j` for
/// `j ∈ {2, 3, 4}` as `(Hp_j, Wp_j, D_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEncoding {
    pub vector: Vec<f64>,
    pub maps: BTreeMap<usize, Tensor>,
}

pub trait VisualPromptEmbedder {
    fn embed(&self, image: &Tensor) -> Result<PromptEncoding>;
}

/// Anything that maps an image and prompts to a segmentation.
pub trait Segmenter {
    fn segment(&self, image: &Tensor, prompts: &PromptEmbeddings) -> Result<SegmentationResult>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Initial,
    RefinedFromMask,
}

/// Replacement visual prompts for one category: `V[k]` as `(M, D_z)` and
/// `V_j[k]` as `(M, Hp_j, Wp_j, D_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct CategoryOverride {
    pub visual: Tensor,
    pub maps: BTreeMap<usize, Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinedPromptSet {
    pub base: PromptEmbeddings,
    pub overrides: BTreeMap<usize, CategoryOverride>,
    pub provenance: Vec<Provenance>,
}

impl RefinedPromptSet {
    /// The base prompts with every override written in. Text is untouched.
    pub fn prompts(&self) -> PromptEmbeddings {
        let mut p = self.base.clone();
        for (&k, o) in &self.overrides {
            overwrite_row(&mut p.visual, k, &o.visual);
            for (j, t) in &o.maps {
                overwrite_row(p.visual_maps.get_mut(j).expect("validated scale"), k, t);
            }
        }
        p
    }
}

fn overwrite_row(t: &mut Tensor, k: usize, row: &Tensor) {
    let n = row.len();
    t.data_mut()[k * n..(k + 1) * n].copy_from_slice(row.data());
}

fn build_override(base: &PromptEmbeddings, k: usize, encodings: &[PromptEncoding]) -> Result<CategoryOverride> {
    let (m, dz) = (base.templates(), base.embed_dim());
    let mut visual = Vec::with_capacity(m * dz);
    let mut maps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for slot in 0..m {
        let enc = &encodings[slot % encodings.len()];
        if enc.vector.len() != dz {
            return Err(Error::Dimension(format!(
                "crop embedding has {} dims, prompts have {dz}",
                enc.vector.len()
            )));
        }
        visual.extend_from_slice(&enc.vector);
        for (&j, base_maps) in &base.visual_maps {
            let t = enc
                .maps
                .get(&j)
                .ok_or_else(|| Error::Dimension(format!("crop embedding lacks scale {j}")))?;
            if t.shape() != &base_maps.shape()[2..] {
                return Err(Error::Dimension(format!(
                    "crop map V_{j} {:?} does not match prompt maps {:?}",
                    t.shape(),
                    &base_maps.shape()[2..]
                )));
            }
            maps.entry(j).or_default().extend_from_slice(t.data());
        }
    }
    let visual = Tensor::from_vec(&[m, dz], visual)?;
    if visual.data().chunks_exact(dz).any(|r| !(crate::tensor::norm(r) >= crate::costvolume::DEGENERATE_NORM)) {
        return Err(Error::DegenerateVector(format!("refined V[{k}]")));
    }
    let maps = maps
        .into_iter()
        .map(|(j, data)| {
            let s = &base.visual_maps[&j].shape()[1..];
            Ok((j, Tensor::from_vec(s, data)?))
        })
        .collect::<Result<_>>()?;
    Ok(CategoryOverride { visual, maps })
}

/// Re-embed the crops of each category and spread them over its `M` slots
/// round-robin (a single crop fills every slot). A category whose crops
/// cannot be embedded keeps its initial prompts.
pub fn refine_prompts(
    base: &PromptEmbeddings,
    crops: &BTreeMap<usize, Vec<CategoryCrop>>,
    embedder: &dyn VisualPromptEmbedder,
) -> Result<RefinedPromptSet> {
    base.validate()?;
    let k_total = base.categories();
    let mut overrides = BTreeMap::new();
    let mut provenance = vec![Provenance::Initial; k_total];
    for (&k, list) in crops {
        if k >= k_total {
            return Err(Error::InvalidInput(format!("crop for category {k} of {k_total}")));
        }
        if list.is_empty() {
            continue;
        }
        let attempt = list
            .iter()
            .map(|c| embedder.embed(&c.image))
            .collect::<Result<Vec<_>>>()
            .and_then(|encs| build_override(base, k, &encs));
        match attempt {
            Ok(o) => {
                overrides.insert(k, o);
                provenance[k] = Provenance::RefinedFromMask;
            }
            Err(e) => log::warn!("keeping initial prompts for category {k}: {e}"),
        }
    }
    Ok(RefinedPromptSet {
        base: base.clone(),
        overrides,
        provenance,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoPassResult {
    pub pass1: SegmentationResult,
    pub pass2: SegmentationResult,
    pub refined: RefinedPromptSet,
}

pub fn semantic_guided_inference(
    image: &Tensor,
    prompts: &PromptEmbeddings,
    model: &dyn Segmenter,
    embedder: &dyn VisualPromptEmbedder,
    cfg: &RefinementConfig,
) -> Result<TwoPassResult> {
    cfg.validate()?;
    let first = model.segment(image, prompts)?;
    let pass1 = SegmentationResult::from_logits(first.logits, cfg.detection_threshold)?;
    let crops = extract_category_crops(image, &pass1, cfg)?;
    let refined = refine_prompts(prompts, &crops, embedder)?;
    let second = model.segment(image, &refined.prompts())?;
    let pass2 = SegmentationResult::from_logits(second.logits, cfg.detection_threshold)?;
    Ok(TwoPassResult { pass1, pass2, refined })
}

/// Comparison of the two passes, optionally against ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementDiff {
    pub detected_pass1: Vec<usize>,
    pub detected_pass2: Vec<usize>,
    pub refined_categories: Vec<usize>,
    /// Fraction of pixels whose label changed between passes.
    pub changed_fraction: f64,
    /// Per-category IoU change (pass 2 minus pass 1) against ground truth;
    /// `None` where the category is absent from both passes and the truth.
    pub iou_delta: Option<Vec<Option<f64>>>,
    pub miou_pass1: Option<f64>,
    pub miou_pass2: Option<f64>,
}

pub fn diff_report(two: &TwoPassResult, truth: Option<&LabelMap>) -> Result<RefinementDiff> {
    let ids = |r: &SegmentationResult| r.detected.iter().enumerate().filter(|(_, &d)| d).map(|(k, _)| k).collect();
    let a = &two.pass1.labels.labels;
    let b = &two.pass2.labels.labels;
    let changed = a.iter().zip(b).filter(|(x, y)| x != y).count() as f64 / a.len().max(1) as f64;
    let (iou_delta, m1, m2) = match truth {
        Some(gt) => {
            let k = two.pass1.categories();
            let r1 = crate::harness::compute_miou(&two.pass1.labels, gt, k)?;
            let r2 = crate::harness::compute_miou(&two.pass2.labels, gt, k)?;
            let delta = r1
                .per_class_iou
                .iter()
                .zip(&r2.per_class_iou)
                .map(|(x, y)| match (x, y) {
                    (None, None) => None,
                    _ => Some(y.unwrap_or(0.0) - x.unwrap_or(0.0)),
                })
                .collect();
            (Some(delta), Some(r1.miou), Some(r2.miou))
        }
        None => (None, None, None),
    };
    Ok(RefinementDiff {
        detected_pass1: ids(&two.pass1),
        detected_pass2: ids(&two.pass2),
        refined_categories: two.refined.overrides.keys().copied().collect(),
        changed_fraction: changed,
        iou_delta,
        miou_pass1: m1,
        miou_pass2: m2,
    })
}
