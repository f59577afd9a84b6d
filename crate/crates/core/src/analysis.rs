//! Embedding diagnostics: how close image features sit to text, visual and
//! fused prompts, per sample and per pixel.
//!
//! Distances are cosine distances, `1 - cos`.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costvolume::{compute_cost_volume, PromptStrategy, DEGENERATE_NORM};
use crate::error::{Error, Result};
use crate::promptbank::{Container, SyntheticPromptProvider};
use crate::tensor::{dot, norm, Tensor};

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if !(na >= DEGENERATE_NORM && nb >= DEGENERATE_NORM) {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

fn fused(t: &[f64], v: &[f64]) -> Vec<f64> {
    t.iter().zip(v).map(|(a, b)| (a + b) * 0.5).collect()
}

/// One image embedding with the text and visual prompt of its category.
#[derive(Clone, Debug, PartialEq)]
pub struct GapSample {
    pub image: Vec<f64>,
    pub text: Vec<f64>,
    pub visual: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapEntry {
    pub id: usize,
    pub cos_text: f64,
    pub cos_visual: f64,
    pub cos_dual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub samples: usize,
    pub excluded: usize,
    pub mean_text: Option<f64>,
    pub mean_visual: Option<f64>,
    pub mean_dual: Option<f64>,
    pub median_text: Option<f64>,
    pub median_visual: Option<f64>,
    pub median_dual: Option<f64>,
    /// Fraction of kept samples with `cos(E, V) > cos(E, T)` strictly.
    pub win_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub per_sample: Vec<GapEntry>,
    /// Ids of samples dropped for a near-zero vector.
    pub excluded_ids: Vec<usize>,
    pub summary: GapSummary,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    Some(if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) * 0.5 })
}

/// Cosine similarity of each image embedding to its text, visual and fused
/// prompt. Sample ids are input positions.
pub fn modality_gap_experiment(samples: &[GapSample]) -> Result<GapReport> {
    let Some(first) = samples.first() else {
        return Err(Error::InvalidInput("modality gap experiment needs at least one sample".into()));
    };
    let d = first.image.len();
    let mut per_sample = Vec::with_capacity(samples.len());
    let mut excluded_ids = Vec::new();
    for (id, s) in samples.iter().enumerate() {
        if s.image.len() != d || s.text.len() != d || s.visual.len() != d {
            return Err(Error::Dimension(format!(
                "sample {id} has dims ({}, {}, {}), expected {d}",
                s.image.len(),
                s.text.len(),
                s.visual.len()
            )));
        }
        let r = fused(&s.text, &s.visual);
        match (cosine(&s.image, &s.text), cosine(&s.image, &s.visual), cosine(&s.image, &r)) {
            (Some(cos_text), Some(cos_visual), Some(cos_dual)) => per_sample.push(GapEntry {
                id,
                cos_text,
                cos_visual,
                cos_dual,
            }),
            _ => {
                log::warn!("gap sample {id} has a degenerate vector; excluded");
                excluded_ids.push(id);
            }
        }
    }
    let col = |f: fn(&GapEntry) -> f64| per_sample.iter().map(f).collect::<Vec<_>>();
    let (t, v, r) = (col(|e| e.cos_text), col(|e| e.cos_visual), col(|e| e.cos_dual));
    let wins = per_sample.iter().filter(|e| e.cos_visual > e.cos_text).count();
    let summary = GapSummary {
        samples: per_sample.len(),
        excluded: excluded_ids.len(),
        mean_text: mean(&t),
        mean_visual: mean(&v),
        mean_dual: mean(&r),
        median_text: median(&t),
        median_visual: median(&v),
        median_dual: median(&r),
        win_rate: (!per_sample.is_empty()).then(|| wins as f64 / per_sample.len() as f64),
    };
    Ok(GapReport {
        per_sample,
        excluded_ids,
        summary,
    })
}

impl GapReport {
    /// One row per kept sample: the three similarities side by side, for a
    /// text-vs-visual scatter.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sample,cos_text,cos_visual,cos_dual\n");
        for e in &self.per_sample {
            let _ = writeln!(s, "{},{},{},{}", e.id, e.cos_text, e.cos_visual, e.cos_dual);
        }
        s
    }
}

/// Samples drawn from a synthetic provider: sample `i` belongs to category
/// `i % categories`, its image embedding mixes the category latent with
/// weight `image_correlation`, and its prompts are template `i / categories
/// % templates` of that category.
pub fn synthetic_gap_samples(
    provider: &SyntheticPromptProvider,
    categories: usize,
    templates: usize,
    count: usize,
    image_correlation: f64,
    seed: u64,
) -> Result<Vec<GapSample>> {
    use crate::promptbank::{CategorySet, PromptProvider, TemplateBank};
    let cats = CategorySet::new((0..categories).map(|k| format!("category{k}")).collect())?;
    let prompts = provider.provide(&cats, &TemplateBank::generic(templates)?)?;
    let per_cat = count.div_ceil(categories);
    let images: Vec<Vec<Vec<f64>>> = (0..categories)
        .map(|k| provider.image_embeddings(k, per_cat, image_correlation, seed.wrapping_add(k as u64)))
        .collect();
    Ok((0..count)
        .map(|i| {
            let (k, n) = (i % categories, i / categories);
            let m = n % templates;
            GapSample {
                image: images[k][n].clone(),
                text: prompts.text.row(&[k, m]).to_vec(),
                visual: prompts.visual.row(&[k, m]).to_vec(),
            }
        })
        .collect())
}

/// Samples from a container holding `image`, `text` and `visual` arrays of
/// shape `(N, D)`, row `i` of each forming sample `i`.
pub fn gap_samples_from_container(c: &Container) -> Result<Vec<GapSample>> {
    let (image, text, visual) = (c.get("image")?, c.get("text")?, c.get("visual")?);
    let shape = image.shape();
    if shape.len() != 2 || text.shape() != shape || visual.shape() != shape {
        return Err(Error::Dimension(format!(
            "gap arrays must share an (N, D) shape, got {:?}, {:?}, {:?}",
            image.shape(),
            text.shape(),
            visual.shape()
        )));
    }
    Ok((0..shape[0])
        .map(|i| GapSample {
            image: image.row(&[i]).to_vec(),
            text: text.row(&[i]).to_vec(),
            visual: visual.row(&[i]).to_vec(),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    /// `(mode, 1 - cos)`, nearest first.
    pub distances: Vec<(PromptStrategy, f64)>,
}

impl DistanceReport {
    pub fn distance(&self, mode: PromptStrategy) -> f64 {
        self.distances.iter().find(|(m, _)| *m == mode).map(|&(_, d)| d).expect("every mode is reported")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# distance = 1 - cosine similarity to the image embedding\n");
        for (mode, d) in &self.distances {
            let _ = writeln!(s, "{mode}\t{d:.4}");
        }
        s
    }
}

/// Cosine distance from the image embedding to the text, visual and fused
/// prompt, sorted ascending. Ties keep text, visual, dual order.
pub fn embedding_distance_report(image: &[f64], text: &[f64], visual: &[f64]) -> Result<DistanceReport> {
    if text.len() != image.len() || visual.len() != image.len() {
        return Err(Error::Dimension(format!(
            "image dim {} vs text {} and visual {}",
            image.len(),
            text.len(),
            visual.len()
        )));
    }
    let r = fused(text, visual);
    let mut distances = Vec::with_capacity(3);
    for (mode, p) in [
        (PromptStrategy::Text, text),
        (PromptStrategy::Visual, visual),
        (PromptStrategy::Dual, &r[..]),
    ] {
        let c = cosine(image, p).ok_or_else(|| Error::DegenerateVector(format!("{mode} distance")))?;
        distances.push((mode, 1.0 - c));
    }
    distances.sort_by(|a, b| a.1.total_cmp(&b.1));
    Ok(DistanceReport { distances })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `(H, W)` cosine similarities.
    pub values: Tensor,
    pub category: String,
    pub mode: PromptStrategy,
}

fn pool_templates(p: &Tensor, d: usize, what: &str) -> Result<Vec<f64>> {
    let ok = match *p.shape() {
        [dd] => dd == d,
        [m, dd] => m > 0 && dd == d,
        _ => false,
    };
    if !ok {
        return Err(Error::Dimension(format!("{what} prompt must be (D) or (M, D) with D = {d}, got {:?}", p.shape())));
    }
    let rows = p.len() / d;
    let mut acc = vec![0.0; d];
    for row in p.data().chunks_exact(d) {
        acc.iter_mut().zip(row).for_each(|(a, b)| *a += b / rows as f64);
    }
    Ok(acc)
}

/// Per-pixel cosine similarity between a `(H, W, D)` feature map and one
/// category's prompt, after mean-pooling templates. `text` and `visual` are
/// `(D)` or `(M, D)`; dual mode pools `(T + V) / 2`.
pub fn cost_volume_heatmap(
    features: &Tensor,
    text: &Tensor,
    visual: &Tensor,
    mode: PromptStrategy,
    category: &str,
) -> Result<Heatmap> {
    let (h, w, d) = match *features.shape() {
        [h, w, d] => (h, w, d),
        _ => return Err(Error::Dimension(format!("feature map must be (H, W, D), got {:?}", features.shape()))),
    };
    let pooled = match mode {
        PromptStrategy::Text => pool_templates(text, d, "text")?,
        PromptStrategy::Visual => pool_templates(visual, d, "visual")?,
        PromptStrategy::Dual => fused(&pool_templates(text, d, "text")?, &pool_templates(visual, d, "visual")?),
    };
    if norm(&pooled) < DEGENERATE_NORM {
        return Err(Error::DegenerateVector(format!("pooled {mode} prompt of {category}")));
    }
    let cv = compute_cost_volume(features, &Tensor::from_vec(&[1, 1, d], pooled)?)?;
    Ok(Heatmap {
        values: cv.0.into_reshaped(&[h, w])?,
        category: category.to_string(),
        mode,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeatmapFormat {
    Pgm,
    Csv,
}

/// Grey level of a similarity: `[-1, 1]` maps affinely onto `[0, 255]`,
/// halves rounding up, so 0 becomes 128.
pub fn grey_level(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5 + 0.5).floor() as u8
}

pub fn heatmap_pgm(h: &Heatmap) -> Result<Vec<u8>> {
    let [rows, cols] = *h.values.shape() else {
        return Err(Error::Dimension(format!("heatmap must be (H, W), got {:?}", h.values.shape())));
    };
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    out.extend(h.values.data().iter().map(|&v| grey_level(v)));
    Ok(out)
}

/// Row-major, comma-separated, shortest round-trip float formatting.
pub fn heatmap_csv(h: &Heatmap) -> Result<String> {
    let [_, cols] = *h.values.shape() else {
        return Err(Error::Dimension(format!("heatmap must be (H, W), got {:?}", h.values.shape())));
    };
    let mut s = String::new();
    for row in h.values.data().chunks(cols.max(1)) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    Ok(s)
}

pub fn export_heatmap(h: &Heatmap, path: impl AsRef<Path>, format: HeatmapFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        HeatmapFormat::Pgm => heatmap_pgm(h)?,
        HeatmapFormat::Csv => heatmap_csv(h)?.into_bytes(),
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
