//! The synthetic world: scene streams plus the text and visual prompts
//! describing its classes.
//!
//! Visual prompts are frozen-encoder embeddings of class exemplar images,
//! one exemplar per template slot. Text prompts live in a shifted space: each
//! is the class concept (the mean exemplar embedding) blurred with a
//! neighbouring class's concept, offset by a vector shared by every text
//! prompt, plus per-template noise.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::encoder::{EncoderConfig, VisualPromptEncoder};
use super::scene::{generate_scene, render_exemplar, SceneConfig, SyntheticScene};
use crate::error::{Error, Result};
use crate::params::fnv1a;
use crate::promptbank::{CategorySet, PromptEmbeddings, PromptProvider, TemplateBank};
use crate::tensor::{norm, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub scene: SceneConfig,
    /// Side of exemplar prompt images; a multiple of 32.
    pub prompt_size: usize,
    pub templates: usize,
    /// Appearance jitter of exemplars relative to the canonical class look.
    pub exemplar_jitter: f64,
    /// Exemplars averaged into each class concept.
    pub concept_exemplars: usize,
    /// Weight of the neighbouring class in a text prompt.
    pub text_confusion: f64,
    /// Norm of the offset shared by all text prompts, relative to a unit concept.
    pub modality_gap: f64,

    /// Norm of per-template text noise, relative to a unit concept.
    pub text_noise: f64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            prompt_size: 32,
            templates: 4,
            exemplar_jitter: 0.1,
            concept_exemplars: 8,
            text_confusion: 0.35,
            modality_gap: 0.8,
            text_noise: 0.5,
            train_scenes: 64,
            eval_scenes: 16,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        if self.prompt_size == 0 || self.prompt_size % 32 != 0 {
            return Err(Error::InvalidConfig(format!(
                "prompt size {} must be a positive multiple of 32",
                self.prompt_size
            )));
        }
        if self.templates == 0 || self.concept_exemplars == 0 {
            return Err(Error::InvalidConfig("templates and concept exemplars must be positive".into()));
        }
        for (what, v) in [
            ("exemplar jitter", self.exemplar_jitter),
            ("text confusion", self.text_confusion),
            ("modality gap", self.modality_gap),
            ("text noise", self.text_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{what} must be finite and non-negative")));
            }
        }
        if self.train_scenes == 0 {
            return Err(Error::InvalidConfig("need at least one training scene".into()));
        }
        Ok(())
    }
}

/// Derive an independent stream seed.
pub fn derive_seed(seed: u64, tag: &str, index: u64) -> u64 {
    let mut bytes = seed.to_le_bytes().to_vec();
    bytes.extend_from_slice(tag.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a(&bytes)
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n < crate::costvolume::DEGENERATE_NORM {
        return Err(Error::DegenerateVector("world concept".into()));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

fn gaussian_unit(rng: &mut ChaCha8Rng, d: usize) -> Result<Vec<f64>> {
    let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
    unit(&z)
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub prompt_encoder: VisualPromptEncoder,
}

impl World {
    /// `encoder` fixes the frozen prompt encoder (its initial weights).
    pub fn new(config: WorldConfig, encoder: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            prompt_encoder: VisualPromptEncoder::new(encoder.clone())?,
            config,
        })
    }

    pub fn classes(&self) -> usize {
        self.config.scene.classes
    }

    pub fn categories(&self) -> CategorySet {
        let names = (0..self.classes())
            .map(|k| if k == 0 { "background".to_string() } else { format!("class{k}") })
            .collect();
        CategorySet::new(names).expect("generated names are unique")
    }

    pub fn exemplar(&self, class: usize, template: usize) -> Tensor {
        self.exemplar_variant(class, template, 0)
    }

    /// Variant 0 is the exemplar behind the evaluation prompts; others are
    /// fresh renders of the same class.
    pub fn exemplar_variant(&self, class: usize, template: usize, variant: usize) -> Tensor {
        let index = (class * 1000 + template) as u64;
        let seed = match variant {
            0 => derive_seed(self.config.seed, "exemplar", index),
            v => derive_seed(self.config.seed, "exemplar-variant", (v as u64) << 32 | index),
        };
        render_exemplar(class, self.config.prompt_size, self.config.exemplar_jitter, seed)
    }

    pub fn concept(&self, class: usize) -> Result<Vec<f64>> {
        let n = self.config.concept_exemplars;
        let mut acc = vec![0.0; self.prompt_encoder.config.embed_dim];
        for i in 0..n {
            let seed = derive_seed(self.config.seed, "concept", (class * 1000 + i) as u64);
            let img = render_exemplar(class, self.config.prompt_size, self.config.exemplar_jitter, seed);
            let v = self.prompt_encoder.encode(&img)?.vector;
            acc.iter_mut().zip(&v).for_each(|(a, b)| *a += b / n as f64);
        }
        unit(&acc)
    }

    /// Prompts for the first `classes` classes with `templates` slots each.
    pub fn prompts_for(&self, classes: usize, templates: usize) -> Result<PromptEmbeddings> {
        self.prompt_variant(classes, templates, 0)
    }

    /// `variants` prompt sets sharing the text prompts, each with its own
    /// exemplars; the first is [`World::prompts_for`]. Even-numbered later
    /// variants repeat one exemplar across the template slots, the layout a
    /// single refinement crop produces.
    pub fn prompt_pool(&self, classes: usize, templates: usize, variants: usize) -> Result<Vec<PromptEmbeddings>> {
        (0..variants.max(1)).map(|v| self.prompt_variant(classes, templates, v)).collect()
    }

    fn prompt_variant(&self, classes: usize, templates: usize, variant: usize) -> Result<PromptEmbeddings> {
        if classes < 1 || classes > self.classes() {
            return Err(Error::InvalidCategories(format!(
                "world has {} classes, {classes} requested",
                self.classes()
            )));
        }
        let dz = self.prompt_encoder.config.embed_dim;
        let cfg = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "gap", 0));
        let gap = gaussian_unit(&mut rng, dz)?;
        let concepts = (0..self.classes()).map(|k| self.concept(k)).collect::<Result<Vec<_>>>()?;

        let mut text = Vec::with_capacity(classes * templates * dz);
        let mut visual = Vec::with_capacity(classes * templates * dz);
        let mut maps: BTreeMap<usize, Vec<Tensor>> = BTreeMap::new();
        for k in 0..classes {
            let neighbour = &concepts[(k + 1) % self.classes()];
            for m in 0..templates {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "text", (k * 1000 + m) as u64));
                let z = gaussian_unit(&mut rng, dz)?;
                let t: Vec<f64> = (0..dz)
                    .map(|i| {
                        concepts[k][i]
                            + cfg.text_confusion * neighbour[i]
                            + cfg.modality_gap * gap[i]
                            + cfg.text_noise * z[i]
                    })
                    .collect();
                text.extend(unit(&t)?);
                let slot = if variant > 0 && variant % 2 == 0 { 0 } else { m };
                let enc = self.prompt_encoder.encode(&self.exemplar_variant(k, slot, variant))?;
                visual.extend(enc.vector);
                for (j, t) in enc.maps {
                    maps.entry(j).or_default().push(t);
                }
            }
        }
        let visual_maps = maps
            .into_iter()
            .map(|(j, parts)| {
                let s = parts[0].shape().to_vec();
                let t = Tensor::stack(&parts)?.into_reshaped(&[classes, templates, s[0], s[1], s[2]])?;
                Ok((j, t))
            })
            .collect::<Result<_>>()?;
        let p = PromptEmbeddings {
            text: Tensor::from_vec(&[classes, templates, dz], text)?,
            visual: Tensor::from_vec(&[classes, templates, dz], visual)?,
            visual_maps,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn prompts(&self) -> Result<PromptEmbeddings> {
        self.prompts_for(self.classes(), self.config.templates)
    }

    pub fn scene(&self, split: &str, index: usize) -> Result<SyntheticScene> {
        generate_scene(derive_seed(self.config.seed, split, index as u64), &self.config.scene)
    }

    pub fn train_scenes(&self) -> Result<Vec<SyntheticScene>> {
        (0..self.config.train_scenes).map(|i| self.scene("train", i)).collect()
    }

    pub fn eval_scenes(&self) -> Result<Vec<SyntheticScene>> {
        (0..self.config.eval_scenes).map(|i| self.scene("eval", i)).collect()
    }
}

impl PromptProvider for World {
    fn provide(&self, cats: &CategorySet, bank: &TemplateBank) -> Result<PromptEmbeddings> {
        self.prompts_for(cats.len(), bank.len())
    }
}

/// Hex SHA-256 over the images and labels of a scene list.
pub fn dataset_fingerprint(scenes: &[SyntheticScene]) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for s in scenes {
        for v in s.image.data() {
            h.update(v.to_le_bytes());
        }
        for &l in &s.labels.labels {
            h.update((l as u64).to_le_bytes());
        }
    }
    format!("{:x}", h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::dot;

    fn world() -> World {
        World::new(WorldConfig::default(), &EncoderConfig::default()).unwrap()
    }

    #[test]
    fn prompt_shapes() {
        let w = world();
        let p = w.prompts().unwrap();
        assert_eq!(p.text.shape(), &[4, 4, 64]);
        assert_eq!(p.visual_maps[&2].shape(), &[4, 4, 8, 8, 16]);
        assert_eq!(p.visual_maps[&4].shape(), &[4, 4, 2, 2, 64]);
        assert_eq!(p, w.prompts().unwrap());
    }

    #[test]
    fn visual_prompts_sit_closer_to_their_concept_than_text() {
        let w = world();
        let p = w.prompts().unwrap();
        let dz = p.embed_dim();
        let (mut cv, mut ct) = (0.0, 0.0);
        for k in 0..4 {
            let c = w.concept(k).unwrap();
            for m in 0..4 {
                let off = (k * 4 + m) * dz;
                let v = &p.visual.data()[off..off + dz];
                let t = &p.text.data()[off..off + dz];
                cv += dot(&c, v) / norm(v);
                ct += dot(&c, t);
            }
        }
        assert!(cv > ct, "visual {cv} text {ct}");
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (norm(a) * norm(b))
    }

    /// Nearest-prompt accuracy of untrained patch embeddings, per prompt mode.
    #[test]
    fn visual_prompts_classify_patches_better_than_text() {
        use crate::harness::model::{ModelConfig, SegModel};
        let w = world();
        let model = SegModel::init(ModelConfig::default()).unwrap();
        let p = w.prompts().unwrap();
        let (nc, nm) = (p.text.shape()[0], p.text.shape()[1]);
        let mut correct = [0usize; 2];
        let mut total = 0;
        for i in 0..40 {
            let s = w.scene("eval", i).unwrap();
            let emb = model.pyramid(&s.image).unwrap().embedding;
            let (h, wd) = (emb.shape()[0], emb.shape()[1]);
            let f = s.labels.height / h;
            for y in 0..h {
                for x in 0..wd {
                    let mut counts = vec![0; nc];
                    for yy in y * f..(y + 1) * f {
                        for xx in x * f..(x + 1) * f {
                            counts[s.labels.get(yy, xx)] += 1;
                        }
                    }
                    let truth = (0..nc).max_by_key(|&k| counts[k]).unwrap();
                    let e = emb.row(&[y, x]);
                    for (mode, hit) in correct.iter_mut().enumerate() {
                        let score = |k: usize| -> f64 {
                            (0..nm)
                                .map(|m| {
                                    let bank = if mode == 0 { &p.text } else { &p.visual };
                                    cosine(e, bank.row(&[k, m]))
                                })
                                .sum()
                        };
                        let best = (0..nc).max_by(|&a, &b| score(a).total_cmp(&score(b))).unwrap();
                        *hit += usize::from(best == truth);
                    }
                    total += 1;
                }
            }
        }
        let [text, visual] = correct.map(|c| c as f64 / total as f64);
        assert!(visual > text, "text {text} visual {visual}");
    }

    #[test]
    fn fewer_templates_are_a_prefix() {
        let w = world();
        let full = w.prompts_for(4, 6).unwrap();
        assert_eq!(full.truncate_templates(2).unwrap(), w.prompts_for(4, 2).unwrap());
        assert_eq!(w.prompts_for(3, 2).unwrap().text.data(), &w.prompts_for(4, 2).unwrap().text.data()[..3 * 2 * 64]);
    }

    #[test]
    fn prompt_pool_shares_text_and_varies_exemplars() {
        let w = world();
        let pool = w.prompt_pool(4, 3, 3).unwrap();
        assert_eq!(pool.len(), 3);
        assert_eq!(pool[0], w.prompts_for(4, 3).unwrap());
        assert!(pool.iter().all(|p| p.text == pool[0].text));
        assert_ne!(pool[1].visual, pool[0].visual);
        let slot = |p: &PromptEmbeddings, k: usize, m: usize| p.visual.row(&[k, m]).to_vec();
        assert_ne!(slot(&pool[1], 2, 0), slot(&pool[1], 2, 1));
        assert_eq!(slot(&pool[2], 2, 0), slot(&pool[2], 2, 1));
        assert_eq!(slot(&pool[2], 2, 0), slot(&pool[2], 2, 2));
        assert_eq!(w.prompt_pool(4, 3, 0).unwrap().len(), 1);
    }

    #[test]
    fn too_many_categories_rejected() {
        let w = world();
        assert!(matches!(w.prompts_for(5, 2), Err(Error::InvalidCategories(_))));
    }

    #[test]
    fn fingerprint_tracks_content() {
        let w = world();
        let a = w.train_scenes().unwrap();
        assert_eq!(dataset_fingerprint(&a), dataset_fingerprint(&w.train_scenes().unwrap()));
        assert_ne!(dataset_fingerprint(&a), dataset_fingerprint(&a[1..]));
        assert_eq!(dataset_fingerprint(&[]).len(), 64);
    }
}
