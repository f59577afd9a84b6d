use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::container::Container;
use super::templates::{CategorySet, TemplateBank};
use crate::costvolume::{DEGENERATE_NORM, VISUAL_SCALES};
use crate::error::{Error, Result};
use crate::tensor::{norm, Tensor};

/// Text prompts `T`, visual prompts `V` (both `(K, M, D_z)`) and the
/// multi-scale visual prompt maps `V_j` (`(K, M, Hp_j, Wp_j, D_j)`).
#[derive(Clone, Debug, PartialEq)]
pub struct PromptEmbeddings {
    pub text: Tensor,
    pub visual: Tensor,
    pub visual_maps: BTreeMap<usize, Tensor>,
}

impl PromptEmbeddings {
    pub fn categories(&self) -> usize {
        self.text.shape()[0]
    }

    pub fn templates(&self) -> usize {
        self.text.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.text.shape()[2]
    }

    pub fn validate(&self) -> Result<()> {
        if self.text.rank() != 3 {
            return Err(Error::Dimension(format!("T must be (K, M, D), got {:?}", self.text.shape())));
        }
        self.text.check_same_shape(&self.visual, "T vs V")?;
        let (k, m) = (self.categories(), self.templates());
        for (what, t) in [("T", &self.text), ("V", &self.visual)] {
            for (i, row) in t.data().chunks_exact(self.embed_dim()).enumerate() {
                if !(norm(row) >= DEGENERATE_NORM) {
                    return Err(Error::DegenerateVector(format!("{what}[{}, {}]", i / m, i % m)));
                }
            }
        }
        let mut prev: Option<(usize, usize)> = None;
        for j in VISUAL_SCALES {
            let maps = self
                .visual_maps
                .get(&j)
                .ok_or_else(|| Error::InvalidInput(format!("missing visual prompt maps V_{j}")))?;
            let s = maps.shape();
            if s.len() != 5 || s[0] != k || s[1] != m {
                return Err(Error::Dimension(format!("V_{j} must be ({k}, {m}, Hp, Wp, D), got {s:?}")));
            }
            if let Some((ph, pw)) = prev {
                if ph != 2 * s[2] || pw != 2 * s[3] {
                    return Err(Error::Dimension(format!(
                        "V_{j} spatial {:?} is not half of ({ph}, {pw})",
                        &s[2..4]
                    )));
                }
            }
            prev = Some((s[2], s[3]));
        }
        Ok(())
    }

    /// Keep only the first `m` templates.
    pub fn truncate_templates(&self, m: usize) -> Result<Self> {
        if m == 0 || m > self.templates() {
            return Err(Error::InvalidConfig(format!(
                "cannot keep {m} of {} templates",
                self.templates()
            )));
        }
        let cut = |t: &Tensor| -> Result<Tensor> {
            let s = t.shape();
            let inner: usize = s[2..].iter().product();
            let mut data = Vec::with_capacity(s[0] * m * inner);
            for k in 0..s[0] {
                let base = k * s[1] * inner;
                data.extend_from_slice(&t.data()[base..base + m * inner]);
            }
            let mut shape = s.to_vec();
            shape[1] = m;
            Tensor::from_vec(&shape, data)
        };
        Ok(Self {
            text: cut(&self.text)?,
            visual: cut(&self.visual)?,
            visual_maps: self
                .visual_maps
                .iter()
                .map(|(&j, t)| Ok((j, cut(t)?)))
                .collect::<Result<_>>()?,
        })
    }

    /// Reorder categories: output category `i` is input category `perm[i]`.
    pub fn permute_categories(&self, perm: &[usize]) -> Result<Self> {
        let k = self.categories();
        if perm.len() != k {
            return Err(Error::Dimension(format!("permutation of length {} for {k} categories", perm.len())));
        }
        let apply = |t: &Tensor| -> Result<Tensor> {
            let parts: Vec<Tensor> = perm.iter().map(|&p| t.index_axis0(p)).collect();
            Tensor::stack(&parts)
        };
        Ok(Self {
            text: apply(&self.text)?,
            visual: apply(&self.visual)?,
            visual_maps: self
                .visual_maps
                .iter()
                .map(|(&j, t)| Ok((j, apply(t)?)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn to_container(&self, cats: &CategorySet, bank: &TemplateBank, provenance: &str) -> Container {
        let mut c = Container::new(provenance);
        c.insert_f32("T", self.text.clone());
        c.insert_f32("V", self.visual.clone());
        for (j, t) in &self.visual_maps {
            c.insert_f32(format!("V{j}"), t.clone());
        }
        c.metadata.insert("categories".into(), cats.names().join("\n"));
        c.metadata.insert("templates".into(), bank.templates().join("\n"));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let mut visual_maps = BTreeMap::new();
        for j in VISUAL_SCALES {
            visual_maps.insert(j, c.get(&format!("V{j}"))?.clone());
        }
        let p = Self {
            text: c.get("T")?.clone(),
            visual: c.get("V")?.clone(),
            visual_maps,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Source of prompt embeddings for a category set and template bank.
pub trait PromptProvider {
    fn provide(&self, cats: &CategorySet, bank: &TemplateBank) -> Result<PromptEmbeddings>;
}

/// Embedding dimensions for synthetic providers.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptDims {
    pub embed_dim: usize,
    /// `D_j` for `j ∈ {2, 3, 4}`.
    pub scale_dims: BTreeMap<usize, usize>,
    /// Spatial side of the finest prompt map (`Hp_2 = Wp_2`).
    pub map_side: usize,
}

impl Default for PromptDims {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            scale_dims: [(2, 16), (3, 32), (4, 64)].into_iter().collect(),
            map_side: 8,
        }
    }
}

impl PromptDims {
    fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::InvalidConfig("embedding dimension must be positive".into()));
        }
        for j in VISUAL_SCALES {
            match self.scale_dims.get(&j) {
                Some(&d) if d > 0 => {}
                _ => return Err(Error::InvalidConfig(format!("D_{j} must be positive"))),
            }
        }
        if self.map_side < 4 || self.map_side % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "prompt map side {} must be a positive multiple of 4",
                self.map_side
            )));
        }
        Ok(())
    }
}

/// Latent-mixture prompt source. Every category owns a random unit latent;
/// `V[k, m]` and `T[k, m]` are unit-normalised mixtures of that latent and
/// fresh noise, with the visual side pulled harder toward the latent.
#[derive(Clone, Debug)]
pub struct SyntheticPromptProvider {
    pub seed: u64,
    pub dims: PromptDims,
    /// Mixing weight of the latent in `V`, in `[0, 1]`.
    pub visual_correlation: f64,
    /// Mixing weight of the latent in `T`; must be below `visual_correlation`.
    pub text_correlation: f64,
    /// Standard deviation of the per-pixel noise on the `V_j` maps.
    pub map_noise: f64,
}

impl SyntheticPromptProvider {
    pub fn new(seed: u64, dims: PromptDims, correlation: f64) -> Self {
        Self {
            seed,
            dims,
            visual_correlation: correlation,
            text_correlation: correlation * 0.5,
            map_noise: 0.01,
        }
    }

    fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        let vc = self.visual_correlation;
        let tc = self.text_correlation;
        if !(0.0..=1.0).contains(&vc) || !(0.0..=1.0).contains(&tc) {
            return Err(Error::InvalidConfig("correlations must lie in [0, 1]".into()));
        }
        if tc >= vc && vc > 0.0 {
            return Err(Error::InvalidConfig(format!(
                "text correlation {tc} must be below visual correlation {vc}"
            )));
        }
        if self.map_noise < 0.0 {
            return Err(Error::InvalidConfig("map noise must be non-negative".into()));
        }
        Ok(())
    }

    fn latents(&self, k: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..k).map(|_| unit_gaussian(&mut rng, self.dims.embed_dim)).collect()
    }

    /// `count` image embeddings of category `k`, each a unit mixture of the
    /// category latent (weight `correlation`) and noise.
    pub fn image_embeddings(&self, k: usize, count: usize, correlation: f64, seed: u64) -> Vec<Vec<f64>> {
        let latent = &self.latents(k + 1)[k];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e);
        (0..count).map(|_| mix(latent, correlation, &mut rng)).collect()
    }
}

fn unit_gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Unit-normalised `w·latent + sqrt(1 − w²)·noise` with unit `latent` and noise.
fn mix(latent: &[f64], w: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise = unit_gaussian(rng, latent.len());
    let s = (1.0 - w * w).max(0.0).sqrt();
    let v: Vec<f64> = latent.iter().zip(&noise).map(|(a, b)| w * a + s * b).collect();
    let n = norm(&v);
    if n < DEGENERATE_NORM {
        return latent.to_vec();
    }
    v.into_iter().map(|x| x / n).collect()
}

impl PromptProvider for SyntheticPromptProvider {
    fn provide(&self, cats: &CategorySet, bank: &TemplateBank) -> Result<PromptEmbeddings> {
        self.validate()?;
        let (k, m, d) = (cats.len(), bank.len(), self.dims.embed_dim);
        let latents = self.latents(k);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
        let mut text = Vec::with_capacity(k * m * d);
        let mut visual = Vec::with_capacity(k * m * d);
        for latent in &latents {
            for _ in 0..m {
                text.extend(mix(latent, self.text_correlation, &mut rng));
                visual.extend(mix(latent, self.visual_correlation, &mut rng));
            }
        }
        let visual = Tensor::from_vec(&[k, m, d], visual)?;

        let mut visual_maps = BTreeMap::new();
        let mut side = self.dims.map_side;
        for j in VISUAL_SCALES {
            let dj = self.dims.scale_dims[&j];
            let scale = 1.0 / (d as f64).sqrt();
            let proj: Vec<f64> = (0..d * dj)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    scale * z
                })
                .collect();
            let mut data = Vec::with_capacity(k * m * side * side * dj);
            for v in visual.data().chunks_exact(d) {
                let projected: Vec<f64> = (0..dj)
                    .map(|o| (0..d).map(|i| v[i] * proj[i * dj + o]).sum())
                    .collect();
                for _ in 0..side * side {
                    for &p in &projected {
                        let n: f64 = StandardNormal.sample(&mut rng);
                        data.push(p + self.map_noise * n);
                    }
                }
            }
            visual_maps.insert(j, Tensor::from_vec(&[k, m, side, side, dj], data)?);
            side /= 2;
        }
        let p = PromptEmbeddings {
            text: Tensor::from_vec(&[k, m, d], text)?,
            visual,
            visual_maps,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Prompt embeddings exported offline into a `DPEC1` container.
#[derive(Clone, Debug)]
pub struct CachedPromptProvider {
    pub container: Container,
}

impl CachedPromptProvider {
    pub fn open(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Ok(Self {
            container: Container::load(path)?,
        })
    }
}

impl PromptProvider for CachedPromptProvider {
    fn provide(&self, cats: &CategorySet, bank: &TemplateBank) -> Result<PromptEmbeddings> {
        let p = PromptEmbeddings::from_container(&self.container)?;
        if p.categories() != cats.len() || p.templates() != bank.len() {
            return Err(Error::Dimension(format!(
                "cached prompts cover {}x{} (K x M), requested {}x{}",
                p.categories(),
                p.templates(),
                cats.len(),
                bank.len()
            )));
        }
        if let Some(stored) = self.container.metadata.get("categories") {
            if stored.lines().ne(cats.names().iter().map(String::as_str)) {
                return Err(Error::InvalidInput("cached prompts were built for other categories".into()));
            }
        }
        Ok(p)
    }
}

/// Add zero-mean Gaussian noise to `V` and every `V_j`. The noise variance is
/// `level` times the tensor's own empirical variance; `T` is left untouched.
pub fn add_prompt_noise(p: &PromptEmbeddings, level: f64, seed: u64) -> Result<PromptEmbeddings> {
    if !(0.0..=1.0).contains(&level) {
        return Err(Error::InvalidConfig(format!("noise level {level} outside [0, 1]")));
    }
    if level == 0.0 {
        return Ok(p.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noisy = |t: &Tensor| -> Tensor {
        let n = t.len() as f64;
        let mean = t.data().iter().sum::<f64>() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = (level * var).sqrt();
        let mut out = t.clone();
        for v in out.data_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v += std * z;
        }
        out
    };
    let visual = noisy(&p.visual);
    let visual_maps = p.visual_maps.iter().map(|(&j, t)| (j, noisy(t))).collect();
    Ok(PromptEmbeddings {
        text: p.text.clone(),
        visual,
        visual_maps,
    })
}
