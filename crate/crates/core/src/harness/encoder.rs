//! Toy hierarchical image encoder and its frozen twin used for visual prompts.
//!
//! Four non-overlapping patchify stages (strides 4, 2, 2, 2) give `E_2..E_5`
//! at 1/4..1/32 of the input. Each stage is conv, layer norm, GELU. A
//! two-layer MLP projects `E_5` to the embedding `E`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::costvolume::ImageFeaturePyramid;
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::params::{BoundParams, Init, ParamStore};
use crate::refinement::{PromptEncoding, VisualPromptEmbedder};
use crate::tensor::Tensor;

pub const PATCH_SIZES: [usize; 4] = [4, 2, 2, 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Widths of `E_2..E_5`.
    pub dims: Vec<usize>,
    pub embed_dim: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dims: vec![16, 32, 64, 64],
            embed_dim: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dims.len() != 4 || self.dims.iter().any(|&d| d == 0) || self.embed_dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "encoder needs four positive stage widths and a positive embedding width, got {:?} / {}",
                self.dims, self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn scale_dim(&self, scale: usize) -> usize {
        self.dims[scale - 2]
    }
}

pub fn init_encoder_params(p: &mut ParamStore, cfg: &EncoderConfig) {
    let s = cfg.seed;
    let mut cin = 3;
    for (i, (&k, &d)) in PATCH_SIZES.iter().zip(&cfg.dims).enumerate() {
        let pre = format!("encoder.s{}", i + 1);
        p.init(s, &format!("{pre}.w"), &[k, k, cin, d], Init::FanIn(k * k * cin));
        p.init(s, &format!("{pre}.b"), &[d], Init::Zeros);
        p.init(s, &format!("{pre}.norm.gamma"), &[d], Init::Ones);
        p.init(s, &format!("{pre}.norm.beta"), &[d], Init::Zeros);
        cin = d;
    }
    let (d5, dz) = (cfg.dims[3], cfg.embed_dim);
    p.init(s, "encoder.proj1.w", &[d5, d5], Init::FanIn(d5));
    p.init(s, "encoder.proj1.b", &[d5], Init::Zeros);
    p.init(s, "encoder.proj2.w", &[d5, dz], Init::FanIn(d5));
    p.init(s, "encoder.proj2.b", &[dz], Init::Zeros);
}

/// Encoder outputs on a graph: levels `E_2..E_5` as `(H_j, W_j, D_j)` and the
/// embedding `E` as `(H_5, W_5, D_z)`.
pub struct EncodedVars {
    pub levels: BTreeMap<usize, Var>,
    pub embedding: Var,
}

pub fn check_image(image: &Tensor) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w, 3] if h > 0 && w > 0 && h % 32 == 0 && w % 32 == 0 => Ok((h, w)),
        [_, _, 3] => Err(Error::InvalidInput(format!(
            "image sides must be positive multiples of 32, got {:?}",
            &image.shape()[..2]
        ))),
        _ => Err(Error::InvalidInput(format!("image must be (H, W, 3), got {:?}", image.shape()))),
    }
}

pub fn encoder_graph(g: &mut Graph, p: &BoundParams, image: Var) -> Result<EncodedVars> {
    let (h, w) = check_image(g.value(image))?;
    let mut x = g.reshape(image, &[h, w, 1, 3])?;
    let mut levels = BTreeMap::new();
    for (i, &k) in PATCH_SIZES.iter().enumerate() {
        let pre = format!("encoder.s{}", i + 1);
        x = g.conv2d(x, p.get(&format!("{pre}.w"))?, Some(p.get(&format!("{pre}.b"))?), ConvGeometry::patchify(k))?;
        x = g.layer_norm(x, p.get(&format!("{pre}.norm.gamma"))?, p.get(&format!("{pre}.norm.beta"))?)?;
        x = g.gelu(x);
        let s = g.value(x).shape().to_vec();
        levels.insert(i + 2, g.reshape(x, &[s[0], s[1], s[3]])?);
    }
    let e5 = levels[&5];
    let hidden = g.linear(e5, p.get("encoder.proj1.w")?, Some(p.get("encoder.proj1.b")?))?;
    let hidden = g.gelu(hidden);
    let embedding = g.linear(hidden, p.get("encoder.proj2.w")?, Some(p.get("encoder.proj2.b")?))?;
    Ok(EncodedVars { levels, embedding })
}

/// Forward pass without gradient tracking.
pub fn toy_image_encoder(image: &Tensor, params: &ParamStore) -> Result<ImageFeaturePyramid> {
    let mut g = Graph::new();
    let p = params.bind_frozen(&mut g);
    let x = g.constant(image.clone());
    let out = encoder_graph(&mut g, &p, x)?;
    Ok(ImageFeaturePyramid {
        levels: out.levels.iter().map(|(&j, &v)| (j, g.value(v).clone())).collect(),
        embedding: g.value(out.embedding).clone(),
    })
}

/// A frozen copy of the image encoder at its initial weights.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPromptEncoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl VisualPromptEncoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_encoder_params(&mut params, &config);
        Ok(Self { config, params })
    }

    pub fn encode(&self, image: &Tensor) -> Result<PromptEncoding> {
        let pyr = toy_image_encoder(image, &self.params)?;
        let vector = pyr.embedding.spatial_mean().into_data();
        let maps = pyr.levels.into_iter().filter(|(j, _)| *j <= 4).collect();
        Ok(PromptEncoding { vector, maps })
    }
}

impl VisualPromptEmbedder for VisualPromptEncoder {
    fn embed(&self, image: &Tensor) -> Result<PromptEncoding> {
        self.encode(image)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{grad_check, GradCheckConfig, Objective};
    use crate::harness::scene::render_exemplar;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> EncoderConfig {
        EncoderConfig {
            dims: vec![4, 4, 6, 6],
            embed_dim: 5,
            seed: 3,
        }
    }

    fn params(cfg: &EncoderConfig) -> ParamStore {
        let mut p = ParamStore::new();
        init_encoder_params(&mut p, cfg);
        p
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[h, w, 3], (0..h * w * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn pyramid_shapes_for_64() {
        let cfg = EncoderConfig::default();
        let pyr = toy_image_encoder(&random_image(64, 64, 0), &params(&cfg)).unwrap();
        assert_eq!(pyr.level(2).unwrap().shape(), &[16, 16, 16]);
        assert_eq!(pyr.level(3).unwrap().shape(), &[8, 8, 32]);
        assert_eq!(pyr.level(4).unwrap().shape(), &[4, 4, 64]);
        assert_eq!(pyr.level(5).unwrap().shape(), &[2, 2, 64]);
        assert_eq!(pyr.embedding.shape(), &[2, 2, 64]);
        pyr.validate().unwrap();
    }

    #[test]
    fn indivisible_input_rejected() {
        let cfg = small();
        let err = toy_image_encoder(&random_image(48, 64, 0), &params(&cfg)).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    #[test]
    fn zero_image_gives_zero_features() {
        let cfg = small();
        let pyr = toy_image_encoder(&Tensor::zeros(&[32, 32, 3]), &params(&cfg)).unwrap();
        for t in pyr.levels.values() {
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
        assert!(pyr.embedding.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_prompt_gives_constant_maps() {
        let enc = VisualPromptEncoder::new(small()).unwrap();
        let img = Tensor::from_vec(&[64, 64, 3], [0.2, 0.7, 0.4].repeat(64 * 64)).unwrap();
        let out = enc.encode(&img).unwrap();
        for t in out.maps.values() {
            let d = t.last_dim();
            let first = &t.data()[..d];
            for px in t.data().chunks_exact(d) {
                assert_eq!(px, first);
            }
        }
        assert_eq!(out, enc.encode(&img).unwrap());
        assert_eq!(out.vector.len(), 5);
    }

    #[test]
    fn prompt_encoder_matches_initial_image_encoder() {
        let cfg = small();
        let enc = VisualPromptEncoder::new(cfg.clone()).unwrap();
        let img = render_exemplar(1, 32, 0.1, 0);
        let pyr = toy_image_encoder(&img, &params(&cfg)).unwrap();
        let out = enc.encode(&img).unwrap();
        assert_eq!(&out.maps[&3], pyr.level(3).unwrap());
        assert_eq!(out.vector, pyr.embedding.spatial_mean().into_data());
    }

    struct EncoderProbe {
        target: Tensor,
    }

    impl Objective for EncoderProbe {
        type Sample = Tensor;

        fn loss(&self, g: &mut Graph, p: &BoundParams, image: &Tensor) -> Result<Var> {
            let x = g.constant(image.clone());
            let out = encoder_graph(g, p, x)?;
            // Mix every level into the loss so all stages are exercised.
            let mut acc = g.weighted_sum(out.embedding, self.target.clone())?;
            for (&j, &v) in &out.levels {
                let n = g.value(v).len();
                let coeffs = Tensor::from_vec(
                    g.value(v).shape(),
                    (0..n).map(|i| ((i * 7 + j) % 5) as f64 * 0.1 - 0.2).collect(),
                )?;
                let s = g.weighted_sum(v, coeffs)?;
                acc = g.add(acc, s)?;
            }
            Ok(acc)
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let cfg = small();
        let p = params(&cfg);
        let img = random_image(64, 32, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let target = Tensor::from_vec(&[2, 1, 5], (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let report = grad_check(
            &EncoderProbe { target },
            &p,
            &img,
            &GradCheckConfig {
                entries_per_param: 8,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{:?}", report.per_param);
        assert!(report.failing.is_empty());
        assert_eq!(report.per_param.len(), p.len());
    }
}
