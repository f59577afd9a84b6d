//! The full segmentation model: trainable toy encoder, cost embedding and decoder.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{encoder_graph, init_encoder_params, toy_image_encoder, EncoderConfig};
use super::scene::SyntheticScene;
use crate::autograd::{Graph, Var};
use crate::costvolume::ImageFeaturePyramid;
use crate::decoder::Objective;
use crate::decoder::{forward_graph, init_decoder_params, load_checkpoint, save_checkpoint, DecoderConfig, SegmentationResult};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamStore};
use crate::promptbank::PromptEmbeddings;
use crate::refinement::Segmenter;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            decoder: DecoderConfig {
                hidden_dims: vec![32, 16, 8],
                cost_embed_dim: 32,
                mlp_ratio: 2,
                encoder_dims: vec![16, 32, 64],
                templates: 4,
                ..DecoderConfig::default()
            },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()?;
        if self.decoder.encoder_dims[..] != self.encoder.dims[..3] {
            return Err(Error::InvalidConfig(format!(
                "decoder expects encoder widths {:?}, encoder produces {:?}",
                self.decoder.encoder_dims,
                &self.encoder.dims[..3]
            )));
        }
        Ok(())
    }

    /// The same model with every init seed replaced.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.encoder.seed = seed;
        c.decoder.seed = seed;
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl SegModel {
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_encoder_params(&mut params, &config.encoder);
        init_decoder_params(&mut params, &config.decoder);
        Ok(Self { config, params })
    }

    pub fn pyramid(&self, image: &Tensor) -> Result<ImageFeaturePyramid> {
        toy_image_encoder(image, &self.params)
    }

    pub fn predict(&self, image: &Tensor, prompts: &PromptEmbeddings) -> Result<SegmentationResult> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let logits = model_graph(&mut g, &p, &self.config, image, prompts)?;
        SegmentationResult::from_logits(g.value(logits).clone(), self.config.decoder.detection_threshold)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, params): (ModelConfig, ParamStore) = load_checkpoint(path)?;
        let fresh = Self::init(config.clone())?;
        if params.len() != fresh.params.len() {
            return Err(Error::Corruption(format!(
                "checkpoint holds {} parameters, model needs {}",
                params.len(),
                fresh.params.len()
            )));
        }
        for (name, t) in fresh.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::Corruption(format!("parameter {name:?} has the wrong shape")));
            }
        }
        Ok(Self { config, params })
    }
}

impl Segmenter for SegModel {
    fn segment(&self, image: &Tensor, prompts: &PromptEmbeddings) -> Result<SegmentationResult> {
        self.predict(image, prompts)
    }
}

/// Image to logits `(H_in, W_in, K)` on a graph.
pub fn model_graph(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &ModelConfig,
    image: &Tensor,
    prompts: &PromptEmbeddings,
) -> Result<Var> {
    let x = g.constant(image.clone());
    let enc = encoder_graph(g, p, x)?;
    forward_graph(g, p, &cfg.decoder, enc.embedding, &enc.levels, prompts)
}

/// Per-pixel BCE of the whole model on a scene under fixed prompts.
#[derive(Clone, Debug)]
pub struct SegObjective {
    pub config: ModelConfig,
    pub prompts: PromptEmbeddings,
}

impl Objective for SegObjective {
    type Sample = SyntheticScene;

    fn loss(&self, g: &mut Graph, p: &BoundParams, scene: &SyntheticScene) -> Result<Var> {
        let logits = model_graph(g, p, &self.config, &scene.image, &self.prompts)?;
        g.bce_loss(logits, &scene.labels.labels)
    }
}
