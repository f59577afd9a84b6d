//! The cost-volume-guided decoder: three stages of hybrid dilated convolution,
//! category self-attention and learned ×2 upsampling, each followed by
//! injection of reduced encoder features and a scale-matched guidance volume,
//! then a shared 1×1 head and a bilinear finish to input resolution.

mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::costvolume::{
    self, EmbeddedCostVolume, FusionStrategy, ImageFeaturePyramid, PromptStrategy, VisualCostVolume,
};
use crate::error::{Error, Result};
use crate::kernels::ConvGeometry;
use crate::params::{BoundParams, Init, ParamStore};
use crate::promptbank::{Container, PromptEmbeddings};
use crate::tensor::Tensor;

pub use train::{
    grad_check, loss_and_grads, train_step, DecoderObjective, DecoderSample, GradCheckConfig, GradCheckReport,
    Objective, TrainState,
};

/// Number of decoder stages; stage `i` pairs with encoder scale `5 - i`.
pub const STAGES: usize = 3;

/// Where the per-stage guidance volumes come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GuidanceSource {
    /// Visual cost volumes between pooled prompt maps and encoder features.
    #[default]
    Visual,
    /// The main cost volume bilinearly resized to each stage.
    UpsampledCost,
}

impl FromStr for GuidanceSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visual" => Ok(Self::Visual),
            "upsampled-cost" => Ok(Self::UpsampledCost),
            other => Err(Error::InvalidConfig(format!("unknown guidance source {other:?}"))),
        }
    }
}

impl fmt::Display for GuidanceSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Visual => "visual",
            Self::UpsampledCost => "upsampled-cost",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Channels per category after each stage.
    pub hidden_dims: Vec<usize>,
    /// Channels of the embedded cost volume entering stage 1.
    pub cost_embed_dim: usize,
    pub dilation_rates: Vec<usize>,
    pub kernel: usize,
    /// Spatial kernel of the cost-slice embedding convolution.
    pub embed_kernel: usize,
    /// Encoder features are reduced by this factor before injection.
    pub encoder_reduction: usize,
    pub final_upsample: usize,
    pub mlp_ratio: usize,
    /// Encoder channels `D_2, D_3, D_4`.
    pub encoder_dims: Vec<usize>,
    /// Templates per category.
    pub templates: usize,
    pub prompt_strategy: PromptStrategy,
    pub fusion: FusionStrategy,
    pub guidance_source: GuidanceSource,
    /// Encoder scales (subset of 2, 3, 4) that receive a guidance volume.
    pub guidance_scales: Vec<usize>,
    pub detection_threshold: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            hidden_dims: vec![62, 32, 16],
            cost_embed_dim: 128,
            dilation_rates: vec![1, 2, 4],
            kernel: 3,
            embed_kernel: 3,
            encoder_reduction: 16,
            final_upsample: 4,
            mlp_ratio: 4,
            encoder_dims: vec![128, 256, 512],
            templates: 80,
            prompt_strategy: PromptStrategy::Dual,
            fusion: FusionStrategy::DualEmbed,
            guidance_source: GuidanceSource::Visual,
            guidance_scales: vec![2, 3, 4],
            detection_threshold: 0.005,
            seed: 0,
        }
    }
}

impl DecoderConfig {
    /// A tiny configuration (every decoder width at most 8).
    pub fn tiny(templates: usize) -> Self {
        Self {
            hidden_dims: vec![8, 6, 4],
            cost_embed_dim: 8,
            mlp_ratio: 2,
            encoder_dims: vec![16, 16, 32],
            templates,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hidden_dims.len() != STAGES || self.hidden_dims.contains(&0) {
            return bad(format!("hidden_dims must hold {STAGES} positive widths, got {:?}", self.hidden_dims));
        }
        if self.dilation_rates.first() != Some(&1) || self.dilation_rates.windows(2).any(|w| w[1] <= w[0]) {
            return bad(format!(
                "dilation rates must start at 1 and strictly increase, got {:?}",
                self.dilation_rates
            ));
        }
        if self.kernel % 2 == 0 || self.embed_kernel % 2 == 0 {
            return bad("kernels must have odd size".into());
        }
        if self.cost_embed_dim == 0 || self.templates == 0 || self.mlp_ratio == 0 || self.final_upsample == 0 {
            return bad("cost_embed_dim, templates, mlp_ratio and final_upsample must be positive".into());
        }
        if self.encoder_reduction == 0 || self.encoder_dims.len() != STAGES {
            return bad(format!("encoder_dims must list D_2, D_3, D_4, got {:?}", self.encoder_dims));
        }
        for (j, &d) in (2..).zip(&self.encoder_dims) {
            if d == 0 || d % self.encoder_reduction != 0 {
                return bad(format!("D_{j} = {d} is not a positive multiple of {}", self.encoder_reduction));
            }
        }
        let mut seen = Vec::new();
        for &j in &self.guidance_scales {
            if !costvolume::VISUAL_SCALES.contains(&j) || seen.contains(&j) {
                return bad(format!("guidance scales must be distinct values in 2..=4, got {:?}", self.guidance_scales));
            }
            seen.push(j);
        }
        if !(0.0..=1.0).contains(&self.detection_threshold) {
            return bad(format!("detection threshold {} outside [0, 1]", self.detection_threshold));
        }
        Ok(())
    }

    /// Encoder scale injected after stage `i` (1-based).
    pub fn stage_scale(stage: usize) -> usize {
        5 - stage
    }

    pub fn encoder_dim(&self, scale: usize) -> usize {
        self.encoder_dims[scale - 2]
    }

    /// Template channels of the main cost volume.
    pub fn cost_channels(&self) -> usize {
        match self.prompt_strategy {
            PromptStrategy::Dual => self.templates * self.fusion.channel_factor(),
            _ => self.templates,
        }
    }

    /// Guidance channels injected at `scale`; zero when it is not guided.
    pub fn guidance_channels(&self, scale: usize) -> usize {
        if !self.guidance_scales.contains(&scale) {
            return 0;
        }
        match self.guidance_source {
            GuidanceSource::Visual => self.templates,
            GuidanceSource::UpsampledCost => self.cost_channels(),
        }
    }

    /// Per-category channels after the injection that follows stage `i`.
    pub fn injected_channels(&self, stage: usize) -> usize {
        let j = Self::stage_scale(stage);
        self.hidden_dims[stage - 1] + self.encoder_dim(j) / self.encoder_reduction + self.guidance_channels(j)
    }

    /// Per-category input channels of stage `i`.
    pub fn stage_input_channels(&self, stage: usize) -> usize {
        if stage == 1 {
            self.cost_embed_dim
        } else {
            self.injected_channels(stage - 1)
        }
    }

    pub fn head_input_channels(&self) -> usize {
        self.injected_channels(STAGES)
    }

    fn geometry(&self, dilation: usize) -> ConvGeometry {
        ConvGeometry {
            stride: 1,
            dilation,
            pad: dilation * (self.kernel / 2),
        }
    }
}

/// Parameters of the cost embedding and the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderState {
    pub config: DecoderConfig,
    pub params: ParamStore,
}

impl DecoderState {
    pub fn init(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        init_decoder_params(&mut p, &config);
        Ok(Self { config, params: p })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    /// End-to-end prediction from frozen image features and prompt embeddings.
    pub fn predict(&self, pyramid: &ImageFeaturePyramid, prompts: &PromptEmbeddings) -> Result<SegmentationResult> {
        let mut g = Graph::new();
        let p = self.params.bind_frozen(&mut g);
        let e = g.constant(pyramid.embedding.clone());
        let levels = constant_levels(&mut g, pyramid)?;
        let logits = forward_graph(&mut g, &p, &self.config, e, &levels, prompts)?;
        SegmentationResult::from_logits(g.value(logits).clone(), self.config.detection_threshold)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (config, params): (DecoderConfig, _) = load_checkpoint(path)?;
        config.validate()?;
        let expected = Self::init(config.clone())?;
        for (name, t) in expected.params.iter() {
            if params.get(name)?.shape() != t.shape() {
                return Err(Error::Corruption(format!("parameter {name:?} has the wrong shape")));
            }
        }
        if params.len() != expected.params.len() {
            return Err(Error::Corruption("checkpoint holds unexpected parameters".into()));
        }
        Ok(Self { config, params })
    }
}

/// Create the cost-embedding and decoder parameters for `cfg`.
pub fn init_decoder_params(p: &mut ParamStore, cfg: &DecoderConfig) {
    let s = cfg.seed;
    let (ek, mc, df) = (cfg.embed_kernel, cfg.cost_channels(), cfg.cost_embed_dim);
    p.init(s, "cost_embed.w", &[ek, ek, mc, df], Init::FanIn(ek * ek * mc));
    p.init(s, "cost_embed.b", &[df], Init::Zeros);
    for stage in 1..=STAGES {
        let pre = format!("decoder.s{stage}");
        let cin = cfg.stage_input_channels(stage);
        let d = cfg.hidden_dims[stage - 1];
        let k = cfg.kernel;
        for &r in &cfg.dilation_rates {
            p.init(s, &format!("{pre}.conv_d{r}.w"), &[k, k, cin, d], Init::FanIn(k * k * cin));
            p.init(s, &format!("{pre}.conv_d{r}.b"), &[d], Init::Zeros);
        }
        p.init(s, &format!("{pre}.norm.gamma"), &[d], Init::Ones);
        p.init(s, &format!("{pre}.norm.beta"), &[d], Init::Zeros);
        let hidden = d * cfg.mlp_ratio;
        p.init(s, &format!("{pre}.mlp1.w"), &[d, hidden], Init::FanIn(d));
        p.init(s, &format!("{pre}.mlp1.b"), &[hidden], Init::Zeros);
        p.init(s, &format!("{pre}.mlp2.w"), &[hidden, d], Init::FanIn(hidden));
        p.init(s, &format!("{pre}.mlp2.b"), &[d], Init::Zeros);
        for proj in ["q", "k", "v", "o"] {
            p.init(s, &format!("{pre}.attn.{proj}.w"), &[d, d], Init::FanIn(d));
            p.init(s, &format!("{pre}.attn.{proj}.b"), &[d], Init::Zeros);
        }
        p.init(s, &format!("{pre}.up.w"), &[2, 2, d, d], Init::FanIn(d));
        p.init(s, &format!("{pre}.up.b"), &[d], Init::Zeros);
        let dj = cfg.encoder_dim(DecoderConfig::stage_scale(stage));
        let red = dj / cfg.encoder_reduction;
        p.init(s, &format!("{pre}.reduce.w"), &[dj, red], Init::FanIn(dj));
        p.init(s, &format!("{pre}.reduce.b"), &[red], Init::Zeros);
    }
    let ch = cfg.head_input_channels();
    p.init(s, "decoder.head.w", &[ch, 1], Init::FanIn(ch));
    p.init(s, "decoder.head.b", &[1], Init::Zeros);
}

pub fn constant_levels(g: &mut Graph, pyramid: &ImageFeaturePyramid) -> Result<BTreeMap<usize, Var>> {
    costvolume::VISUAL_SCALES
        .iter()
        .map(|&j| Ok((j, g.constant(pyramid.level(j)?.clone()))))
        .collect()
}

/// Dilated convolutions summed, layer norm, residual MLP, residual category attention.
pub fn hd_conv_block(g: &mut Graph, p: &BoundParams, cfg: &DecoderConfig, stage: usize, x: Var) -> Result<Var> {
    let pre = format!("decoder.s{stage}");
    let expected = cfg.stage_input_channels(stage);
    if g.value(x).last_dim() != expected {
        return Err(Error::Dimension(format!(
            "stage {stage} expects {expected} channels, got {}",
            g.value(x).last_dim()
        )));
    }
    let mut sum: Option<Var> = None;
    for &r in &cfg.dilation_rates {
        let w = p.get(&format!("{pre}.conv_d{r}.w"))?;
        let b = p.get(&format!("{pre}.conv_d{r}.b"))?;
        let y = g.conv2d(x, w, Some(b), cfg.geometry(r))?;
        sum = Some(match sum {
            Some(acc) => g.add(acc, y)?,
            None => y,
        });
    }
    let merged = sum.expect("at least one dilation rate");
    let h = g.layer_norm(merged, p.get(&format!("{pre}.norm.gamma"))?, p.get(&format!("{pre}.norm.beta"))?)?;
    let m = g.linear(h, p.get(&format!("{pre}.mlp1.w"))?, Some(p.get(&format!("{pre}.mlp1.b"))?))?;
    let m = g.gelu(m);
    let m = g.linear(m, p.get(&format!("{pre}.mlp2.w"))?, Some(p.get(&format!("{pre}.mlp2.b"))?))?;
    let h = g.add(h, m)?;
    let a = category_self_attention(g, p, &pre, h)?;
    g.add(h, a)
}

/// Single-head attention among the `K` category vectors at every location,
/// including the output projection (no residual).
pub fn category_self_attention(g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let proj = |g: &mut Graph, name: &str, input: Var| -> Result<Var> {
        let w = p.get(&format!("{prefix}.attn.{name}.w"))?;
        let b = p.get(&format!("{prefix}.attn.{name}.b"))?;
        g.linear(input, w, Some(b))
    };
    let q = proj(g, "q", x)?;
    let k = proj(g, "k", x)?;
    let v = proj(g, "v", x)?;
    let a = g.category_attention(q, k, v)?;
    proj(g, "o", a)
}

/// Learned stride-2 transposed convolution shared across categories.
pub fn upsample_stage(g: &mut Graph, p: &BoundParams, stage: usize, x: Var) -> Result<Var> {
    let pre = format!("decoder.s{stage}");
    g.deconv2x(x, p.get(&format!("{pre}.up.w"))?, p.get(&format!("{pre}.up.b"))?)
}

/// Concatenate `x`, the channel-reduced encoder features (gradient-blocked and
/// repeated over categories) and the guidance volume, if any.
pub fn inject_guidance(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &DecoderConfig,
    stage: usize,
    x: Var,
    level: Var,
    guidance: Option<Var>,
) -> Result<Var> {
    let pre = format!("decoder.s{stage}");
    let xs = g.value(x).shape().to_vec();
    let es = g.value(level).shape().to_vec();
    if es.len() != 3 || es[..2] != xs[..2] {
        return Err(Error::Dimension(format!(
            "stage {stage}: encoder features {es:?} do not match decoder features {xs:?}"
        )));
    }
    if es[2] % cfg.encoder_reduction != 0 {
        return Err(Error::InvalidConfig(format!(
            "encoder width {} is not divisible by {}",
            es[2], cfg.encoder_reduction
        )));
    }
    let k = xs[2];
    let detached = g.stop_gradient(level);
    let e4 = g.reshape(detached, &[es[0], es[1], 1, es[2]])?;
    let reduced = g.linear(e4, p.get(&format!("{pre}.reduce.w"))?, Some(p.get(&format!("{pre}.reduce.b"))?))?;
    let repeated = g.broadcast_categories(reduced, k)?;
    let mut parts = vec![x, repeated];
    if let Some(fv) = guidance {
        let fs = g.value(fv).shape();
        if fs.len() != 4 || fs[..3] != xs[..3] {
            return Err(Error::Dimension(format!(
                "stage {stage}: guidance volume {fs:?} does not match decoder features {xs:?}"
            )));
        }
        parts.push(fv);
    }
    g.concat(&parts)
}

/// Decoder stages and head on an embedded cost volume `(H, W, K, d_F)`.
/// Returns logits `(H_in, W_in, K)`.
pub fn decode_graph(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &DecoderConfig,
    cost: Var,
    levels: &BTreeMap<usize, Var>,
    guidance: &BTreeMap<usize, Var>,
) -> Result<Var> {
    let mut x = cost;
    for stage in 1..=STAGES {
        let j = DecoderConfig::stage_scale(stage);
        let level = *levels
            .get(&j)
            .ok_or_else(|| Error::InvalidInput(format!("feature pyramid has no scale {j}")))?;
        let fv = if cfg.guidance_scales.contains(&j) {
            Some(
                *guidance
                    .get(&j)
                    .ok_or_else(|| Error::InvalidInput(format!("guidance volume missing scale {j}")))?,
            )
        } else {
            None
        };
        x = hd_conv_block(g, p, cfg, stage, x)?;
        x = upsample_stage(g, p, stage, x)?;
        x = inject_guidance(g, p, cfg, stage, x, level, fv)?;
    }
    let z = g.linear(x, p.get("decoder.head.w")?, Some(p.get("decoder.head.b")?))?;
    let s = g.value(z).shape().to_vec();
    let (oh, ow) = (s[0] * cfg.final_upsample, s[1] * cfg.final_upsample);
    let z = g.resize_bilinear(z, oh, ow)?;
    g.reshape(z, &[oh, ow, s[2]])
}

/// Main cost volume `(H, W, K, cost_channels)` under the configured prompt
/// and fusion strategies; differentiable with respect to `e`.
pub fn cost_volume_graph(g: &mut Graph, cfg: &DecoderConfig, e: Var, prompts: &PromptEmbeddings) -> Result<Var> {
    if prompts.templates() != cfg.templates {
        return Err(Error::Dimension(format!(
            "decoder configured for {} templates, prompts carry {}",
            cfg.templates,
            prompts.templates()
        )));
    }
    let (t, v) = (&prompts.text, &prompts.visual);
    match (cfg.prompt_strategy, cfg.fusion) {
        (PromptStrategy::Text, _) => g.cosine_volume(e, t),
        (PromptStrategy::Visual, _) => g.cosine_volume(e, v),
        (PromptStrategy::Dual, FusionStrategy::DualEmbed) => g.cosine_volume(e, &costvolume::fuse_prompts(t, v)?),
        (PromptStrategy::Dual, FusionStrategy::ConcatCos) => {
            let a = g.cosine_volume(e, t)?;
            let b = g.cosine_volume(e, v)?;
            g.concat(&[a, b])
        }
        (PromptStrategy::Dual, FusionStrategy::AvgCos) => {
            let a = g.cosine_volume(e, t)?;
            let b = g.cosine_volume(e, v)?;
            let s = g.add(a, b)?;
            Ok(g.scale(s, 0.5))
        }
    }
}

/// Guidance volumes for every guided scale. Visual guidance is computed from
/// the current feature values and enters the graph as a constant.
pub fn guidance_graph(
    g: &mut Graph,
    cfg: &DecoderConfig,
    cost: Var,
    levels: &BTreeMap<usize, Var>,
    prompts: &PromptEmbeddings,
) -> Result<BTreeMap<usize, Var>> {
    let mut out = BTreeMap::new();
    for &j in &cfg.guidance_scales {
        let level = *levels
            .get(&j)
            .ok_or_else(|| Error::InvalidInput(format!("feature pyramid has no scale {j}")))?;
        let (h, w) = (g.value(level).shape()[0], g.value(level).shape()[1]);
        let v = match cfg.guidance_source {
            GuidanceSource::Visual => {
                let maps = prompts
                    .visual_maps
                    .get(&j)
                    .ok_or_else(|| Error::InvalidInput(format!("visual prompt maps missing scale {j}")))?;
                let fv = costvolume::compute_visual_cost_volume(g.value(level), maps)?;
                g.constant(fv)
            }
            GuidanceSource::UpsampledCost => g.resize_bilinear(cost, h, w)?,
        };
        out.insert(j, v);
    }
    Ok(out)
}

/// Cost volume, slice embedding, guidance and decoder from image features.
pub fn forward_graph(
    g: &mut Graph,
    p: &BoundParams,
    cfg: &DecoderConfig,
    e: Var,
    levels: &BTreeMap<usize, Var>,
    prompts: &PromptEmbeddings,
) -> Result<Var> {
    let cv = cost_volume_graph(g, cfg, e, prompts)?;
    let half = cfg.embed_kernel / 2;
    let geom = ConvGeometry {
        stride: 1,
        dilation: 1,
        pad: half,
    };
    let f = g.conv2d(cv, p.get("cost_embed.w")?, Some(p.get("cost_embed.b")?), geom)?;
    let guidance = guidance_graph(g, cfg, cv, levels, prompts)?;
    decode_graph(g, p, cfg, f, levels, &guidance)
}

/// Decode an embedded cost volume with explicit guidance volumes (keyed by scale).
pub fn decode(
    f: &EmbeddedCostVolume,
    pyramid: &ImageFeaturePyramid,
    fv: &VisualCostVolume,
    state: &DecoderState,
) -> Result<SegmentationResult> {
    let cfg = &state.config;
    let mut g = Graph::new();
    let p = state.params.bind_frozen(&mut g);
    let cost = g.constant(f.0.clone());
    let levels = constant_levels(&mut g, pyramid)?;
    let mut guidance = BTreeMap::new();
    for &j in &cfg.guidance_scales {
        let t = fv
            .levels
            .get(&j)
            .ok_or_else(|| Error::InvalidInput(format!("visual cost volume missing scale {j}")))?;
        guidance.insert(j, g.constant(t.clone()));
    }
    let logits = decode_graph(&mut g, &p, cfg, cost, &levels, &guidance)?;
    SegmentationResult::from_logits(g.value(logits).clone(), cfg.detection_threshold)
}

/// Mean per-pixel binary cross-entropy against one-hot targets.
pub fn bce_loss(logits: &Tensor, target: &LabelMap) -> Result<f64> {
    crate::autograd::bce_with_logits(logits, &target.labels)
}

/// Integer class map in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} labels for a {height}x{width} map",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn filled(height: usize, width: usize, label: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: usize) {
        self.labels[y * self.width + x] = label;
    }

    /// Fraction of pixels carrying each label in `0..classes`.
    pub fn fractions(&self, classes: usize) -> Vec<f64> {
        let mut counts = vec![0usize; classes];
        for &l in &self.labels {
            if l < classes {
                counts[l] += 1;
            }
        }
        let n = self.labels.len().max(1) as f64;
        counts.into_iter().map(|c| c as f64 / n).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationResult {
    /// `(H_in, W_in, K)`.
    pub logits: Tensor,
    pub labels: LabelMap,
    pub detected: Vec<bool>,
    /// Fraction of pixels assigned to each category.
    pub scores: Vec<f64>,
}

impl SegmentationResult {
    pub fn from_logits(logits: Tensor, threshold: f64) -> Result<Self> {
        let (h, w, k) = match *logits.shape() {
            [h, w, k] if k > 0 => (h, w, k),
            _ => return Err(Error::Dimension(format!("logits must be (H, W, K), got {:?}", logits.shape()))),
        };
        let labels = LabelMap::new(h, w, logits.data().chunks_exact(k).map(argmax).collect())?;
        let scores = labels.fractions(k);
        let detected = scores.iter().map(|&s| s >= threshold).collect();
        Ok(Self {
            logits,
            labels,
            detected,
            scores,
        })
    }

    pub fn categories(&self) -> usize {
        self.scores.len()
    }
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Write named parameters plus a TOML rendering of `config` into a container.
pub fn save_checkpoint<C: Serialize>(path: impl AsRef<Path>, config: &C, params: &ParamStore) -> Result<()> {
    let mut c = Container::new("dpseg checkpoint");
    c.metadata.insert(
        "config".into(),
        toml::to_string(config).map_err(|e| Error::Format(format!("config: {e}")))?,
    );
    params.write_into(&mut c);
    c.save(path)
}

pub fn load_checkpoint<C: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<(C, ParamStore)> {
    let c = Container::load(path)?;
    let text = c
        .metadata
        .get("config")
        .ok_or_else(|| Error::Format("checkpoint has no config block".into()))?;
    let config = toml::from_str(text).map_err(|e| Error::Format(format!("config block: {e}")))?;
    Ok((config, ParamStore::read_from(&c)))
}
