//! Cost-volume mathematics: prompt fusion, dense cosine volumes between image
//! embeddings and prompt embeddings, the per-slice convolutional embedding,
//! and the multi-scale visual cost volumes fed to the decoder.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::tensor::{norm, Tensor};

/// Vectors with a Euclidean norm below this are rejected.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Scales at which visual cost volumes are computed.
pub const VISUAL_SCALES: [usize; 3] = [2, 3, 4];

/// Multi-resolution image features `E_2..E_5` (`(H_j, W_j, D_j)`, at 1/4 to
/// 1/32 of the input) and the projected final embedding `E` `(H, W, D_z)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeaturePyramid {
    pub levels: BTreeMap<usize, Tensor>,
    pub embedding: Tensor,
}

impl ImageFeaturePyramid {
    pub fn level(&self, j: usize) -> Result<&Tensor> {
        self.levels
            .get(&j)
            .ok_or_else(|| Error::InvalidInput(format!("feature pyramid has no scale {j}")))
    }

    pub fn validate(&self) -> Result<()> {
        for j in 2..=5 {
            let t = self.level(j)?;
            if t.rank() != 3 {
                return Err(Error::Dimension(format!("E_{j} must be (H, W, D), got {:?}", t.shape())));
            }
            if j > 2 {
                let prev = self.level(j - 1)?;
                if prev.shape()[0] != 2 * t.shape()[0] || prev.shape()[1] != 2 * t.shape()[1] {
                    return Err(Error::Dimension(format!(
                        "E_{} {:?} is not twice E_{j} {:?}",
                        j - 1,
                        prev.shape(),
                        t.shape()
                    )));
                }
            }
        }
        let e5 = self.level(5)?;
        if self.embedding.rank() != 3 || self.embedding.shape()[..2] != e5.shape()[..2] {
            return Err(Error::Dimension(format!(
                "embedding {:?} must share E_5's spatial dims {:?}",
                self.embedding.shape(),
                &e5.shape()[..2]
            )));
        }
        Ok(())
    }
}

/// Dense cosine similarities `(H, W, K, M)`, every entry in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CostVolume(pub Tensor);

impl CostVolume {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> [usize; 4] {
        let s = self.0.shape();
        [s[0], s[1], s[2], s[3]]
    }
}

/// Cost volume after the shared per-category convolution: `(H, W, K, d_F)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddedCostVolume(pub Tensor);

impl EmbeddedCostVolume {
    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.last_dim()
    }
}

/// Per-scale visual cost volumes `F_v^j`, each `(H_j, W_j, K, M)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VisualCostVolume {
    pub levels: BTreeMap<usize, Tensor>,
}

/// Weights of the cost-slice convolution: `(kh, kw, M, d_F)` plus `(d_F)` bias.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceConv {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Arithmetic mean `(T + V) / 2` per `(k, m)`.
pub fn fuse_prompts(text: &Tensor, visual: &Tensor) -> Result<Tensor> {
    if text.shape() != visual.shape() {
        return Err(Error::Dimension(format!(
            "text prompts {:?} and visual prompts {:?} differ in shape",
            text.shape(),
            visual.shape()
        )));
    }
    let data = text
        .data()
        .iter()
        .zip(visual.data())
        .map(|(t, v)| (t + v) * 0.5)
        .collect();
    Tensor::from_vec(text.shape(), data)
}

fn unit_rows(t: &Tensor, what: &str, index_of: impl Fn(usize) -> String) -> Result<Vec<f64>> {
    let d = t.last_dim();
    let mut out = Vec::with_capacity(t.len());
    for (i, row) in t.data().chunks_exact(d).enumerate() {
        let n = norm(row);
        if !(n >= DEGENERATE_NORM) {
            return Err(Error::DegenerateVector(format!("{what}{}", index_of(i))));
        }
        out.extend(row.iter().map(|v| v / n));
    }
    Ok(out)
}

/// `F_c[x, y, k, m] = <E[x, y], R[k, m]> / (|E[x, y]| |R[k, m]|)`.
///
/// `embedding` is `(H, W, D)`; `reference` is `(K, M, D)`.
pub fn compute_cost_volume(embedding: &Tensor, reference: &Tensor) -> Result<CostVolume> {
    let (h, w, d) = match *embedding.shape() {
        [h, w, d] => (h, w, d),
        _ => {
            return Err(Error::Dimension(format!(
                "image embedding must be (H, W, D), got {:?}",
                embedding.shape()
            )))
        }
    };
    let (k, m) = match *reference.shape() {
        [k, m, dr] if dr == d => (k, m),
        _ => {
            return Err(Error::Dimension(format!(
                "prompt embedding must be (K, M, {d}), got {:?}",
                reference.shape()
            )))
        }
    };
    let e_hat = unit_rows(embedding, "E", |i| format!("[{}, {}]", i / w, i % w))?;
    let r_hat = unit_rows(reference, "R", |i| format!("[{}, {}]", i / m, i % m))?;
    let km = k * m;
    let mut out = Vec::with_capacity(h * w * km);
    for e in e_hat.chunks_exact(d) {
        for r in r_hat.chunks_exact(d) {
            let c: f64 = e.iter().zip(r).map(|(a, b)| a * b).sum();
            out.push(c.clamp(-1.0, 1.0));
        }
    }
    Ok(CostVolume(Tensor::from_vec(&[h, w, k, m], out)?))
}

/// Apply one shared 2-D convolution to every category slice `(H, W, M)` of
/// the cost volume, producing `(H, W, K, d_F)`. Padding keeps spatial size.
pub fn embed_cost_volume(cv: &CostVolume, conv: &SliceConv) -> Result<EmbeddedCostVolume> {
    let ks = conv.weight.shape().first().copied().unwrap_or(1);
    let geom = ConvGeometry {
        stride: 1,
        dilation: 1,
        pad: ks / 2,
    };
    let out = kernels::conv2d(&cv.0, &conv.weight, Some(&conv.bias), geom)?;
    Ok(EmbeddedCostVolume(out))
}

/// Global average pool of every `V_j[k, m]` map over its own spatial axes:
/// `(K, M, Hp, Wp, D)` → `(K, M, D)`. Summation runs in row-major order.
pub fn pool_prompt_maps(maps: &Tensor) -> Result<Tensor> {
    let (k, m, hp, wp, d) = match *maps.shape() {
        [k, m, hp, wp, d] => (k, m, hp, wp, d),
        _ => {
            return Err(Error::Dimension(format!(
                "visual prompt maps must be (K, M, Hp, Wp, D), got {:?}",
                maps.shape()
            )))
        }
    };
    let hw = hp * wp;
    let mut out = vec![0.0; k * m * d];
    for (km, acc) in out.chunks_exact_mut(d).enumerate() {
        let base = km * hw * d;
        for p in 0..hw {
            for (a, v) in acc.iter_mut().zip(&maps.data()[base + p * d..base + (p + 1) * d]) {
                *a += v;
            }
        }
        let inv = 1.0 / hw as f64;
        acc.iter_mut().for_each(|a| *a *= inv);
    }
    Tensor::from_vec(&[k, m, d], out)
}

/// Visual cost volume at one scale: cosine between the pooled prompt map
/// `Pool(V_j[k, m])` and every image feature `E_j[x, y]`.
pub fn compute_visual_cost_volume(level: &Tensor, prompt_maps: &Tensor) -> Result<Tensor> {
    let d = level.last_dim();
    if prompt_maps.last_dim() != d {
        return Err(Error::Dimension(format!(
            "image features have {d} channels but prompt maps have {}",
            prompt_maps.last_dim()
        )));
    }
    let pooled = pool_prompt_maps(prompt_maps)?;
    match compute_cost_volume(level, &pooled) {
        Err(Error::DegenerateVector(at)) if at.starts_with('R') => Err(Error::DegenerateVector(
            format!("pooled visual prompt {}", &at[1..]),
        )),
        other => other.map(|cv| cv.0),
    }
}

/// Visual cost volumes for every scale in [`VISUAL_SCALES`].
pub fn visual_cost_volumes(
    pyramid: &ImageFeaturePyramid,
    prompt_maps: &BTreeMap<usize, Tensor>,
) -> Result<VisualCostVolume> {
    let mut levels = BTreeMap::new();
    for j in VISUAL_SCALES {
        let maps = prompt_maps
            .get(&j)
            .ok_or_else(|| Error::InvalidInput(format!("visual prompt maps missing scale {j}")))?;
        levels.insert(j, compute_visual_cost_volume(pyramid.level(j)?, maps)?);
    }
    Ok(VisualCostVolume { levels })
}

/// How text and visual prompts are combined into a cost volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FusionStrategy {
    /// Average the embeddings, then take one cosine volume.
    #[default]
    DualEmbed,
    /// Concatenate `cos(T, E)` and `cos(V, E)` along the template axis.
    ConcatCos,
    /// Average the two cosine volumes.
    AvgCos,
}

impl FusionStrategy {
    /// Channel multiplier on `M` of the resulting volume.
    pub fn channel_factor(self) -> usize {
        match self {
            FusionStrategy::ConcatCos => 2,
            _ => 1,
        }
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual-embed" => Ok(Self::DualEmbed),
            "concat-cos" => Ok(Self::ConcatCos),
            "avg-cos" => Ok(Self::AvgCos),
            other => Err(Error::InvalidConfig(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DualEmbed => "dual-embed",
            Self::ConcatCos => "concat-cos",
            Self::AvgCos => "avg-cos",
        })
    }
}

/// Build the cost volume under one of the fusion strategies.
pub fn fuse_cost_volumes(
    text: &Tensor,
    visual: &Tensor,
    embedding: &Tensor,
    strategy: FusionStrategy,
) -> Result<Tensor> {
    match strategy {
        FusionStrategy::DualEmbed => Ok(compute_cost_volume(embedding, &fuse_prompts(text, visual)?)?.0),
        FusionStrategy::ConcatCos | FusionStrategy::AvgCos => {
            let ct = compute_cost_volume(embedding, text)?.0;
            let cv = compute_cost_volume(embedding, visual)?.0;
            let [h, w, k, m] = CostVolume(ct.clone()).dims();
            if strategy == FusionStrategy::AvgCos {
                let data = ct.data().iter().zip(cv.data()).map(|(a, b)| (a + b) * 0.5).collect();
                return Tensor::from_vec(&[h, w, k, m], data);
            }
            let mut data = Vec::with_capacity(2 * ct.len());
            for (a, b) in ct.data().chunks_exact(m).zip(cv.data().chunks_exact(m)) {
                data.extend_from_slice(a);
                data.extend_from_slice(b);
            }
            Tensor::from_vec(&[h, w, k, 2 * m], data)
        }
    }
}

/// Which prompt modality provides the reference embeddings of the main cost volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PromptStrategy {
    Text,
    Visual,
    #[default]
    Dual,
}

impl PromptStrategy {
    pub fn reference(self, text: &Tensor, visual: &Tensor) -> Result<Tensor> {
        match self {
            PromptStrategy::Text => Ok(text.clone()),
            PromptStrategy::Visual => Ok(visual.clone()),
            PromptStrategy::Dual => fuse_prompts(text, visual),
        }
    }
}

impl FromStr for PromptStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "t" => Ok(Self::Text),
            "visual" | "v" => Ok(Self::Visual),
            "dual" | "avg" => Ok(Self::Dual),
            other => Err(Error::InvalidConfig(format!("unknown prompt strategy {other:?}"))),
        }
    }
}

impl fmt::Display for PromptStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Text => "text",
            Self::Visual => "visual",
            Self::Dual => "dual",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Straight double loop over `(x, y, k, m)`.
    fn cost_volume_oracle(e: &Tensor, r: &Tensor) -> Tensor {
        let (h, w, d) = (e.shape()[0], e.shape()[1], e.shape()[2]);
        let (k, m) = (r.shape()[0], r.shape()[1]);
        let mut out = Tensor::zeros(&[h, w, k, m]);
        for y in 0..h {
            for x in 0..w {
                for kk in 0..k {
                    for mm in 0..m {
                        let (mut dt, mut ne, mut nr) = (0.0, 0.0, 0.0);
                        for c in 0..d {
                            let a = e.get(&[y, x, c]);
                            let b = r.get(&[kk, mm, c]);
                            dt += a * b;
                            ne += a * a;
                            nr += b * b;
                        }
                        out.set(&[y, x, kk, mm], dt / (ne.sqrt() * nr.sqrt()));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn fuse_identity_and_arithmetic() {
        let a = t(&[1, 1, 2], &[0.3, -0.2]);
        assert_eq!(fuse_prompts(&a, &a).unwrap(), a);
        let r = fuse_prompts(&t(&[1, 1, 2], &[1.0, 0.0]), &t(&[1, 1, 2], &[0.0, 1.0])).unwrap();
        assert_eq!(r.data(), &[0.5, 0.5]);
    }

    #[test]
    fn fuse_antipodal_is_degenerate_downstream() {
        let tx = t(&[1, 1, 2], &[1.0, 2.0]);
        let vx = t(&[1, 1, 2], &[-1.0, -2.0]);
        let r = fuse_prompts(&tx, &vx).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0]);
        let e = t(&[1, 1, 2], &[1.0, 0.0]);
        match compute_cost_volume(&e, &r) {
            Err(Error::DegenerateVector(at)) => assert_eq!(at, "R[0, 0]"),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn fuse_shape_mismatch() {
        let a = Tensor::zeros(&[1, 2, 3]);
        let b = Tensor::zeros(&[1, 3, 3]);
        assert!(matches!(fuse_prompts(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn self_similarity_and_orthogonality() {
        let e = t(&[1, 1, 3], &[0.5, -2.0, 1.0]);
        let r = t(&[1, 2, 3], &[0.5, -2.0, 1.0, 2.0, 0.5, 0.0]);
        let cv = compute_cost_volume(&e, &r).unwrap();
        assert!((cv.0.get(&[0, 0, 0, 0]) - 1.0).abs() < 1e-15);
        assert!(cv.0.get(&[0, 0, 0, 1]).abs() < 1e-15);
    }

    #[test]
    fn small_integer_volume_matches_loop_oracle() {
        let e = t(&[2, 2, 3], &[1., 2., 0., 0., 1., 1., 3., 0., -1., 2., 2., 2.]);
        let r = t(&[2, 1, 3], &[1., 0., 0., 1., -1., 2.]);
        let cv = compute_cost_volume(&e, &r).unwrap();
        assert_eq!(cv.dims(), [2, 2, 2, 1]);
        assert!(cv.0.max_abs_diff(&cost_volume_oracle(&e, &r)) < 1e-6);
        // (1,2,0)·(1,0,0) / sqrt(5) = 0.4472..
        assert!((cv.0.get(&[0, 0, 0, 0]) - 1.0 / 5f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn zero_image_vector_reports_location() {
        let e = t(&[1, 2, 2], &[1.0, 0.0, 0.0, 0.0]);
        let r = t(&[1, 1, 2], &[1.0, 1.0]);
        match compute_cost_volume(&e, &r) {
            Err(Error::DegenerateVector(at)) => assert_eq!(at, "E[0, 1]"),
            other => panic!("unexpected {other:?}"),
        }
    }

    /// Naive per-slice sliding-window convolution.
    fn slice_conv_oracle(cv: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let [h, wd, k, m] = [cv.shape()[0], cv.shape()[1], cv.shape()[2], cv.shape()[3]];
        let (ks, df) = (w.shape()[0], w.shape()[3]);
        let p = (ks / 2) as isize;
        let mut out = Tensor::zeros(&[h, wd, k, df]);
        for kk in 0..k {
            for y in 0..h as isize {
                for x in 0..wd as isize {
                    for o in 0..df {
                        let mut acc = b.data()[o];
                        for dy in 0..ks as isize {
                            for dx in 0..ks as isize {
                                let (iy, ix) = (y + dy - p, x + dx - p);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                for c in 0..m {
                                    acc += cv.get(&[iy as usize, ix as usize, kk, c])
                                        * w.get(&[dy as usize, dx as usize, c, o]);
                                }
                            }
                        }
                        out.set(&[y as usize, x as usize, kk, o], acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn embed_identity_kernel_reproduces_volume() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cv = CostVolume(random(&[3, 3, 2, 4], &mut rng));
        let mut w = Tensor::zeros(&[1, 1, 4, 4]);
        for i in 0..4 {
            w.set(&[0, 0, i, i], 1.0);
        }
        let f = embed_cost_volume(&cv, &SliceConv { weight: w, bias: Tensor::zeros(&[4]) }).unwrap();
        assert_eq!(f.0, cv.0);
    }

    #[test]
    fn embed_zero_weights_gives_bias() {
        let cv = CostVolume(Tensor::full(&[2, 2, 3, 2], 0.7));
        let conv = SliceConv {
            weight: Tensor::zeros(&[3, 3, 2, 5]),
            bias: Tensor::full(&[5], -0.25),
        };
        let f = embed_cost_volume(&cv, &conv).unwrap();
        assert_eq!(f.0.shape(), &[2, 2, 3, 5]);
        assert!(f.0.data().iter().all(|&v| v == -0.25));
    }

    #[test]
    fn embed_random_kernel_matches_sliding_window() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cv = CostVolume(random(&[4, 4, 1, 2], &mut rng));
        let w = random(&[3, 3, 2, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let f = embed_cost_volume(&cv, &SliceConv { weight: w.clone(), bias: b.clone() }).unwrap();
        assert!(f.0.max_abs_diff(&slice_conv_oracle(&cv.0, &w, &b)) < 1e-12);
    }

    #[test]
    fn embed_channel_mismatch() {
        let cv = CostVolume(Tensor::zeros(&[2, 2, 1, 3]));
        let conv = SliceConv {
            weight: Tensor::zeros(&[1, 1, 2, 4]),
            bias: Tensor::zeros(&[4]),
        };
        assert!(matches!(embed_cost_volume(&cv, &conv), Err(Error::Dimension(_))));
    }

    #[test]
    fn constant_prompt_map_pools_to_itself() {
        let v = [0.2, -0.4, 0.9];
        let level = Tensor::from_vec(&[1, 1, 3], v.to_vec()).unwrap();
        let maps = Tensor::from_vec(&[1, 1, 2, 2, 3], v.repeat(4)).unwrap();
        let out = compute_visual_cost_volume(&level, &maps).unwrap();
        assert!((out.get(&[0, 0, 0, 0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cancelling_prompt_map_is_degenerate() {
        let c = [1.0, 2.0];
        let neg = [-1.0, -2.0];
        let maps = Tensor::from_vec(&[1, 1, 2, 2, 2], [c, neg, neg, c].concat()).unwrap();
        let level = Tensor::full(&[2, 2, 2], 1.0);
        match compute_visual_cost_volume(&level, &maps) {
            Err(Error::DegenerateVector(at)) => assert!(at.starts_with("pooled visual prompt")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn visual_volume_matches_pool_then_cosine_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let level = random(&[2, 2, 3], &mut rng);
        let maps = random(&[2, 1, 2, 2, 3], &mut rng);
        let out = compute_visual_cost_volume(&level, &maps).unwrap();
        for k in 0..2 {
            let mut pooled = [0.0; 3];
            for y in 0..2 {
                for x in 0..2 {
                    for c in 0..3 {
                        pooled[c] += maps.get(&[k, 0, y, x, c]) / 4.0;
                    }
                }
            }
            for y in 0..2 {
                for x in 0..2 {
                    let e = level.row(&[y, x]);
                    let c = crate::tensor::dot(e, &pooled) / (norm(e) * norm(&pooled));
                    assert!((out.get(&[y, x, k, 0]) - c).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn strategies_coincide_when_prompts_equal() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e = random(&[2, 2, 4], &mut rng);
        let p = random(&[2, 3, 4], &mut rng);
        let dual = fuse_cost_volumes(&p, &p, &e, FusionStrategy::DualEmbed).unwrap();
        let avg = fuse_cost_volumes(&p, &p, &e, FusionStrategy::AvgCos).unwrap();
        let cat = fuse_cost_volumes(&p, &p, &e, FusionStrategy::ConcatCos).unwrap();
        assert!(dual.max_abs_diff(&avg) < 1e-12);
        assert_eq!(cat.shape(), &[2, 2, 2, 6]);
        for y in 0..2 {
            for x in 0..2 {
                for k in 0..2 {
                    for m in 0..3 {
                        assert_eq!(cat.get(&[y, x, k, m]), cat.get(&[y, x, k, m + 3]));
                    }
                }
            }
        }
    }

    #[test]
    fn avg_cos_is_mean_of_oracles_and_differs_from_dual() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let e = random(&[2, 2, 3], &mut rng);
        let tx = random(&[2, 1, 3], &mut rng);
        let vx = random(&[2, 1, 3], &mut rng);
        let avg = fuse_cost_volumes(&tx, &vx, &e, FusionStrategy::AvgCos).unwrap();
        let ot = cost_volume_oracle(&e, &tx);
        let ov = cost_volume_oracle(&e, &vx);
        for i in 0..avg.len() {
            assert!((avg.data()[i] - 0.5 * (ot.data()[i] + ov.data()[i])).abs() < 1e-6);
        }
        let dual = fuse_cost_volumes(&tx, &vx, &e, FusionStrategy::DualEmbed).unwrap();
        assert!(dual.max_abs_diff(&avg) > 1e-3);
        let direct = compute_cost_volume(&e, &fuse_prompts(&tx, &vx).unwrap()).unwrap();
        assert_eq!(dual, direct.0);
    }

    #[test]
    fn unknown_strategy_is_config_error() {
        assert!(matches!("cat".parse::<FusionStrategy>(), Err(Error::InvalidConfig(_))));
    }

    proptest! {
        #[test]
        fn cosine_volume_bounded_and_scale_invariant(
            seed in 0u64..10_000,
            alpha in 0.01f64..100.0,
            beta in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let e = random(&[3, 2, 5], &mut rng);
            let r = random(&[2, 3, 5], &mut rng);
            let a = compute_cost_volume(&e, &r).unwrap();
            let b = compute_cost_volume(&e.scale(alpha), &r.scale(beta)).unwrap();
            prop_assert!(a.0.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!(a.0.max_abs_diff(&b.0) < 1e-12);
            prop_assert!(a.0.max_abs_diff(&cost_volume_oracle(&e, &r)) < 1e-12);
        }
    }
}
