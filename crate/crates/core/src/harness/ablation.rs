//! Ablation drivers: train and evaluate every arm of an axis under the same
//! seeds and data, then summarise mIoU per arm.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::train::{evaluate, train_model};
use super::world::{dataset_fingerprint, derive_seed, World};
use crate::costvolume::{FusionStrategy, PromptStrategy};
use crate::decoder::GuidanceSource;
use crate::error::{Error, Result};
use crate::promptbank::add_prompt_noise;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    PromptStrategy,
    Fusion,
    Guidance,
    Templates,
    Noise,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 5] = [
        AblationAxis::PromptStrategy,
        AblationAxis::Fusion,
        AblationAxis::Guidance,
        AblationAxis::Templates,
        AblationAxis::Noise,
    ];

    pub fn arms(self) -> Vec<Arm> {
        let base = Arm::default();
        match self {
            AblationAxis::PromptStrategy => [
                ("text", PromptStrategy::Text),
                ("visual", PromptStrategy::Visual),
                ("avg", PromptStrategy::Dual),
            ]
            .into_iter()
            .map(|(name, s)| Arm {
                name: name.into(),
                prompt_strategy: s,
                ..base.clone()
            })
            .collect(),
            AblationAxis::Fusion => [FusionStrategy::DualEmbed, FusionStrategy::ConcatCos, FusionStrategy::AvgCos]
                .into_iter()
                .map(|f| Arm {
                    name: f.to_string(),
                    fusion: f,
                    ..base.clone()
                })
                .collect(),
            AblationAxis::Guidance => {
                let mut arms: Vec<Arm> = [
                    ("fc-only", vec![]),
                    ("fv2", vec![2]),
                    ("fv2-3", vec![2, 3]),
                    ("fv2-3-4", vec![2, 3, 4]),
                ]
                .into_iter()
                .map(|(name, scales)| Arm {
                    name: name.into(),
                    guidance_scales: scales,
                    ..base.clone()
                })
                .collect();
                arms.push(Arm {
                    name: "upsampled-fc".into(),
                    guidance_source: GuidanceSource::UpsampledCost,
                    ..base.clone()
                });
                arms
            }
            AblationAxis::Templates => [1, 4, 16]
                .into_iter()
                .map(|m| Arm {
                    name: format!("m{m}"),
                    templates: Some(m),
                    ..base.clone()
                })
                .collect(),
            AblationAxis::Noise => [0.0, 0.2, 0.6, 0.8]
                .into_iter()
                .map(|level| Arm {
                    name: format!("noise{}", (level * 100.0) as u32),
                    noise: level,
                    ..base.clone()
                })
                .collect(),
        }
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation axis {s:?}")))
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AblationAxis::PromptStrategy => "prompt-strategy",
            AblationAxis::Fusion => "fusion",
            AblationAxis::Guidance => "guidance",
            AblationAxis::Templates => "templates",
            AblationAxis::Noise => "noise",
        })
    }
}

/// One configuration variant. Unset knobs keep the full model's settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub prompt_strategy: PromptStrategy,
    pub fusion: FusionStrategy,
    pub guidance_source: GuidanceSource,
    pub guidance_scales: Vec<usize>,
    pub templates: Option<usize>,
    /// Relative variance of Gaussian noise added to the visual prompts.
    pub noise: f64,
}

impl Default for Arm {
    fn default() -> Self {
        Self {
            name: "full".into(),
            prompt_strategy: PromptStrategy::Dual,
            fusion: FusionStrategy::DualEmbed,
            guidance_source: GuidanceSource::Visual,
            guidance_scales: vec![2, 3, 4],
            templates: None,
            noise: 0.0,
        }
    }
}

impl Arm {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut c = match self.templates {
            Some(m) => base.with_templates(m),
            None => base.clone(),
        };
        let d = &mut c.model.decoder;
        d.prompt_strategy = self.prompt_strategy;
        d.fusion = self.fusion;
        d.guidance_source = self.guidance_source;
        d.guidance_scales = self.guidance_scales.clone();
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub mious: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation (n − 1); zero for a single seed.
    pub std: f64,
    pub final_losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub axis: AblationAxis,
    pub seeds: Vec<u64>,
    pub config_fingerprint: String,
    /// Training-set fingerprint per seed, identical across arms.
    pub dataset_fingerprints: Vec<String>,
    pub arms: Vec<ArmResult>,
}

impl AblationReport {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# axis={} config={}\n", self.axis, self.config_fingerprint);
        s.push_str("arm,mean_miou,std_miou,seeds");
        for seed in &self.seeds {
            let _ = write!(s, ",seed{seed}");
        }
        s.push('\n');
        for a in &self.arms {
            let _ = write!(s, "{},{:.6},{:.6},{}", a.name, a.mean, a.std, a.mious.len());
            for m in &a.mious {
                let _ = write!(s, ",{m:.6}");
            }
            s.push('\n');
        }
        s
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Train and evaluate every arm of `axis` for each seed.
pub fn run_ablation(base: &ExperimentConfig, axis: AblationAxis, seeds: &[u64]) -> Result<AblationReport> {
    base.validate()?;
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let arms = axis.arms();
    let mut results: Vec<ArmResult> = arms
        .iter()
        .map(|a| ArmResult {
            name: a.name.clone(),
            mious: Vec::new(),
            mean: 0.0,
            std: 0.0,
            final_losses: Vec::new(),
        })
        .collect();
    let mut fingerprints = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let seeded = base.with_seed(seed);
        let mut seed_fp: Option<String> = None;
        for (arm, res) in arms.iter().zip(results.iter_mut()) {
            let cfg = arm.apply(&seeded);
            cfg.validate()?;
            let world = World::new(cfg.world.clone(), &cfg.model.encoder)?;
            let scenes = world.train_scenes()?;
            let fp = dataset_fingerprint(&scenes);
            match &seed_fp {
                None => seed_fp = Some(fp),
                Some(prev) if *prev != fp => {
                    return Err(Error::Consistency(format!(
                        "arm {} saw different training data for seed {seed}",
                        arm.name
                    )))
                }
                Some(_) => {}
            }
            let noise_seed = derive_seed(seed, "prompt-noise", 0);
            let pool = world
                .prompt_pool(world.classes(), cfg.world.templates, cfg.train.prompt_variants)?
                .iter()
                .map(|p| add_prompt_noise(p, arm.noise, noise_seed))
                .collect::<Result<Vec<_>>>()?;
            let outcome = train_model(&cfg, &scenes, &pool)?;
            let report = evaluate(&outcome.model, &world.eval_scenes()?, &pool[0], &cfg.fingerprint())?;
            log::info!("{axis} arm {} seed {seed}: mIoU {:.4}", arm.name, report.miou);
            res.mious.push(report.miou);
            res.final_losses.push(outcome.losses.last().copied().unwrap_or(f64::NAN));
        }
        fingerprints.push(seed_fp.expect("at least one arm"));
    }
    for r in &mut results {
        (r.mean, r.std) = mean_std(&r.mious);
    }
    Ok(AblationReport {
        axis,
        seeds: seeds.to_vec(),
        config_fingerprint: base.fingerprint(),
        dataset_fingerprints: fingerprints,
        arms: results,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::SceneConfig;

    #[test]
    fn axis_names_round_trip() {
        for a in AblationAxis::ALL {
            assert_eq!(a.to_string().parse::<AblationAxis>().unwrap(), a);
        }
        assert!(matches!("bogus".parse::<AblationAxis>(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn arms_cover_their_axis() {
        let names = |a: AblationAxis| a.arms().into_iter().map(|x| x.name).collect::<Vec<_>>();
        assert_eq!(names(AblationAxis::PromptStrategy), ["text", "visual", "avg"]);
        assert_eq!(names(AblationAxis::Guidance), ["fc-only", "fv2", "fv2-3", "fv2-3-4", "upsampled-fc"]);
        assert_eq!(names(AblationAxis::Templates), ["m1", "m4", "m16"]);
        let base = ExperimentConfig::default();
        let m16 = &AblationAxis::Templates.arms()[2];
        let c = m16.apply(&base);
        assert_eq!((c.world.templates, c.model.decoder.templates), (16, 16));
        c.validate().unwrap();
        for axis in AblationAxis::ALL {
            for arm in axis.arms() {
                arm.apply(&base).validate().unwrap();
            }
        }
    }

    #[test]
    fn mean_and_sample_std() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[0.7]), (0.7, 0.0));
    }

    #[test]
    fn tiny_ablation_runs_and_shares_data() {
        let mut base = ExperimentConfig::default();
        base.world.scene = SceneConfig {
            height: 32,
            width: 32,
            shapes_max: 2,
            ..SceneConfig::default()
        };
        base.world.train_scenes = 2;
        base.world.eval_scenes = 1;
        base.world.concept_exemplars = 1;
        base.train.steps = 2;
        let r = run_ablation(&base, AblationAxis::PromptStrategy, &[0, 1]).unwrap();
        assert_eq!(r.arms.len(), 3);
        assert!(r.arms.iter().all(|a| a.mious.len() == 2));
        assert_ne!(r.dataset_fingerprints[0], r.dataset_fingerprints[1]);
        let csv = r.to_csv();
        assert!(csv.lines().nth(1).unwrap().starts_with("arm,mean_miou,std_miou,seeds,seed0,seed1"));
        assert_eq!(csv.lines().count(), 5);
        assert!(matches!(
            run_ablation(&base, AblationAxis::Noise, &[]),
            Err(Error::InvalidConfig(_))
        ));
    }
}
