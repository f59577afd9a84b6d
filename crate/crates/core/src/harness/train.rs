//! Training and evaluation loops over the synthetic world.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::ExperimentConfig;
use super::metrics::{ConfusionMatrix, EvalReport};
use super::model::{SegModel, SegObjective};
use super::scene::SyntheticScene;
use super::world::{dataset_fingerprint, derive_seed, World};
use crate::decoder::{train_step, TrainState};
use crate::error::{Error, Result};
use crate::promptbank::PromptEmbeddings;

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SegModel,
    /// Batch-mean loss before each update.
    pub losses: Vec<f64>,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
}

impl TrainOutcome {
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l:e}");
        }
        s
    }
}

/// Train on `scenes`, step `i` using prompt set `i mod pool.len()`.
pub fn train_model(cfg: &ExperimentConfig, scenes: &[SyntheticScene], pool: &[PromptEmbeddings]) -> Result<TrainOutcome> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::InvalidInput("no training scenes".into()));
    }
    if pool.is_empty() {
        return Err(Error::InvalidInput("no training prompts".into()));
    }
    let model = SegModel::init(cfg.model.clone())?;
    let objectives: Vec<SegObjective> = pool
        .iter()
        .map(|p| SegObjective {
            config: cfg.model.clone(),
            prompts: p.clone(),
        })
        .collect();
    let opt = cfg.train.optimizer();
    let mut state = TrainState::new(model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.train.seed, "batches", 0));
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.train.steps);
    let bs = cfg.train.batch_size.min(scenes.len());
    for step in 0..cfg.train.steps {
        if order.len() < bs {
            let mut epoch: Vec<usize> = (0..scenes.len()).collect();
            epoch.shuffle(&mut rng);
            order.extend(epoch);
        }
        let batch: Vec<SyntheticScene> = order.drain(..bs).map(|i| scenes[i].clone()).collect();
        let loss = train_step(&mut state, &batch, &objectives[step % objectives.len()], &opt)?;
        log::debug!("step {} loss {loss:.6}", losses.len());
        losses.push(loss);
    }
    Ok(TrainOutcome {
        model: SegModel {
            config: cfg.model.clone(),
            params: state.params,
        },
        losses,
        config_fingerprint: cfg.fingerprint(),
        dataset_fingerprint: dataset_fingerprint(scenes),
    })
}

/// Build the world, train, and optionally write `model.dpec` and `loss.csv`
/// into `out_dir`.
pub fn run_training(cfg: &ExperimentConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let world = World::new(cfg.world.clone(), &cfg.model.encoder)?;
    let scenes = world.train_scenes()?;
    let pool = world.prompt_pool(world.classes(), cfg.world.templates, cfg.train.prompt_variants)?;
    let outcome = train_model(cfg, &scenes, &pool)?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        outcome.model.save(dir.join("model.dpec"))?;
        let csv = dir.join("loss.csv");
        std::fs::write(&csv, outcome.loss_csv()).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(outcome)
}

pub fn evaluate(
    model: &SegModel,
    scenes: &[SyntheticScene],
    prompts: &PromptEmbeddings,
    fingerprint: &str,
) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(prompts.categories());
    for s in scenes {
        let r = model.predict(&s.image, prompts)?;
        cm.add(&r.labels, &s.labels)?;
    }
    Ok(cm.report(fingerprint))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::scene::SceneConfig;

    fn quick() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.world.scene = SceneConfig {
            height: 32,
            width: 32,
            shapes_max: 2,
            ..SceneConfig::default()
        };
        c.world.train_scenes = 4;
        c.world.concept_exemplars = 2;
        c.train.steps = 3;
        c.train.prompt_variants = 2;
        c
    }

    #[test]
    fn steps_cycle_through_the_prompt_pool() {
        let c = quick();
        let world = World::new(c.world.clone(), &c.model.encoder).unwrap();
        let scenes = world.train_scenes().unwrap();
        let pool = world.prompt_pool(world.classes(), c.world.templates, 2).unwrap();
        let single = train_model(&c, &scenes, &pool[..1]).unwrap();
        let doubled = train_model(&c, &scenes, &[pool[0].clone(), pool[0].clone()]).unwrap();
        assert!(single.model.params.bitwise_eq(&doubled.model.params));
        let mixed = train_model(&c, &scenes, &pool).unwrap();
        assert_eq!(mixed.losses[0].to_bits(), single.losses[0].to_bits());
        assert_ne!(mixed.losses[1].to_bits(), single.losses[1].to_bits());
        assert!(matches!(train_model(&c, &scenes, &[]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let mut c = quick();
        c.train.steps = 0;
        let dir = tempfile::tempdir().unwrap();
        let out = run_training(&c, Some(dir.path())).unwrap();
        assert!(out.losses.is_empty());
        let init = SegModel::init(c.model.clone()).unwrap();
        assert!(out.model.params.bitwise_eq(&init.params));
        let saved = SegModel::load(dir.path().join("model.dpec")).unwrap();
        assert!(saved.params.bitwise_eq(&init.params));
        assert_eq!(std::fs::read_to_string(dir.path().join("loss.csv")).unwrap(), "step,loss\n");
    }

    #[test]
    fn seeded_runs_are_bitwise_reproducible() {
        let c = quick();
        let a = run_training(&c, None).unwrap();
        let b = run_training(&c, None).unwrap();
        assert_eq!(a.losses.len(), 3);
        assert!(a.losses.iter().zip(&b.losses).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(a.model.params.bitwise_eq(&b.model.params));
        let other = run_training(&c.with_seed(7), None).unwrap();
        assert!(!other.model.params.bitwise_eq(&a.model.params));
    }

    #[test]
    fn divergence_reports_step() {
        let mut c = quick();
        c.train.optimizer.lr = 1e300;
        c.train.steps = 20;
        match run_training(&c, None) {
            Err(Error::Divergence { step, .. }) => assert!(step < 20),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
