use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{constant_levels, forward_graph, DecoderConfig, LabelMap};
use crate::autograd::{Graph, Var};
use crate::costvolume::ImageFeaturePyramid;
use crate::error::{Error, Result};
use crate::optim::{AdamWConfig, AdamWState};
use crate::params::{BoundParams, ParamStore};
use crate::promptbank::PromptEmbeddings;
use crate::tensor::Tensor;

/// A scalar training loss built on a graph from bound parameters and one sample.
pub trait Objective {
    type Sample;

    fn loss(&self, g: &mut Graph, params: &BoundParams, sample: &Self::Sample) -> Result<Var>;

    /// Parameters excluded from updates.
    fn is_frozen(&self, _name: &str) -> bool {
        false
    }
}

pub fn loss_and_grads<O: Objective>(
    objective: &O,
    params: &ParamStore,
    sample: &O::Sample,
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let loss = objective.loss(&mut g, &bound, sample)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?.params(&g);
    Ok((value, grads))
}

fn loss_only<O: Objective>(objective: &O, params: &ParamStore, sample: &O::Sample) -> Result<f64> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let loss = objective.loss(&mut g, &bound, sample)?;
    Ok(g.value(loss).data()[0])
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub optimizer: AdamWState,
}

impl TrainState {
    pub fn new(params: ParamStore) -> Self {
        Self {
            params,
            optimizer: AdamWState::default(),
        }
    }
}

/// One forward/backward/update over a batch. Returns the batch-mean loss
/// measured before the update.
pub fn train_step<O: Objective>(
    state: &mut TrainState,
    batch: &[O::Sample],
    objective: &O,
    opt: &AdamWConfig,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty training batch".into()));
    }
    let step = state.optimizer.step as usize;
    let mut total = 0.0;
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for sample in batch {
        let (loss, grads) = match loss_and_grads(objective, &state.params, sample) {
            // Features collapsing or overflowing after updates is divergence,
            // not bad input.
            Err(Error::DegenerateVector(_)) if step > 0 => {
                return Err(Error::Divergence { step, loss: f64::NAN })
            }
            other => other?,
        };
        total += loss;
        for (name, g) in grads {
            if objective.is_frozen(&name) {
                continue;
            }
            match acc.get_mut(&name) {
                Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y),
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    let n = batch.len() as f64;
    let loss = total / n;
    if !loss.is_finite() || acc.values().any(|g| !g.all_finite()) {
        return Err(Error::Divergence { step, loss });
    }
    if batch.len() > 1 {
        for g in acc.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v /= n);
        }
    }
    state.optimizer.update(&mut state.params, &acc, opt)?;
    if state.params.iter().any(|(_, t)| !t.all_finite()) {
        return Err(Error::Divergence { step, loss });
    }
    Ok(loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Entries probed per parameter tensor; `0` probes every entry.
    pub entries_per_param: usize,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
    /// Scale the analytic gradient of one parameter before comparison.
    pub corrupt: Option<(String, f64)>,
    /// Use the fourth-order five-point central difference instead of the
    /// two-point one.
    pub five_point: bool,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tolerance: 1e-4,
            entries_per_param: 6,
            floor: 1e-6,
            seed: 0,
            corrupt: None,
            five_point: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub failing: Vec<String>,
    pub per_param: BTreeMap<String, f64>,
    pub entries_checked: usize,
}

/// Compare analytic parameter gradients against central differences
/// `(f(θ + ε) − f(θ − ε)) / 2ε` (or the five-point stencil) on randomly
/// chosen entries.
pub fn grad_check<O: Objective>(
    objective: &O,
    params: &ParamStore,
    sample: &O::Sample,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (_, mut grads) = loss_and_grads(objective, params, sample)?;
    if let Some((name, factor)) = &cfg.corrupt {
        let g = grads
            .get_mut(name)
            .ok_or_else(|| Error::InvalidInput(format!("cannot corrupt unknown parameter {name:?}")))?;
        *g = g.scale(*factor);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    let mut per_param = BTreeMap::new();
    let mut entries_checked = 0;
    for (name, analytic) in &grads {
        let n = analytic.len();
        let entries: Vec<usize> = if cfg.entries_per_param == 0 || cfg.entries_per_param >= n {
            (0..n).collect()
        } else {
            (0..cfg.entries_per_param).map(|_| rng.random_range(0..n)).collect()
        };
        let mut worst: f64 = 0.0;
        for i in entries {
            let original = work.get(name)?.data()[i];
            let mut at = |offset: f64| -> Result<f64> {
                work.get_mut(name).expect("present").data_mut()[i] = original + offset;
                loss_only(objective, &work, sample)
            };
            let h = cfg.eps;
            let numeric = if cfg.five_point {
                (-at(2.0 * h)? + 8.0 * at(h)? - 8.0 * at(-h)? + at(-2.0 * h)?) / (12.0 * h)
            } else {
                (at(h)? - at(-h)?) / (2.0 * h)
            };
            work.get_mut(name).expect("present").data_mut()[i] = original;
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            worst = worst.max(rel);
            entries_checked += 1;
        }
        per_param.insert(name.clone(), worst);
    }
    let max_rel_err = per_param.values().copied().fold(0.0, f64::max);
    let failing = per_param
        .iter()
        .filter(|(_, &e)| e >= cfg.tolerance)
        .map(|(k, _)| k.clone())
        .collect();
    Ok(GradCheckReport {
        max_rel_err,
        failing,
        per_param,
        entries_checked,
    })
}

/// Frozen image features, prompts and a target map.
#[derive(Clone, Debug)]
pub struct DecoderSample {
    pub pyramid: ImageFeaturePyramid,
    pub prompts: PromptEmbeddings,
    pub labels: LabelMap,
}

/// BCE of the decoder (plus cost embedding) on frozen features.
#[derive(Clone, Debug)]
pub struct DecoderObjective {
    pub config: DecoderConfig,
}

impl Objective for DecoderObjective {
    type Sample = DecoderSample;

    fn loss(&self, g: &mut Graph, params: &BoundParams, s: &DecoderSample) -> Result<Var> {
        let e = g.constant(s.pyramid.embedding.clone());
        let levels = constant_levels(g, &s.pyramid)?;
        let logits = forward_graph(g, params, &self.config, e, &levels, &s.prompts)?;
        g.bce_loss(logits, &s.labels.labels)
    }
}
