//! Rectified flow matching: loss, time sampling, Euler sampling, training.
//!
//! Latents follow `Z_t = t·Z0 + (1−t)·ε`, so `t = 0` is pure noise and
//! `t = 1` is data. The network regresses `ε − Z0`, which is `−dZ_t/dt`;
//! sampling therefore starts from noise at `t = 0` and steps
//! `Z ← Z − Δ·v̂` up to `t = 1`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::Graph;
use crate::denoiser::{ConditionTokens, Denoiser};
use crate::error::{Error, Result};
use crate::latent::{interpolate, shuffle_parts, AssetLatent, NoiseLevel};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

/// Anything that predicts a velocity for an `NK×C` latent.
pub trait VelocityModel {
    fn tokens_per_part(&self) -> usize;
    fn width(&self) -> usize;
    fn velocity(&self, zt: &Tensor, t: NoiseLevel, cond: &ConditionTokens, slots: &[usize]) -> Result<Tensor>;
}

impl VelocityModel for Denoiser {
    fn tokens_per_part(&self) -> usize {
        self.config().tokens_per_part
    }

    fn width(&self) -> usize {
        self.config().width
    }

    fn velocity(&self, zt: &Tensor, t: NoiseLevel, cond: &ConditionTokens, slots: &[usize]) -> Result<Tensor> {
        self.forward(zt, t, cond, slots)
    }
}

/// Standard-normal tensor of the given shape.
pub fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)).collect();
    Tensor::new(alloc::vec![rows, cols], data).expect("positive extents")
}

/// Uniform draw from `[0, 1)`, one per asset.
pub fn sample_time<R: Rng + ?Sized>(rng: &mut R) -> NoiseLevel {
    NoiseLevel::new(rng.random::<f64>()).expect("unit interval")
}

/// Collapses a list of per-part noise levels into the asset's single level.
/// All entries must be identical.
pub fn shared_level(levels: &[NoiseLevel]) -> Result<NoiseLevel> {
    let first = *levels.first().ok_or_else(|| Error::Contract("no noise level given".into()))?;
    if levels.iter().any(|&t| t != first) {
        return Err(Error::Contract(format!(
            "noise level must be shared across all parts, got {:?}",
            levels.iter().map(|t| t.get()).collect::<Vec<_>>()
        )));
    }
    Ok(first)
}

/// Mean over all `NK×C` entries of `((ε − Z0) − v(Z_t, t, c))²`.
///
/// `levels` holds one entry per part (or a single entry); they must agree.
pub fn flow_loss<M: VelocityModel + ?Sized>(
    model: &M,
    z0: &AssetLatent,
    eps: &Tensor,
    levels: &[NoiseLevel],
    cond: &ConditionTokens,
) -> Result<f64> {
    let t = shared_level(levels)?;
    let clean = z0.concat();
    let zt = interpolate(&clean, eps, t)?;
    let slots: Vec<usize> = z0.parts().iter().map(|p| p.slot).collect();
    let v = model.velocity(&zt, t, cond, &slots)?;
    crate::tensor::ensure_same_shape("flow_loss", &v, eps)?;
    let n = v.len() as f64;
    let total: f64 = eps
        .data()
        .iter()
        .zip(clean.data())
        .zip(v.data())
        .map(|((e, z), v)| {
            let r = (e - z) - v;
            r * r
        })
        .sum();
    Ok(total / n)
}

/// Loss value and parameter gradients (store order) for one asset.
pub fn flow_loss_and_grads(
    model: &Denoiser,
    z0: &AssetLatent,
    eps: &Tensor,
    t: NoiseLevel,
    cond: &ConditionTokens,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let clean = z0.concat();
    let zt = interpolate(&clean, eps, t)?;
    let target: Vec<f64> = eps.data().iter().zip(clean.data()).map(|(e, z)| e - z).collect();
    let target = Tensor::new(eps.shape().to_vec(), target)?;
    let slots: Vec<usize> = z0.parts().iter().map(|p| p.slot).collect();

    let mut g = Graph::new();
    let p = model.params().bind(&mut g, true);
    let z = g.constant(zt);
    let c = g.constant(cond.tokens().clone());
    let tgt = g.constant(target);
    let v = model.forward_on_graph(&mut g, &p, z, t, c, &slots)?;
    let diff = g.sub(v, tgt)?;
    let sq = g.mul(diff, diff)?;
    let loss = g.mean(sq);
    let value = g.value(loss).data()[0];
    let mut grads = g.backward(loss)?;
    Ok((value, p.vars().iter().map(|&var| grads.take(var)).collect()))
}

/// Euler integration settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    pub num_steps: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { num_steps: 50 }
    }
}

/// Integrates from `noise` at `t = 0` to `t = 1` with a uniform grid shared
/// by every part, returning the final latent split into `n` parts.
pub fn euler_sample_from<M: VelocityModel + ?Sized>(
    noise: Tensor,
    cond: &ConditionTokens,
    n: usize,
    model: &M,
    config: &SamplerConfig,
) -> Result<AssetLatent> {
    if config.num_steps == 0 {
        return Err(Error::Config("num_steps must be at least 1".into()));
    }
    let k = model.tokens_per_part();
    let slots: Vec<usize> = (0..n).collect();
    let dt = 1.0 / config.num_steps as f64;
    let mut z = noise;
    for step in 0..config.num_steps {
        let t = NoiseLevel::new(step as f64 * dt)?;
        let v = model.velocity(&z, t, cond, &slots)?;
        crate::tensor::ensure_same_shape("euler_sample", &v, &z)?;
        for (zi, vi) in z.data_mut().iter_mut().zip(v.data()) {
            *zi -= dt * vi;
        }
    }
    AssetLatent::split(&z, n, k)
}

/// Draws standard-normal noise for `n` parts and integrates it.
pub fn euler_sample<M: VelocityModel + ?Sized, R: Rng + ?Sized>(
    cond: &ConditionTokens,
    n: usize,
    model: &M,
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<AssetLatent> {
    let noise = gaussian(rng, n * model.tokens_per_part(), model.width());
    euler_sample_from(noise, cond, n, model, config)
}

/// How batches are grouped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucketing {
    /// Every batch holds assets with one part count; no padding or masks.
    #[default]
    ByPartCount,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_monolithic() -> f64 {
    0.3
}
fn yes() -> bool {
    true
}

/// Optimization recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingPlan {
    pub steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Probability that a step trains on single-part (whole-object) latents.
    #[serde(default = "default_monolithic")]
    pub monolithic_fraction: f64,
    #[serde(default = "yes")]
    pub shuffle_parts: bool,
    #[serde(default)]
    pub bucketing: Bucketing,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
}

impl TrainingPlan {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.monolithic_fraction) {
            return Err(Error::Config(format!("monolithic_fraction {} outside [0, 1]", self.monolithic_fraction)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Seed of the step-`step` batch; depends only on the plan seed and the step.
    pub fn batch_seed(&self, step: u64) -> u64 {
        // splitmix64 finalizer
        let mut x = self.seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^ (x >> 31)
    }
}

/// One training asset with its condition.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub latent: AssetLatent,
    /// Whole-object latent (one part) of the same asset, if available.
    pub monolithic: Option<AssetLatent>,
    pub cond: ConditionTokens,
}

/// Adam moments, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for (name, t) in params.iter() {
            m.register(name, Tensor::zeros(t.shape()));
            v.register(name, Tensor::zeros(t.shape()));
        }
        Self { step: 0, m, v }
    }

    fn update(&mut self, params: &mut ParamStore, grads: &[Tensor], plan: &TrainingPlan) {
        self.step += 1;
        let bc1 = 1.0 - libm::pow(plan.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(plan.beta2, self.step as f64);
        for (((p, m), v), g) in params.tensors_mut().zip(self.m.tensors_mut()).zip(self.v.tensors_mut()).zip(grads) {
            for (((pv, mv), vv), &gv) in
                p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data())
            {
                *mv = plan.beta1 * *mv + (1.0 - plan.beta1) * gv;
                *vv = plan.beta2 * *vv + (1.0 - plan.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= plan.learning_rate * (mhat / (libm::sqrt(vhat) + plan.adam_eps));
            }
        }
    }
}

/// Per-step training record.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub t_mean: f64,
    /// Part count → number of batch items with that count.
    pub part_counts: BTreeMap<usize, usize>,
}

struct Buckets<'a> {
    by_parts: BTreeMap<usize, Vec<(&'a AssetLatent, &'a ConditionTokens)>>,
    monolithic: Vec<(&'a AssetLatent, &'a ConditionTokens)>,
}

impl<'a> Buckets<'a> {
    fn new(data: &'a [TrainingExample]) -> Self {
        let mut by_parts: BTreeMap<usize, Vec<_>> = BTreeMap::new();
        let mut monolithic = Vec::new();
        for ex in data {
            by_parts.entry(ex.latent.num_parts()).or_default().push((&ex.latent, &ex.cond));
            if let Some(m) = &ex.monolithic {
                monolithic.push((m, &ex.cond));
            }
        }
        Self { by_parts, monolithic }
    }

    fn draw<R: Rng>(&self, rng: &mut R, plan: &TrainingPlan, total: usize) -> Vec<(&'a AssetLatent, &'a ConditionTokens)> {
        let use_mono = !self.monolithic.is_empty() && rng.random::<f64>() < plan.monolithic_fraction;
        let pool = if use_mono {
            &self.monolithic
        } else {
            // Bucket chosen with probability proportional to its size.
            let mut pick = rng.random_range(0..total);
            let mut chosen = None;
            for bucket in self.by_parts.values() {
                if pick < bucket.len() {
                    chosen = Some(bucket);
                    break;
                }
                pick -= bucket.len();
            }
            chosen.expect("pick < total")
        };
        (0..plan.batch_size).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}

/// One draw of a training batch: a (possibly reordered) latent, its noise and level.
#[derive(Debug, Clone)]
pub struct BatchItem<'a> {
    pub latent: AssetLatent,
    pub eps: Tensor,
    pub t: NoiseLevel,
    pub cond: &'a ConditionTokens,
}

/// Loss and per-parameter gradients of one batch item.
pub type ItemGrads = (f64, Vec<Option<Tensor>>);

/// Evaluates batch items. Results must come back in item order; the caller
/// reduces them sequentially, so any execution order gives identical sums.
pub trait ItemRunner {
    fn run(&self, model: &Denoiser, items: &[BatchItem<'_>]) -> Vec<Result<ItemGrads>>;
}

/// Evaluates items one after another.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ItemRunner for Sequential {
    fn run(&self, model: &Denoiser, items: &[BatchItem<'_>]) -> Vec<Result<ItemGrads>> {
        items.iter().map(|it| flow_loss_and_grads(model, &it.latent, &it.eps, it.t, it.cond)).collect()
    }
}

/// [`train_with`] using [`Sequential`].
pub fn train(
    data: &[TrainingExample],
    plan: &TrainingPlan,
    model: &mut Denoiser,
    state: &mut AdamState,
    on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    train_with(data, plan, model, state, &Sequential, on_step)
}

/// Runs `plan.steps` optimizer steps after `state.step`, calling `on_step`
/// after each. Every step's randomness derives from
/// [`TrainingPlan::batch_seed`], so a resumed run draws the same batches as
/// an uninterrupted one.
pub fn train_with<E: ItemRunner + ?Sized>(
    data: &[TrainingExample],
    plan: &TrainingPlan,
    model: &mut Denoiser,
    state: &mut AdamState,
    runner: &E,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    plan.validate()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let buckets = Buckets::new(data);
    let mut trace = Vec::with_capacity(plan.steps as usize);
    let first = state.step + 1;
    for step in first..first + plan.steps {
        let batch_seed = plan.batch_seed(step);
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let items: Vec<BatchItem<'_>> = buckets
            .draw(&mut rng, plan, data.len())
            .into_iter()
            .map(|(latent, cond)| {
                let latent = if plan.shuffle_parts { shuffle_parts(latent, &mut rng) } else { latent.clone() };
                let t = sample_time(&mut rng);
                let eps = gaussian(&mut rng, latent.num_parts() * latent.tokens_per_part(), latent.width());
                BatchItem { latent, eps, t, cond }
            })
            .collect();

        let mut acc: Vec<Tensor> = model.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let mut loss_sum = 0.0;
        let mut t_sum = 0.0;
        let mut part_counts = BTreeMap::new();
        for (item, result) in items.iter().zip(runner.run(model, &items)) {
            let (loss, grads) = result?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, batch_seed });
            }
            loss_sum += loss;
            t_sum += item.t.get();
            *part_counts.entry(item.latent.num_parts()).or_insert(0) += 1;
            for (a, g) in acc.iter_mut().zip(grads) {
                if let Some(g) = g {
                    for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                        *x += y;
                    }
                }
            }
        }
        let b = items.len() as f64;
        for a in &mut acc {
            for x in a.data_mut() {
                *x /= b;
            }
        }
        if acc.iter().any(|a| !a.all_finite()) {
            return Err(Error::NonFiniteLoss { step, batch_seed });
        }
        state.update(model.params_mut(), &acc, plan);
        let record = StepRecord { step, loss: loss_sum / b, t_mean: t_sum / b, part_counts };
        on_step(&record);
        trace.push(record);
    }
    Ok(trace)
}
