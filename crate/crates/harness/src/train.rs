//! Training loop: one-cycle learning rate, Adam with decoupled weight
//! decay, gradient accumulation over scenes, and deterministic batching.

use std::f64::consts::PI;

use m3fuse_core::losses::LossReport;
use m3fuse_core::model::{Model, ModelError, ProposalSource, ScenePlan};
use m3fuse_core::numerics::{Adam, GradStore, Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::PipelineConfig;
use crate::scene::Scene;
use crate::HarnessError;

/// Learning rate rises from `peak / START_DIV` to `peak` over the warm-up,
/// then falls to `peak / final_div`, both along half-cosines.
pub const START_DIV: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OneCycle {
    pub peak: f64,
    pub total_steps: usize,
    pub warmup_fraction: f64,
    pub final_div: f64,
}

impl OneCycle {
    pub fn from_config(cfg: &PipelineConfig) -> Self {
        Self {
            peak: cfg.optim.peak_lr,
            total_steps: cfg.optim.steps,
            warmup_fraction: cfg.optim.warmup_fraction,
            final_div: cfg.optim.final_div,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        let ramp = |from: f64, to: f64, t: f64| to + (from - to) * 0.5 * (1.0 + (PI * t.clamp(0.0, 1.0)).cos());
        let warm = (self.total_steps as f64 * self.warmup_fraction).round() as usize;
        if step < warm {
            ramp(self.peak / START_DIV, self.peak, step as f64 / warm as f64)
        } else {
            let rest = self.total_steps.saturating_sub(warm).max(1);
            ramp(self.peak, self.peak / self.final_div, (step - warm) as f64 / rest as f64)
        }
    }
}

/// Builds the model with parameters drawn from the configured seed.
pub fn build_model(cfg: &PipelineConfig) -> Result<(Model, ParamStore), HarnessError> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::new(&mut store, &mut rng, cfg.model_config()?)?;
    if cfg.transformer.disabled {
        model.disable_transformers(&mut store);
    }
    Ok((model, store))
}

/// Plans every scene that has points in range; empty scenes are dropped.
pub fn plan_scenes(model: &Model, scenes: &[Scene]) -> Result<Vec<ScenePlan>, HarnessError> {
    let mut plans = Vec::with_capacity(scenes.len());
    for s in scenes {
        match model.plan(&s.cloud, &s.gts()) {
            Ok(p) => plans.push(p),
            Err(ModelError::EmptyScene) => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(plans)
}

pub struct Trainer {
    pub config: PipelineConfig,
    pub model: Model,
    pub store: ParamStore,
    pub adam: Adam,
    pub schedule: OneCycle,
    pub workers: usize,
    plans: Vec<ScenePlan>,
}

impl Trainer {
    pub fn new(config: PipelineConfig, scenes: &[Scene], workers: usize) -> Result<Self, HarnessError> {
        let (model, store) = build_model(&config)?;
        let plans = plan_scenes(&model, scenes)?;
        if plans.is_empty() {
            return Err(HarnessError::Validation("training needs at least one scene with points in range".into()));
        }
        let o = &config.optim;
        let adam = Adam::new(&store, o.beta1, o.beta2, o.eps, o.weight_decay);
        Ok(Self {
            schedule: OneCycle::from_config(&config),
            config,
            model,
            store,
            adam,
            workers: workers.max(1),
            plans,
        })
    }

    pub fn step_count(&self) -> usize {
        self.adam.step_count() as usize
    }

    pub fn num_scenes(&self) -> usize {
        self.plans.len()
    }

    /// Scenes used by optimizer step `step`: consecutive slices of
    /// per-epoch permutations seeded by `(seed, epoch)`.
    pub fn batch_for_step(&self, step: usize) -> Vec<usize> {
        let n = self.plans.len();
        let bs = self.config.optim.batch_size;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (step * bs..(step + 1) * bs)
            .map(|pos| {
                let epoch = pos / n;
                if cached.as_ref().is_none_or(|(e, _)| *e != epoch) {
                    let mut order: Vec<usize> = (0..n).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
                    rng.set_stream(epoch as u64 + 1);
                    order.shuffle(&mut rng);
                    cached = Some((epoch, order));
                }
                cached.as_ref().expect("filled above").1[pos % n]
            })
            .collect()
    }

    fn scene_gradient(&self, plan: &ScenePlan) -> Result<(GradStore, LossReport), HarnessError> {
        let mut g = Graph::new();
        let out = self.model.forward_train(&mut g, &self.store, plan, &ProposalSource::FromRpn)?;
        let report = out.report(&g, &self.config.model_config()?.loss).map_err(|e| HarnessError::Numeric {
            step: self.step_count(),
            detail: e.to_string(),
        })?;
        let grads = g.backward(out.total).map_err(ModelError::from)?;
        Ok((g.param_grads(&grads, &self.store), report))
    }

    /// One optimizer step over the next batch. Gradients are averaged over
    /// the batch in scene order, so the worker count does not change them.
    pub fn step(&mut self) -> Result<LossReport, HarnessError> {
        let step = self.step_count();
        let batch = self.batch_for_step(step);
        let results: Vec<Result<(GradStore, LossReport), HarnessError>> = if self.workers <= 1 || batch.len() <= 1 {
            batch.iter().map(|&i| self.scene_gradient(&self.plans[i])).collect()
        } else {
            let chunk = batch.len().div_ceil(self.workers);
            let this = &*self;
            std::thread::scope(|s| {
                let handles: Vec<_> = batch
                    .chunks(chunk)
                    .map(|part| s.spawn(move || part.iter().map(|&i| this.scene_gradient(&this.plans[i])).collect::<Vec<_>>()))
                    .collect();
                handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
            })
        };
        let mut total = GradStore::zeros_like(&self.store);
        let mut mean = LossReport::default();
        let k = batch.len() as f64;
        for r in results {
            let (g, rep) = r?;
            total.accumulate(&g);
            mean.l_cls += rep.l_cls / k;
            mean.l_reg += rep.l_reg / k;
            mean.l_iou += rep.l_iou / k;
            mean.l_ref += rep.l_ref / k;
            mean.total += rep.total / k;
            mean.num_positive += rep.num_positive;
        }
        total.scale(1.0 / k);
        let clip = self.config.optim.grad_clip;
        let norm = total.norm();
        if !norm.is_finite() {
            return Err(HarnessError::Numeric {
                step,
                detail: "gradient norm is not finite".into(),
            });
        }
        if clip > 0.0 && norm > clip {
            total.scale(clip / norm);
        }
        let lr = self.schedule.lr(step);
        self.adam.step(&mut self.store, &total, lr).map_err(|e| HarnessError::Numeric {
            step,
            detail: e.to_string(),
        })?;
        Ok(mean)
    }

    /// Runs until `steps` optimizer steps have been taken in total.
    pub fn run(&mut self, steps: usize, mut on_step: impl FnMut(usize, &LossReport)) -> Result<(), HarnessError> {
        while self.step_count() < steps {
            let step = self.step_count();
            let report = self.step()?;
            on_step(step, &report);
        }
        Ok(())
    }
}
