//! Hardness-guided bilevel meta-training.
//!
//! Outer loop: sample `m` tasks, adapt a copy of the parameters on each
//! support set, take first-order meta-gradients on the query sets, weight
//! them by each task's share of the batch loss and apply one SGD step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{set_loss, ModelParams, Objective};
use crate::optim::{clip_global_norm, linear_lr, Sgd, SgdConfig};
use crate::params::ParamGroup;
use crate::rng::RngKey;
use crate::sampler::{sample_batch, SamplerConfig, SamplingMode, SourcePool, Task};

/// `base_lr * sqrt(k / base_batch)`.
pub fn scaled_lr(base_lr: f64, k: usize, base_batch: usize) -> f64 {
    base_lr * (k as f64 / base_batch as f64).sqrt()
}

/// How per-task meta-gradients are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Loss-proportional task weights.
    #[default]
    Hardness,
    /// Every task weighted `1/m`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Outer rate; defaults to `scaled_lr(base_lr, k, base_batch)`.
    pub alpha: Option<f64>,
    /// Inner rate; same default as `alpha`.
    pub beta: Option<f64>,
    pub lambda: f64,
    pub k: usize,
    /// Tasks per outer iteration.
    pub batch_size: usize,
    pub adaptation_steps: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub base_lr: f64,
    pub base_batch: usize,
    pub max_outer_iters: usize,
    /// Outer iterations without dev improvement before stopping.
    pub patience: usize,
    pub dev_episodes: usize,
    /// Dev evaluation period in outer iterations.
    pub eval_every: usize,
    pub mode: SamplingMode,
    pub weighting: Weighting,
    pub domain_weights: Option<Vec<f64>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: None,
            beta: None,
            lambda: 1.0,
            k: 5,
            batch_size: 4,
            adaptation_steps: 2,
            momentum: 0.9,
            weight_decay: 1e-6,
            grad_clip: 5.0,
            dropout: 0.2,
            base_lr: 1e-2,
            base_batch: 32,
            max_outer_iters: 300,
            patience: 20,
            dev_episodes: 16,
            eval_every: 1,
            mode: SamplingMode::Uniform,
            weighting: Weighting::Hardness,
            domain_weights: None,
        }
    }
}

impl TrainConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha
            .unwrap_or_else(|| scaled_lr(self.base_lr, self.k, self.base_batch))
    }

    pub fn beta(&self) -> f64 {
        self.beta
            .unwrap_or_else(|| scaled_lr(self.base_lr, self.k, self.base_batch))
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            k: self.k,
            mode: self.mode,
            domain_weights: self.domain_weights.clone(),
            seed,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.alpha() > 0.0) || !(self.beta() >= 0.0) {
            return bad("alpha must be > 0 and beta >= 0");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be >= 0");
        }
        if self.k == 0 || self.batch_size == 0 || self.base_batch == 0 {
            return bad("k, batch_size and base_batch must be >= 1");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.eval_every == 0 || self.dev_episodes == 0 {
            return bad("eval_every and dev_episodes must be >= 1");
        }
        Ok(())
    }
}

/// Query-set losses after inner adaptation, with first-order meta-gradients.
#[derive(Debug, Clone)]
pub struct TaskLosses {
    pub lab: f64,
    pub cls: f64,
    /// `lab + lambda * cls`
    pub total: f64,
    /// `theta`: ∇θ L_i, `phi`: ∇φ L^lab_i, `omega`: ∇ω L^cls_i.
    pub meta_grads: ModelParams,
}

fn describe(task: &Task, pool: &SourcePool) -> String {
    format!(
        "domain={} support={:?} query={:?}",
        pool.domains.get(task.domain).map_or("?", |d| d.name.as_str()),
        task.support,
        task.query
    )
}

fn objective(cfg: &TrainConfig) -> Objective {
    Objective {
        lambda: cfg.lambda,
        classify: true,
    }
}

/// Adapts a copy of `params` on the support set, then evaluates on the query set.
/// Returns the adapted copy and the query losses (and gradients when `want_grad`).
fn adapt_and_query(
    params: &ModelParams,
    pool: &SourcePool,
    task: &Task,
    cfg: &TrainConfig,
    dropout: f64,
    key: RngKey,
    want_grad: bool,
) -> Result<(ModelParams, crate::model::SetLoss, Option<ModelParams>)> {
    let mut rng = key.child("dropout").stream();
    let use_rng = dropout > 0.0;
    let beta = cfg.beta();
    let obj = objective(cfg);
    let mut adapted = params.clone();
    let support = pool.support(task);
    let fail = || Error::NonFiniteLoss {
        task: describe(task, pool),
    };
    for _ in 0..cfg.adaptation_steps {
        let (loss, grad) = set_loss(
            &adapted,
            &support,
            task.domain,
            obj,
            dropout,
            use_rng.then_some(&mut rng),
            true,
        )
        .map_err(|e| match e {
            Error::NonFiniteScore => fail(),
            other => other,
        })?;
        let grad = grad.expect("gradient requested");
        if !(loss.lab.is_finite() && loss.cls.is_finite()) || grad.first_non_finite().is_some() {
            return Err(fail());
        }
        adapted.theta.axpy(-beta, &grad.theta);
        adapted.phi.axpy(-beta, &grad.phi);
        if cfg.lambda != 0.0 {
            if let (Some(o), Some(g)) = (&mut adapted.omega, &grad.omega) {
                o.axpy(-beta, g);
            }
        }
    }
    let query = pool.query(task);
    let (loss, grad) = set_loss(
        &adapted,
        &query,
        task.domain,
        obj,
        dropout,
        use_rng.then_some(&mut rng),
        want_grad,
    )
    .map_err(|e| match e {
        Error::NonFiniteScore => fail(),
        other => other,
    })?;
    if !(loss.lab.is_finite() && loss.cls.is_finite()) {
        return Err(fail());
    }
    Ok((adapted, loss, grad))
}

/// One inner adaptation (plain SGD at rate beta, `adaptation_steps` steps on the
/// support set) followed by query-set evaluation. `params` is not modified.
pub fn inner_adapt(
    params: &ModelParams,
    pool: &SourcePool,
    task: &Task,
    cfg: &TrainConfig,
    key: RngKey,
) -> Result<TaskLosses> {
    let (_, loss, grad) = adapt_and_query(params, pool, task, cfg, cfg.dropout, key, true)?;
    let meta_grads = grad.expect("gradient requested");
    if let Some(name) = meta_grads.first_non_finite() {
        return Err(Error::NonFiniteGradient(name));
    }
    Ok(TaskLosses {
        lab: loss.lab,
        cls: loss.cls,
        total: loss.lab + cfg.lambda * loss.cls,
        meta_grads,
    })
}

/// Per-task weights for each parameter group; every vector sums to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardnessScores {
    pub gamma_theta: Vec<f64>,
    pub gamma_phi: Vec<f64>,
    pub gamma_omega: Vec<f64>,
}

impl HardnessScores {
    pub fn uniform(m: usize) -> Self {
        let u = vec![1.0 / m as f64; m];
        HardnessScores {
            gamma_theta: u.clone(),
            gamma_phi: u.clone(),
            gamma_omega: u,
        }
    }
}

/// Tolerance below zero accepted as rounding in a CRF negative log-likelihood.
const LOSS_ROUNDING: f64 = 1e-9;

fn loss_shares(values: &[f64]) -> Result<Vec<f64>> {
    let mut clean = Vec::with_capacity(values.len());
    for &v in values {
        if v.is_nan() || v < -LOSS_ROUNDING {
            return Err(Error::NegativeLoss(v));
        }
        if v.is_infinite() {
            return Err(Error::NonFiniteLoss {
                task: format!("loss {v}"),
            });
        }
        clean.push(v.max(0.0));
    }
    let sum: f64 = clean.iter().sum();
    let m = clean.len() as f64;
    Ok(if sum > 0.0 {
        clean.iter().map(|v| v / sum).collect()
    } else {
        vec![1.0 / m; clean.len()]
    })
}

/// Loss-share task weights; a zero-sum group falls back to uniform.
pub fn hardness(batch: &[TaskLosses]) -> Result<HardnessScores> {
    let lab: Vec<f64> = batch.iter().map(|t| t.lab).collect();
    let cls: Vec<f64> = batch.iter().map(|t| t.cls).collect();
    let total: Vec<f64> = batch.iter().map(|t| t.total).collect();
    hardness_from_losses(&total, &lab, &cls)
}

/// [`hardness`] on bare loss vectors.
pub fn hardness_from_losses(total: &[f64], lab: &[f64], cls: &[f64]) -> Result<HardnessScores> {
    if total.is_empty() || total.len() != lab.len() || lab.len() != cls.len() {
        return Err(Error::InvalidBatchSize);
    }
    Ok(HardnessScores {
        gamma_theta: loss_shares(total)?,
        gamma_phi: loss_shares(lab)?,
        gamma_omega: loss_shares(cls)?,
    })
}

/// Gradient norms of one outer update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

/// Weighted sum of the meta-gradients, group by group.
pub fn aggregate(batch: &[TaskLosses], scores: &HardnessScores) -> Result<ModelParams> {
    let m = batch.len();
    if m == 0 || scores.gamma_theta.len() != m || scores.gamma_phi.len() != m || scores.gamma_omega.len() != m {
        return Err(Error::InvalidBatchSize);
    }
    let mut agg = batch[0].meta_grads.zeros_like();
    for (i, t) in batch.iter().enumerate() {
        agg.theta.axpy(scores.gamma_theta[i], &t.meta_grads.theta);
        agg.phi.axpy(scores.gamma_phi[i], &t.meta_grads.phi);
        if let (Some(a), Some(g)) = (&mut agg.omega, &t.meta_grads.omega) {
            a.axpy(scores.gamma_omega[i], g);
        }
    }
    Ok(agg)
}

/// Applies the weighted meta-gradient: global-norm clip, then SGD with
/// momentum and weight decay at rate `lr`.
pub fn outer_step(
    params: &mut ModelParams,
    batch: &[TaskLosses],
    scores: &HardnessScores,
    cfg: &TrainConfig,
    optimizer: &mut Sgd<ModelParams>,
    lr: f64,
) -> Result<StepStats> {
    let mut agg = aggregate(batch, scores)?;
    if let Some(name) = agg.first_non_finite() {
        return Err(Error::NonFiniteGradient(name));
    }
    let (grad_norm, clipped_grad_norm) = clip_global_norm(&mut agg, cfg.grad_clip);
    // With lambda = 0 the domain head takes no part in the objective.
    let frozen = (cfg.lambda == 0.0).then(|| (params.omega.clone(), optimizer.velocity.omega.clone()));
    optimizer.step(params, &agg, lr);
    if let Some((omega, velocity)) = frozen {
        params.omega = omega;
        optimizer.velocity.omega = velocity;
    }
    Ok(StepStats {
        grad_norm,
        clipped_grad_norm,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub domain: String,
    pub lab: f64,
    pub cls: f64,
    pub total: f64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub lr: f64,
    pub tasks: Vec<TaskRecord>,
    pub gamma_theta: Vec<f64>,
    pub gamma_phi: Vec<f64>,
    pub gamma_omega: Vec<f64>,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    /// Mean dev-episode query loss after this iteration, when evaluated.
    pub dev_lab: Option<f64>,
}

/// Mutable training state; enough to resume a run exactly.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: usize,
    pub params: ModelParams,
    pub optimizer: Sgd<ModelParams>,
    pub best_params: ModelParams,
    pub best_dev: f64,
    pub initial_dev: f64,
    pub since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    IterationCap,
    Patience,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best dev evaluation.
    pub params: ModelParams,
    pub state: TrainState,
    pub log: Vec<IterationRecord>,
    pub stop: StopReason,
}

/// Bilevel trainer over a source pool, with early stopping on a fixed set
/// of dev episodes.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub seed: u64,
    pool: &'a SourcePool,
    dev_pool: &'a SourcePool,
    dev_tasks: Vec<Task>,
    parallel: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(pool: &'a SourcePool, dev_pool: &'a SourcePool, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if pool.num_domains() < 2 {
            return Err(Error::Config(format!(
                "meta-training needs at least 2 source domains, got {}",
                pool.num_domains()
            )));
        }
        let sampler = cfg.sampler(seed);
        pool.validate(&sampler)?;
        let dev_sampler = SamplerConfig {
            mode: SamplingMode::Uniform,
            domain_weights: None,
            ..sampler
        };
        dev_pool.validate(&dev_sampler)?;
        let dev_tasks = sample_batch(dev_pool, &dev_sampler, cfg.dev_episodes, RngKey::new(seed).child("dev"))?;
        Ok(Trainer {
            cfg,
            seed,
            pool,
            dev_pool,
            dev_tasks,
            parallel: true,
        })
    }

    /// Run the per-task work on the calling thread only.
    pub fn sequential(mut self) -> Self {
        self.parallel = false;
        self
    }

    pub fn dev_tasks(&self) -> &[Task] {
        &self.dev_tasks
    }

    fn map_tasks<T, F>(&self, n: usize, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(usize) -> Result<T> + Sync + Send,
    {
        if self.parallel {
            (0..n).into_par_iter().map(f).collect()
        } else {
            (0..n).map(f).collect()
        }
    }

    /// Mean query `L^lab` over the dev episodes, dropout off.
    pub fn dev_loss(&self, params: &ModelParams) -> Result<f64> {
        let key = RngKey::new(self.seed).child("dev-eval");
        let losses = self.map_tasks(self.dev_tasks.len(), |i| {
            adapt_and_query(
                params,
                self.dev_pool,
                &self.dev_tasks[i],
                &self.cfg,
                0.0,
                key.index(i as u64),
                false,
            )
            .map(|(_, l, _)| l.lab)
        })?;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }

    pub fn init_state(&self, params: ModelParams) -> Result<TrainState> {
        params.check_dims()?;
        let dev = self.dev_loss(&params)?;
        Ok(TrainState {
            iteration: 0,
            optimizer: Sgd::new(self.cfg.sgd(), &params),
            best_params: params.clone(),
            params,
            best_dev: dev,
            initial_dev: dev,
            since_best: 0,
        })
    }

    pub fn is_done(&self, state: &TrainState) -> Option<StopReason> {
        if state.iteration >= self.cfg.max_outer_iters {
            Some(StopReason::IterationCap)
        } else if state.since_best >= self.cfg.patience {
            Some(StopReason::Patience)
        } else {
            None
        }
    }

    /// The tasks of outer iteration `iteration`.
    pub fn batch_for(&self, iteration: usize) -> Result<Vec<Task>> {
        let key = RngKey::new(self.seed).child("tasks").index(iteration as u64);
        sample_batch(self.pool, &self.cfg.sampler(self.seed), self.cfg.batch_size, key)
    }

    /// One outer iteration.
    pub fn step(&self, state: &mut TrainState) -> Result<IterationRecord> {
        let it = state.iteration;
        let tasks = self.batch_for(it)?;
        let key = RngKey::new(self.seed).child("inner").index(it as u64);
        let params = &state.params;
        let losses = self.map_tasks(tasks.len(), |i| {
            inner_adapt(params, self.pool, &tasks[i], &self.cfg, key.index(i as u64))
        })?;
        let scores = match self.cfg.weighting {
            Weighting::Hardness => hardness(&losses)?,
            Weighting::Uniform => HardnessScores::uniform(losses.len()),
        };
        let lr = linear_lr(self.cfg.alpha(), it, self.cfg.max_outer_iters);
        let stats = outer_step(&mut state.params, &losses, &scores, &self.cfg, &mut state.optimizer, lr)?;
        state.iteration += 1;

        let mut dev_lab = None;
        if state.iteration % self.cfg.eval_every == 0 || state.iteration == self.cfg.max_outer_iters {
            let dev = self.dev_loss(&state.params)?;
            if dev < state.best_dev {
                state.best_dev = dev;
                state.best_params = state.params.clone();
                state.since_best = 0;
            } else {
                state.since_best += self.cfg.eval_every;
            }
            dev_lab = Some(dev);
        }

        Ok(IterationRecord {
            iteration: it,
            lr,
            tasks: tasks
                .iter()
                .zip(&losses)
                .map(|(t, l)| TaskRecord {
                    domain: self.pool.domains[t.domain].name.clone(),
                    lab: l.lab,
                    cls: l.cls,
                    total: l.total,
                })
                .collect(),
            gamma_theta: scores.gamma_theta,
            gamma_phi: scores.gamma_phi,
            gamma_omega: scores.gamma_omega,
            grad_norm: stats.grad_norm,
            clipped_grad_norm: stats.clipped_grad_norm,
            dev_lab,
        })
    }

    /// Runs until the iteration cap or patience is exhausted. `on_record`
    /// sees every log line as it is produced.
    pub fn run(&self, mut state: TrainState, mut on_record: impl FnMut(&IterationRecord)) -> Result<TrainOutcome> {
        let mut log = Vec::new();
        let stop = loop {
            if let Some(reason) = self.is_done(&state) {
                break reason;
            }
            let rec = self.step(&mut state)?;
            on_record(&rec);
            log.push(rec);
        };
        Ok(TrainOutcome {
            params: state.best_params.clone(),
            state,
            log,
            stop,
        })
    }
}

/// Meta-trains from `init` with the given seed.
pub fn train(
    pool: &SourcePool,
    dev_pool: &SourcePool,
    init: ModelParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let trainer = Trainer::new(pool, dev_pool, cfg.clone(), seed)?;
    let state = trainer.init_state(init)?;
    trainer.run(state, |_| {})
}
