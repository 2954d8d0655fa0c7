//! Reverse-mode gradients, LoRA expert training against a frozen base, and
//! the full fine-tuning baselines.

mod optim;
mod regime;

use std::borrow::Cow;
use std::fmt::Write as _;

use crate::backbone::{init_backbone, BackboneConfig, BackboneWeights, BackwardSink, Model};
use crate::error::{CoreError, Result};
use crate::lora::{init_expert, InjectionPolicy, LoraExpert};
use crate::store;
use crate::taskgen::{make_conflict_suite, Episode, SuiteConfig, TaskDataset};
use crate::tensor::{Matrix, Real, Rng};

pub use optim::{optimizers, Adam, Optimizer, Sgd, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use regime::{regimes, Regime, RegimeOutput, TrainedModel};

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_ALPHA: f32 = 32.0;
pub const DEFAULT_CLIP_NORM: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Steps(usize),
    Epochs(usize),
}

impl Budget {
    pub fn steps(self, examples: usize, batch_size: usize) -> usize {
        match self {
            Budget::Steps(n) => n,
            Budget::Epochs(e) => e * examples.div_ceil(batch_size.max(1)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub budget: Budget,
    pub batch_size: usize,
    pub optimizer: String,
    pub clip_norm: Option<f32>,
    pub seed: u64,
    pub mode: String,
    pub rank: usize,
    pub alpha: f32,
    pub policy: InjectionPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            budget: Budget::Epochs(5),
            batch_size: 16,
            optimizer: "adam".into(),
            clip_norm: Some(DEFAULT_CLIP_NORM),
            seed: 0,
            mode: "lora_expert".into(),
            rank: DEFAULT_RANK,
            alpha: DEFAULT_ALPHA,
            policy: InjectionPolicy::default(),
        }
    }
}

impl TrainConfig {
    /// Settings used by the benches and CLI: the 50-step expert budget with a
    /// learning rate large enough to move a 64-wide model in that budget.
    pub fn desk() -> Self {
        Self {
            lr: DESK_EXPERT_LR,
            budget: Budget::Steps(50),
            ..Self::default()
        }
    }

    /// [`TrainConfig::desk`] in `mode`, with that regime's own learning rate.
    /// Step budget, batch size and optimizer stay shared.
    pub fn desk_for(mode: &str) -> Self {
        Self {
            lr: desk_lr(mode),
            mode: mode.into(),
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("lr must be > 0 (got {})", self.lr)));
        }
        if matches!(self.budget, Budget::Steps(0) | Budget::Epochs(0)) {
            return Err(CoreError::Config("training budget must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be >= 1".into()));
        }
        if self.rank == 0 || !(self.alpha > 0.0) {
            return Err(CoreError::Config("rank and alpha must be positive".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(CoreError::Config("clip_norm must be positive".into()));
            }
        }
        optimizers().create(&self.optimizer)?;
        regimes().create(&self.mode)?;
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let (bk, bv) = match self.budget {
            Budget::Steps(n) => ("steps", n),
            Budget::Epochs(n) => ("epochs", n),
        };
        vec![
            ("lr".into(), self.lr.to_string()),
            (bk.into(), bv.to_string()),
            ("batch_size".into(), self.batch_size.to_string()),
            ("optimizer".into(), self.optimizer.clone()),
            (
                "clip_norm".into(),
                self.clip_norm.map_or("none".into(), |c| c.to_string()),
            ),
            ("train_seed".into(), self.seed.to_string()),
            ("mode".into(), self.mode.clone()),
            ("rank".into(), self.rank.to_string()),
            ("alpha".into(), self.alpha.to_string()),
            ("policy".into(), self.policy.encode()),
        ]
    }

    pub fn apply_pairs<'a, I>(mut self, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        fn num<N: std::str::FromStr>(k: &str, v: &str) -> Result<N> {
            v.trim()
                .parse()
                .map_err(|_| CoreError::Config(format!("{k}: cannot parse {v:?}")))
        }
        for (k, v) in pairs {
            match k {
                "lr" => self.lr = num(k, v)?,
                "steps" => self.budget = Budget::Steps(num(k, v)?),
                "epochs" => self.budget = Budget::Epochs(num(k, v)?),
                "batch_size" => self.batch_size = num(k, v)?,
                "optimizer" => self.optimizer = v.trim().to_string(),
                "clip_norm" => {
                    self.clip_norm = match v.trim() {
                        "none" | "off" => None,
                        s => Some(num(k, s)?),
                    }
                }
                "train_seed" => self.seed = num(k, v)?,
                "mode" => self.mode = v.trim().to_string(),
                "rank" => self.rank = num(k, v)?,
                "alpha" => self.alpha = num(k, v)?,
                "policy" => self.policy = InjectionPolicy::parse(v)?,
                _ => {}
            }
        }
        self.validate()?;
        Ok(self)
    }
}

/// Best of {3e-2, 1e-2, 3e-3, 1e-3, 3e-4} on a held-out tuning suite
/// (seed 2000) at the 50-step budget, picked per regime.
pub const DESK_EXPERT_LR: f32 = 1e-2;
pub const DESK_FULL_LR: f32 = 1e-3;

pub fn desk_lr(mode: &str) -> f32 {
    if mode == "lora_expert" {
        DESK_EXPERT_LR
    } else {
        DESK_FULL_LR
    }
}

/// Mean squared error over every entry, accumulated in `f64`.
pub fn mse_loss<T: Real>(pred: &Matrix<T>, target: &Matrix<T>) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(CoreError::Shape {
            op: "mse_loss",
            left: pred.shape(),
            right: target.shape(),
        });
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.to_f64() - t.to_f64();
            d * d
        })
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Gradient matrices keyed by trainable-parameter name.
#[derive(Clone, Debug, PartialEq)]
pub struct GradTable<T: Real = f32> {
    entries: Vec<(String, Matrix<T>)>,
}

impl<T: Real> GradTable<T> {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Matrix<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn global_norm(&self) -> f64 {
        self.entries.iter().map(|(_, m)| m.sum_sq()).sum::<f64>().sqrt()
    }

    pub fn into_matrices(self) -> Vec<Matrix<T>> {
        self.entries.into_iter().map(|(_, m)| m).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamSet {
    /// Only the expert's `A`/`B` factors.
    Lora,
    /// Every backbone matrix.
    Full,
}

#[derive(Clone, Debug)]
struct LoraSlot<T: Real> {
    idx: usize,
    a: Matrix<T>,
    b: Matrix<T>,
}

/// Mean batch MSE as a function of the trainable parameters, at precision `T`.
#[derive(Clone, Debug)]
pub struct Objective<T: Real = f32> {
    config: BackboneConfig,
    names: Vec<String>,
    base: Vec<Matrix<T>>,
    lora: Option<(T, Vec<LoraSlot<T>>)>,
}

impl<T: Real> Objective<T> {
    /// All backbone matrices trainable.
    pub fn full(weights: &BackboneWeights) -> Self {
        Self {
            config: weights.config().clone(),
            names: weights.layers().iter().map(|l| l.name.clone()).collect(),
            base: weights.params(),
            lora: None,
        }
    }

    /// Only `expert`'s factors trainable; `base` must be frozen and match the
    /// expert's fingerprint.
    pub fn lora(base: &BackboneWeights, expert: &LoraExpert) -> Result<Self> {
        if !base.is_frozen() {
            return Err(CoreError::Contract("lora training requires a frozen base".into()));
        }
        let fp = store::fingerprint(base);
        if expert.base_fingerprint != fp {
            return Err(CoreError::StaleExpert {
                expected: fp,
                found: expert.base_fingerprint,
            });
        }
        expert.validate()?;
        expert.check_against(base.config())?;
        let slots = expert
            .layers
            .iter()
            .map(|l| {
                let idx = base
                    .layer_index(&l.name)
                    .ok_or_else(|| CoreError::UnknownLayer(l.name.clone()))?;
                Ok(LoraSlot {
                    idx,
                    a: l.a.cast(),
                    b: l.b.cast(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut obj = Self::full(base);
        obj.lora = Some((T::from_f64(expert.scale() as f64), slots));
        Ok(obj)
    }

    pub fn param_set(&self) -> ParamSet {
        if self.lora.is_some() {
            ParamSet::Lora
        } else {
            ParamSet::Full
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn trainable_names(&self) -> Vec<String> {
        match &self.lora {
            Some((_, slots)) => slots
                .iter()
                .flat_map(|s| {
                    let n = &self.names[s.idx];
                    [format!("{n}.lora_a"), format!("{n}.lora_b")]
                })
                .collect(),
            None => self.names.clone(),
        }
    }

    pub fn trainable(&self) -> Vec<&Matrix<T>> {
        match &self.lora {
            Some((_, slots)) => slots.iter().flat_map(|s| [&s.a, &s.b]).collect(),
            None => self.base.iter().collect(),
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix<T>> {
        match &mut self.lora {
            Some((_, slots)) => slots.iter_mut().flat_map(|s| [&mut s.a, &mut s.b]).collect(),
            None => self.base.iter_mut().collect(),
        }
    }

    pub fn trainable_named_mut(&mut self, name: &str) -> Option<&mut Matrix<T>> {
        let pos = self.trainable_names().iter().position(|n| n == name)?;
        self.trainable_mut().into_iter().nth(pos)
    }

    fn effective(&self) -> Result<Cow<'_, [Matrix<T>]>> {
        match &self.lora {
            None => Ok(Cow::Borrowed(&self.base)),
            Some((scale, slots)) => {
                let mut eff = self.base.clone();
                for s in slots {
                    eff[s.idx].add_scaled_in_place(&s.b.matmul(&s.a)?, *scale)?;
                }
                Ok(Cow::Owned(eff))
            }
        }
    }

    fn check_batch(&self, batch: &[&Episode]) -> Result<()> {
        if batch.is_empty() {
            return Err(CoreError::Config("empty batch".into()));
        }
        let cfg = &self.config;
        for ep in batch {
            ep.observation.check(cfg)?;
            if ep.instruction.tokens.len() != cfg.max_instr_len {
                return Err(CoreError::Dimension {
                    what: "instruction tokens".into(),
                    expected: cfg.max_instr_len,
                    got: ep.instruction.tokens.len(),
                });
            }
            if ep.target.shape() != (cfg.chunk_horizon, cfg.action_dim) {
                return Err(CoreError::Shape {
                    op: "training target",
                    left: ep.target.shape(),
                    right: (cfg.chunk_horizon, cfg.action_dim),
                });
            }
        }
        Ok(())
    }

    fn run(model: &Model<'_, T>, batch: &[&Episode]) -> Result<(Matrix<T>, crate::backbone::ForwardTape<T>)> {
        let to_t = |v: &[f32]| v.iter().map(|&x| T::from_f64(x as f64)).collect::<Vec<T>>();
        let obs: Vec<Vec<T>> = batch.iter().map(|ep| to_t(&ep.observation.features)).collect();
        let pro: Vec<Vec<T>> = batch.iter().map(|ep| to_t(&ep.observation.proprio)).collect();
        let tokens: Vec<&[u32]> = batch.iter().map(|ep| ep.instruction.tokens.as_slice()).collect();
        let obs: Vec<&[T]> = obs.iter().map(Vec::as_slice).collect();
        let pro: Vec<&[T]> = pro.iter().map(Vec::as_slice).collect();
        let mut macs = 0;
        model.forward_batch(&tokens, &obs, &pro, &mut macs)
    }

    /// Stacked `(B·H) × d_a` targets.
    fn stacked_targets(&self, batch: &[&Episode]) -> Result<Matrix<T>> {
        let data: Vec<T> = batch
            .iter()
            .flat_map(|ep| ep.target.data().iter().map(|&v| T::from_f64(v as f64)))
            .collect();
        Matrix::from_vec(batch.len() * self.config.chunk_horizon, self.config.action_dim, data)
    }

    /// Per-example MSE of stacked predictions.
    fn per_example_losses(&self, out: &Matrix<T>, target: &Matrix<T>, batch: usize) -> Vec<f64> {
        let per = out.len() / batch;
        out.data()
            .chunks(per)
            .zip(target.data().chunks(per))
            .map(|(p, t)| {
                p.iter()
                    .zip(t)
                    .map(|(&a, &b)| {
                        let d = a.to_f64() - b.to_f64();
                        d * d
                    })
                    .sum::<f64>()
                    / per as f64
            })
            .collect()
    }

    /// Mean over the batch of per-example MSE.
    pub fn loss(&self, batch: &[&Episode]) -> Result<f64> {
        self.check_batch(batch)?;
        let eff = self.effective()?;
        let model = Model::from_params(&self.config, &eff);
        let (out, _) = Self::run(&model, batch)?;
        let losses = self.per_example_losses(&out, &self.stacked_targets(batch)?, batch.len());
        Ok(losses.iter().sum::<f64>() / batch.len() as f64)
    }

    /// Loss and exact gradients of the mean batch loss w.r.t. the trainable set.
    pub fn loss_and_grad(&self, batch: &[&Episode]) -> Result<(f64, GradTable<T>)> {
        self.check_batch(batch)?;
        let eff = self.effective()?;
        let model = Model::from_params(&self.config, &eff);
        let n_layers = eff.len();
        let wants: Vec<bool> = match &self.lora {
            Some((_, slots)) => {
                let mut w = vec![false; n_layers];
                for s in slots {
                    w[s.idx] = true;
                }
                w
            }
            None => vec![true; n_layers],
        };
        let (out, tape) = Self::run(&model, batch)?;
        let target = self.stacked_targets(batch)?;
        let losses = self.per_example_losses(&out, &target, batch.len());
        // d(mean over batch of mean over entries)/d out = 2(out − target)/(B·H·d_a).
        let k = T::from_f64(2.0 / out.len() as f64);
        let d_out = out.add_scaled(&target, -T::ONE)?.scale(k);
        let mut sink = BackwardSink::new(wants);
        model.backward(&tape, &d_out, &mut sink)?;
        let mut acc = sink.into_grads();

        let full_grad = |i: usize, acc: &mut Vec<Option<Matrix<T>>>| {
            acc[i]
                .take()
                .unwrap_or_else(|| Matrix::zeros(eff[i].rows(), eff[i].cols()))
        };
        let entries = match &self.lora {
            Some((scale, slots)) => {
                let mut out = Vec::with_capacity(2 * slots.len());
                for s in slots {
                    let g = full_grad(s.idx, &mut acc);
                    let name = &self.names[s.idx];
                    // W_eff = W + s·B·A ⇒ dA = s·Bᵀ·G, dB = s·G·Aᵀ.
                    out.push((format!("{name}.lora_a"), s.b.matmul_tn(&g)?.scale(*scale)));
                    out.push((format!("{name}.lora_b"), g.matmul_nt(&s.a)?.scale(*scale)));
                }
                out
            }
            None => (0..n_layers)
                .map(|i| (self.names[i].clone(), full_grad(i, &mut acc)))
                .collect(),
        };
        Ok((losses.iter().sum::<f64>() / batch.len() as f64, GradTable { entries }))
    }
}

impl Objective<f32> {
    fn write_back_expert(&self, expert: &mut LoraExpert) {
        if let Some((_, slots)) = &self.lora {
            for (l, s) in expert.layers.iter_mut().zip(slots) {
                l.a = s.a.clone();
                l.b = s.b.clone();
            }
        }
    }

    fn into_backbone(self, template: &BackboneWeights) -> Result<BackboneWeights> {
        BackboneWeights::from_matrices(template.config().clone(), self.base)
    }
}

/// Gradient of the mean batch loss. With an expert, only its factors are
/// trainable and `weights` must be frozen; without one, every matrix is.
pub fn grad(weights: &BackboneWeights, expert: Option<&LoraExpert>, batch: &[Episode]) -> Result<(f64, GradTable)> {
    let refs: Vec<&Episode> = batch.iter().collect();
    match expert {
        Some(e) => Objective::<f32>::lora(weights, e)?.loss_and_grad(&refs),
        None => Objective::<f32>::full(weights).loss_and_grad(&refs),
    }
}

/// `f64` counterpart of [`grad`] for verification against finite differences.
pub fn grad_f64(
    weights: &BackboneWeights,
    expert: Option<&LoraExpert>,
    batch: &[Episode],
) -> Result<(f64, GradTable<f64>)> {
    let refs: Vec<&Episode> = batch.iter().collect();
    match expert {
        Some(e) => Objective::<f64>::lora(weights, e)?.loss_and_grad(&refs),
        None => Objective::<f64>::full(weights).loss_and_grad(&refs),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogLine {
    pub phase: String,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub lines: Vec<LogLine>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("phase\tstep\tloss\tgrad_norm\n");
        for l in &self.lines {
            let _ = writeln!(s, "{}\t{}\t{:.6e}\t{:.6e}", l.phase, l.step, l.loss, l.grad_norm);
        }
        s
    }

    pub fn phase(&self, phase: &str) -> impl Iterator<Item = &LogLine> {
        let phase = phase.to_string();
        self.lines.iter().filter(move |l| l.phase == phase)
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.lines.extend(other.lines);
    }

    /// Fraction of consecutive window-mean pairs (per phase) where the loss
    /// did not go up.
    pub fn non_increasing_fraction(&self, window: usize) -> f64 {
        let window = window.max(1);
        let mut phases: Vec<&str> = Vec::new();
        for l in &self.lines {
            if !phases.contains(&l.phase.as_str()) {
                phases.push(&l.phase);
            }
        }
        let (mut ok, mut total) = (0usize, 0usize);
        for p in phases {
            let losses: Vec<f64> = self.phase(p).map(|l| l.loss).collect();
            let means: Vec<f64> = losses
                .chunks(window)
                .filter(|c| c.len() == window)
                .map(|c| c.iter().sum::<f64>() / c.len() as f64)
                .collect();
            for w in means.windows(2) {
                total += 1;
                if w[1] <= w[0] {
                    ok += 1;
                }
            }
        }
        if total == 0 {
            1.0
        } else {
            ok as f64 / total as f64
        }
    }
}

/// Cycles through shuffled epochs of example indices.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, rng: Rng) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: 0,
            rng,
        };
        s.rng.shuffle(&mut s.order);
        s
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn optimize(obj: &mut Objective<f32>, data: &[&Episode], cfg: &TrainConfig, phase: &str, rng: Rng) -> Result<TrainLog> {
    if data.is_empty() {
        return Err(CoreError::Config(format!("phase {phase}: no training episodes")));
    }
    let mut opt = optimizers().create(&cfg.optimizer)?;
    let steps = cfg.budget.steps(data.len(), cfg.batch_size);
    let mut sampler = BatchSampler::new(data.len(), rng);
    let mut log = TrainLog::default();
    for step in 0..steps {
        let batch: Vec<&Episode> = sampler.next(cfg.batch_size).into_iter().map(|i| data[i]).collect();
        let (loss, grads) = obj.loss_and_grad(&batch)?;
        let norm = grads.global_norm();
        let scale = match cfg.clip_norm {
            Some(c) if norm > c as f64 => (c as f64 / norm) as f32,
            _ => 1.0,
        };
        opt.step(obj.trainable_mut(), &grads.into_matrices(), cfg.lr, scale)?;
        log.lines.push(LogLine {
            phase: phase.to_string(),
            step,
            loss,
            grad_norm: norm,
        });
    }
    Ok(log)
}

fn check_dataset(config: &BackboneConfig, ds: &TaskDataset) -> Result<()> {
    let out = config.chunk_horizon * config.action_dim;
    if ds.spec.target_map.shape() != (out, config.obs_dim) {
        return Err(CoreError::Shape {
            op: "dataset target map vs backbone",
            left: ds.spec.target_map.shape(),
            right: (out, config.obs_dim),
        });
    }
    for ep in ds.train.iter().chain(&ds.eval) {
        ep.observation.check(config)?;
        if ep.target.shape() != (config.chunk_horizon, config.action_dim) {
            return Err(CoreError::Shape {
                op: "dataset target vs backbone",
                left: ep.target.shape(),
                right: (config.chunk_horizon, config.action_dim),
            });
        }
    }
    Ok(())
}

/// Expert id and seed used for a task's adapter.
pub fn expert_id_for(ds: &TaskDataset) -> String {
    format!("expert_{}", ds.spec.name())
}

/// Trains one expert on `dataset` against the frozen `base`.
pub fn train_expert(base: &BackboneWeights, dataset: &TaskDataset, cfg: &TrainConfig) -> Result<(LoraExpert, TrainLog)> {
    cfg.validate()?;
    if cfg.mode != "lora_expert" {
        return Err(CoreError::Contract(format!(
            "train_expert needs mode lora_expert (got {})",
            cfg.mode
        )));
    }
    if !base.is_frozen() {
        return Err(CoreError::Contract("lora training requires a frozen base".into()));
    }
    check_dataset(base.config(), dataset)?;
    let root = Rng::new(cfg.seed).fork(dataset.task_id() as u64);
    let init_seed = root.fork(0).next_u64();
    let mut expert = init_expert(expert_id_for(dataset), base, &cfg.policy, cfg.rank, cfg.alpha, init_seed)?;
    expert.meta.insert("task".into(), dataset.spec.name());
    expert.meta.insert("instruction".into(), dataset.spec.instruction.raw_text.clone());
    let mut obj = Objective::<f32>::lora(base, &expert)?;
    let data: Vec<&Episode> = dataset.train.iter().collect();
    let log = optimize(&mut obj, &data, cfg, &dataset.spec.name(), root.fork(1))?;
    obj.write_back_expert(&mut expert);
    expert.validate()?;
    Ok((expert, log))
}

/// Full fine-tuning baselines. `base` must be an unfrozen copy.
/// Returns `(label, checkpoint)` pairs: one per dataset (independent), one
/// overall (joint), or one snapshot after each phase (sequential).
pub fn full_finetune(
    base: &BackboneWeights,
    datasets: &[TaskDataset],
    cfg: &TrainConfig,
) -> Result<(Vec<(String, BackboneWeights)>, TrainLog)> {
    cfg.validate()?;
    if base.is_frozen() {
        return Err(CoreError::Contract(
            "full fine-tuning needs an unfrozen copy of the base".into(),
        ));
    }
    if datasets.is_empty() {
        return Err(CoreError::Config("no datasets".into()));
    }
    for ds in datasets {
        check_dataset(base.config(), ds)?;
    }
    let root = Rng::new(cfg.seed);
    let mut log = TrainLog::default();
    let mut out = Vec::new();
    match cfg.mode.as_str() {
        "full_independent" => {
            for ds in datasets {
                let mut obj = Objective::<f32>::full(base);
                let data: Vec<&Episode> = ds.train.iter().collect();
                log.extend(optimize(&mut obj, &data, cfg, &ds.spec.name(), root.fork(0))?);
                out.push((ds.spec.name(), obj.into_backbone(base)?));
            }
        }
        "full_joint" => {
            let mut obj = Objective::<f32>::full(base);
            let data: Vec<&Episode> = datasets.iter().flat_map(|d| d.train.iter()).collect();
            log.extend(optimize(&mut obj, &data, cfg, "joint", root.fork(0))?);
            out.push(("joint".to_string(), obj.into_backbone(base)?));
        }
        "full_sequential" => {
            let mut obj = Objective::<f32>::full(base);
            for (phase, ds) in datasets.iter().enumerate() {
                let data: Vec<&Episode> = ds.train.iter().collect();
                log.extend(optimize(&mut obj, &data, cfg, &ds.spec.name(), root.fork(phase as u64))?);
                let snap = BackboneWeights::from_matrices(base.config().clone(), obj.base.clone())?;
                out.push((format!("after_{}", ds.spec.name()), snap));
            }
        }
        other => {
            return Err(CoreError::Contract(format!(
                "full_finetune needs a full_* mode (got {other})"
            )))
        }
    }
    Ok((out, log))
}

/// Recipe for a usable frozen base: joint full training of a fresh backbone
/// on a suite drawn from the same task family as the evaluation suites, but
/// with its own seed so no instruction or episode is shared with them.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub suite: SuiteConfig,
    pub train: TrainConfig,
}

pub const PRETRAIN_SUITE_SEED: u64 = 1000;

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            suite: SuiteConfig {
                tasks: 32,
                train_episodes: 128,
                eval_episodes: 16,
                discriminability: 1.0,
                seed: PRETRAIN_SUITE_SEED,
                ..SuiteConfig::default()
            },
            train: TrainConfig {
                lr: 1e-3,
                budget: Budget::Steps(12_000),
                mode: "full_joint".into(),
                ..TrainConfig::default()
            },
        }
    }
}

impl PretrainConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = self
            .suite
            .to_pairs()
            .into_iter()
            .map(|(k, v)| (format!("pretrain.{k}"), v))
            .collect();
        out.extend(self.train.to_pairs().into_iter().map(|(k, v)| (format!("pretrain.{k}"), v)));
        out
    }

    /// Applies keys prefixed with `pretrain.`; anything else is ignored.
    pub fn apply_pairs<'a, I>(self, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let own: Vec<(&str, &str)> = pairs
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("pretrain.").map(|k| (k, v)))
            .collect();
        Ok(Self {
            suite: self.suite.apply_pairs(own.iter().copied())?,
            train: self.train.apply_pairs(own.iter().copied())?,
        })
    }
}

/// Trains a fresh backbone built from `config` per `pre` and returns it frozen.
pub fn pretrain(config: &BackboneConfig, pre: &PretrainConfig) -> Result<(BackboneWeights, TrainLog)> {
    if pre.train.mode != "full_joint" {
        return Err(CoreError::Config(format!(
            "pretraining runs in full_joint mode (got {})",
            pre.train.mode
        )));
    }
    let suite = make_conflict_suite(config, &pre.suite)?;
    let fresh = init_backbone(config)?;
    let (mut ckpts, log) = full_finetune(&fresh, &suite, &pre.train)?;
    let (_, mut base) = ckpts.pop().expect("joint mode yields one checkpoint");
    base.freeze();
    Ok((base, log))
}
