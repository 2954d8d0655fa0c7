//! Seeded synthetic task suites built to conflict.
//!
//! Tasks come in pairs. Both members of a pair draw observations from the
//! same distribution and their target maps are exact negations of each
//! other, so a single set of parameters can only serve both if it can tell
//! the two instructions apart. `discriminability` controls how much of the
//! instruction the pair shares: at 0 the instructions are identical and the
//! best achievable loss is a closed-form floor.

use std::fs;
use std::path::Path;

use crate::backbone::{BackboneConfig, BackboneWeights, Instruction, Observation, Vocabulary};
use crate::error::{CoreError, Result};
use crate::lora::{merge, LoraExpert};
use crate::store::{Container, Entry, FileKind, Payload};
use crate::tensor::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteConfig {
    /// Number of tasks `K`; must be even.
    pub tasks: usize,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    /// `d_tok ∈ [0, 1]`: fraction of instruction tokens that differ within a pair.
    pub discriminability: f64,
    /// Pair maps are random combinations of this many basis maps.
    pub family_size: usize,
    /// Seeds the basis maps; suites sharing it draw from one task family.
    pub family_seed: u64,
    /// Standard deviation of each target entry, before the bias.
    pub target_std: f32,
    pub bias_std: f32,
    pub obs_std: f32,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            tasks: 8,
            train_episodes: 64,
            eval_episodes: 32,
            discriminability: 0.25,
            family_size: 4,
            family_seed: 0,
            target_std: 0.5,
            bias_std: 0.5,
            obs_std: 1.0,
            seed: 0,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks == 0 || self.tasks % 2 != 0 {
            return Err(CoreError::Config(format!(
                "conflict suites need an even, non-zero task count (got {})",
                self.tasks
            )));
        }
        if self.train_episodes + self.eval_episodes < 2 || self.train_episodes == 0 {
            return Err(CoreError::Config("need at least 2 episodes per task, 1 for training".into()));
        }
        if !(0.0..=1.0).contains(&self.discriminability) {
            return Err(CoreError::Config(format!(
                "discriminability {} outside [0, 1]",
                self.discriminability
            )));
        }
        if self.family_size == 0 {
            return Err(CoreError::Config("family_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Leading instruction tokens a pair shares: `⌈(1 − d_tok)·len⌉`.
    pub fn shared_prefix(&self, instr_len: usize) -> usize {
        (((1.0 - self.discriminability) * instr_len as f64) - 1e-9).ceil().max(0.0) as usize
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("tasks", self.tasks.to_string()),
            ("train_episodes", self.train_episodes.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("discriminability", self.discriminability.to_string()),
            ("family_size", self.family_size.to_string()),
            ("family_seed", self.family_seed.to_string()),
            ("target_std", self.target_std.to_string()),
            ("bias_std", self.bias_std.to_string()),
            ("obs_std", self.obs_std.to_string()),
            ("suite_seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
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
                "tasks" => self.tasks = num(k, v)?,
                "train_episodes" => self.train_episodes = num(k, v)?,
                "eval_episodes" => self.eval_episodes = num(k, v)?,
                "discriminability" => self.discriminability = num(k, v)?,
                "family_size" => self.family_size = num(k, v)?,
                "family_seed" => self.family_seed = num(k, v)?,
                "target_std" => self.target_std = num(k, v)?,
                "bias_std" => self.bias_std = num(k, v)?,
                "obs_std" => self.obs_std = num(k, v)?,
                "suite_seed" => self.seed = num(k, v)?,
                _ => {}
            }
        }
        self.validate()?;
        Ok(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub task_id: usize,
    pub instruction: Instruction,
    /// `(H·d_a) × obs_dim`.
    pub target_map: Matrix,
    /// `1 × (H·d_a)`.
    pub target_bias: Matrix,
    pub conflict_group: Option<usize>,
}

impl TaskSpec {
    pub fn name(&self) -> String {
        format!("task{:02}", self.task_id)
    }

    /// `target_map · obs + bias`, reshaped to `H × d_a`.
    pub fn target_for(&self, obs: &[f32], config: &BackboneConfig) -> Matrix {
        let n = self.target_map.rows();
        let mut flat = Vec::with_capacity(n);
        for r in 0..n {
            let mut acc = self.target_bias.get(0, r);
            for (&w, &o) in self.target_map.row(r).iter().zip(obs) {
                acc += w * o;
            }
            flat.push(acc);
        }
        Matrix::from_vec(config.chunk_horizon, config.action_dim, flat).expect("target shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub instruction: Instruction,
    pub observation: Observation,
    /// `H × d_a`.
    pub target: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskDataset {
    pub spec: TaskSpec,
    pub train: Vec<Episode>,
    pub eval: Vec<Episode>,
}

impl TaskDataset {
    pub fn task_id(&self) -> usize {
        self.spec.task_id
    }
}

fn draw_tokens(rng: &mut Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| 1 + rng.below(vocab - 1) as u32).collect()
}

/// Builds `K/2` conflict pairs. Task `2p` and `2p+1` form pair `p`.
pub fn make_conflict_suite(config: &BackboneConfig, suite: &SuiteConfig) -> Result<Vec<TaskDataset>> {
    suite.validate()?;
    config.validate()?;
    if config.vocab_size < 3 {
        return Err(CoreError::Config("suite generation needs vocab_size >= 3".into()));
    }
    let li = config.max_instr_len;
    let shared = suite.shared_prefix(li);
    let vocab = Vocabulary::new(config.vocab_size);
    let out_dim = config.chunk_horizon * config.action_dim;
    let root = Rng::new(suite.seed);

    // Instructions: regenerate deterministically until every distinguishable
    // instruction is unique across the suite.
    let mut instr_rng = root.fork(0x1157);
    let mut tokens: Vec<Vec<u32>> = Vec::with_capacity(suite.tasks);
    for _pair in 0..suite.tasks / 2 {
        loop {
            let prefix = draw_tokens(&mut instr_rng, shared, config.vocab_size);
            let a_suffix = draw_tokens(&mut instr_rng, li - shared, config.vocab_size);
            let mut b_suffix = draw_tokens(&mut instr_rng, li - shared, config.vocab_size);
            while li > shared && b_suffix == a_suffix {
                b_suffix = draw_tokens(&mut instr_rng, li - shared, config.vocab_size);
            }
            let a: Vec<u32> = prefix.iter().chain(&a_suffix).copied().collect();
            let b: Vec<u32> = prefix.iter().chain(&b_suffix).copied().collect();
            if !tokens.contains(&a) && !tokens.contains(&b) {
                tokens.push(a);
                tokens.push(b);
                break;
            }
        }
    }

    // Basis maps G_j (entries scaled so G_j·x has per-entry std ≈ target_std)
    // and basis biases g_j, shared by every suite with the same family seed.
    let family = Rng::new(suite.family_seed).fork(0xFA11);
    let g_std = suite.target_std / (suite.obs_std * (config.obs_dim as f32).sqrt());
    let basis: Vec<(Matrix, Matrix)> = (0..suite.family_size)
        .map(|j| {
            let mut r = family.fork(j as u64);
            (
                Matrix::gaussian(&mut r, out_dim, config.obs_dim, g_std),
                Matrix::gaussian(&mut r, 1, out_dim, suite.bias_std),
            )
        })
        .collect();

    let mut datasets = Vec::with_capacity(suite.tasks);
    for pair in 0..suite.tasks / 2 {
        // Unit-variance mixture: c_j ~ N(0, 1/m).
        let mut coef_rng = root.fork(0x4D41_5000 + pair as u64);
        let c_std = 1.0 / (suite.family_size as f64).sqrt();
        let mut map = Matrix::zeros(out_dim, config.obs_dim);
        let mut bias = Matrix::zeros(1, out_dim);
        for (g, b) in &basis {
            let c = (coef_rng.normal() * c_std) as f32;
            map.add_scaled_in_place(g, c)?;
            bias.add_scaled_in_place(b, c)?;
        }

        for member in 0..2 {
            let task_id = 2 * pair + member;
            let sign = if member == 0 { 1.0 } else { -1.0 };
            let tok = tokens[task_id].clone();
            let instruction = Instruction::from_tokens(vocab.render(&tok), tok, config)?;
            let spec = TaskSpec {
                task_id,
                instruction: instruction.clone(),
                target_map: map.scale(sign),
                target_bias: bias.scale(sign),
                conflict_group: Some(pair),
            };
            let task_rng = root.fork(0x7A5C_0000 + task_id as u64);
            let episodes: Vec<Episode> = (0..suite.train_episodes + suite.eval_episodes)
                .map(|i| {
                    let mut rng = task_rng.fork(i as u64);
                    let features: Vec<f32> = (0..config.obs_dim)
                        .map(|_| rng.normal() as f32 * suite.obs_std)
                        .collect();
                    let proprio: Vec<f32> = (0..config.proprio_dim)
                        .map(|_| rng.normal() as f32 * suite.obs_std)
                        .collect();
                    let target = spec.target_for(&features, config);
                    Episode {
                        instruction: instruction.clone(),
                        observation: Observation { features, proprio },
                        target,
                    }
                })
                .collect();
            let mut train = episodes;
            let eval = train.split_off(suite.train_episodes);
            datasets.push(TaskDataset { spec, train, eval });
        }
    }
    Ok(datasets)
}

/// Minimum achievable per-entry MSE on an instruction-ambiguous pair: with
/// targets `±(M·x + b)` equally likely given `x ~ N(0, σ²I)`, the Bayes
/// predictor is `0`, leaving `(σ²‖M‖²_F + ‖b‖²) / (H·d_a)`.
pub fn bayes_floor(spec: &TaskSpec, obs_std: f32) -> f64 {
    let n = spec.target_map.rows() as f64;
    let s2 = obs_std as f64 * obs_std as f64;
    (s2 * spec.target_map.sum_sq() + spec.target_bias.sum_sq()) / n
}

/// Mean squared error over every entry of an action chunk, accumulated in `f64`.
pub fn mse(pred: &Matrix, target: &Matrix) -> f64 {
    debug_assert_eq!(pred.shape(), target.shape());
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    sum / pred.len() as f64
}

const EVAL_CHUNK: usize = 64;

/// Mean MSE over `episodes` under `weights` (with `expert` merged, if given).
pub fn mean_loss(weights: &BackboneWeights, expert: Option<&LoraExpert>, episodes: &[Episode]) -> Result<f64> {
    let merged;
    let serving = match expert {
        Some(e) => {
            let mut frozen = weights.clone();
            frozen.freeze();
            merged = merge(&frozen, e)?;
            &merged
        }
        None => weights,
    };
    if episodes.is_empty() {
        return Err(CoreError::Config("no episodes to evaluate".into()));
    }
    let model = serving.model();
    let mut total = 0.0;
    for chunk in episodes.chunks(EVAL_CHUNK) {
        let tokens: Vec<&[u32]> = chunk.iter().map(|e| e.instruction.tokens.as_slice()).collect();
        let obs: Vec<&[f32]> = chunk.iter().map(|e| e.observation.features.as_slice()).collect();
        let pro: Vec<&[f32]> = chunk.iter().map(|e| e.observation.proprio.as_slice()).collect();
        for e in chunk {
            e.observation.check(serving.config())?;
        }
        let mut macs = 0;
        let (out, _) = model.forward_batch(&tokens, &obs, &pro, &mut macs)?;
        let per = out.len() / chunk.len();
        for (ep, pred) in chunk.iter().zip(out.data().chunks(per)) {
            if ep.target.len() != per {
                return Err(CoreError::Dimension {
                    what: "eval target".into(),
                    expected: per,
                    got: ep.target.len(),
                });
            }
            let sum: f64 = pred
                .iter()
                .zip(ep.target.data())
                .map(|(&p, &t)| {
                    let d = p as f64 - t as f64;
                    d * d
                })
                .sum();
            total += sum / per as f64;
        }
    }
    Ok(total / episodes.len() as f64)
}

/// Mean MSE over the eval split.
pub fn eval_loss(weights: &BackboneWeights, expert: Option<&LoraExpert>, dataset: &TaskDataset) -> Result<f64> {
    mean_loss(weights, expert, &dataset.eval)
}

fn episodes_to_matrices(eps: &[Episode], cfg: &BackboneConfig) -> Result<[Matrix; 3]> {
    let n = eps.len();
    let mut obs = Vec::with_capacity(n * cfg.obs_dim);
    let mut pro = Vec::with_capacity(n * cfg.proprio_dim);
    let mut tgt = Vec::with_capacity(n * cfg.chunk_horizon * cfg.action_dim);
    for e in eps {
        obs.extend_from_slice(&e.observation.features);
        pro.extend_from_slice(&e.observation.proprio);
        tgt.extend_from_slice(e.target.data());
    }
    Ok([
        Matrix::from_vec(n, cfg.obs_dim, obs)?,
        Matrix::from_vec(n, cfg.proprio_dim, pro)?,
        Matrix::from_vec(n, cfg.chunk_horizon * cfg.action_dim, tgt)?,
    ])
}

/// Writes one container file per task (`taskNN.crlx`) into `dir`.
pub fn export_suite(dir: &Path, config: &BackboneConfig, suite: &SuiteConfig, datasets: &[TaskDataset]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for ds in datasets {
        let spec = &ds.spec;
        let mut meta = config.to_pairs();
        meta.extend(suite.to_pairs());
        meta.push(("task_id".into(), spec.task_id.to_string()));
        meta.push(("instruction".into(), spec.instruction.raw_text.clone()));
        meta.push((
            "tokens".into(),
            spec.instruction
                .tokens
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(","),
        ));
        meta.push((
            "conflict_group".into(),
            spec.conflict_group.map_or("none".into(), |g| g.to_string()),
        ));
        let mut entries = vec![
            Entry {
                name: "target_map".into(),
                payload: Payload::Dense(spec.target_map.clone()),
            },
            Entry {
                name: "target_bias".into(),
                payload: Payload::Dense(spec.target_bias.clone()),
            },
        ];
        for (split, eps) in [("train", &ds.train), ("eval", &ds.eval)] {
            let [o, p, t] = episodes_to_matrices(eps, config)?;
            for (field, m) in [("obs", o), ("proprio", p), ("target", t)] {
                entries.push(Entry {
                    name: format!("{split}.{field}"),
                    payload: Payload::Dense(m),
                });
            }
        }
        Container {
            kind: FileKind::Task,
            meta,
            entries,
        }
        .write(&dir.join(format!("{}.crlx", spec.name())))?;
    }
    Ok(())
}

/// Reads every `*.crlx` task file in `dir`, ordered by task id.
pub fn import_suite(dir: &Path) -> Result<(BackboneConfig, Vec<TaskDataset>)> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "crlx"))
        .collect();
    paths.sort();
    let mut config = None;
    let mut out = Vec::new();
    for path in paths {
        let c = Container::read(&path)?;
        if c.kind != FileKind::Task {
            return Err(CoreError::Format(format!("{} is not a task file", path.display())));
        }
        let cfg = BackboneConfig::default().apply_pairs(c.meta.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
        let get = |k: &str| {
            c.meta_get(k)
                .ok_or_else(|| CoreError::Format(format!("{}: missing {k}", path.display())))
        };
        let task_id: usize = get("task_id")?
            .parse()
            .map_err(|_| CoreError::Format("bad task_id".into()))?;
        let tokens = get("tokens")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<u32>().map_err(|_| CoreError::Format(format!("bad token {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        let instruction = Instruction::from_tokens(get("instruction")?, tokens, &cfg)?;
        let conflict_group = match get("conflict_group")? {
            "none" => None,
            g => Some(g.parse().map_err(|_| CoreError::Format("bad conflict_group".into()))?),
        };
        let dense = |name: &str| -> Result<Matrix> {
            c.entries
                .iter()
                .find(|e| e.name == name)
                .and_then(|e| match &e.payload {
                    Payload::Dense(m) => Some(m.clone()),
                    Payload::LowRank { .. } => None,
                })
                .ok_or_else(|| CoreError::Format(format!("{}: missing entry {name}", path.display())))
        };
        let spec = TaskSpec {
            task_id,
            instruction: instruction.clone(),
            target_map: dense("target_map")?,
            target_bias: dense("target_bias")?,
            conflict_group,
        };
        let mut splits = Vec::new();
        for split in ["train", "eval"] {
            let o = dense(&format!("{split}.obs"))?;
            let p = dense(&format!("{split}.proprio"))?;
            let t = dense(&format!("{split}.target"))?;
            let eps = (0..o.rows())
                .map(|i| -> Result<Episode> {
                    Ok(Episode {
                        instruction: instruction.clone(),
                        observation: Observation {
                            features: o.row(i).to_vec(),
                            proprio: p.row(i).to_vec(),
                        },
                        target: Matrix::from_vec(cfg.chunk_horizon, cfg.action_dim, t.row(i).to_vec())?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            splits.push(eps);
        }
        let eval = splits.pop().unwrap_or_default();
        let train = splits.pop().unwrap_or_default();
        if config.get_or_insert_with(|| cfg.clone()) != &cfg {
            return Err(CoreError::Format("task files disagree on backbone dims".into()));
        }
        out.push(TaskDataset { spec, train, eval });
    }
    out.sort_by_key(|d| d.spec.task_id);
    let config = config.ok_or_else(|| CoreError::Format(format!("no task files in {}", dir.display())))?;
    Ok((config, out))
}
