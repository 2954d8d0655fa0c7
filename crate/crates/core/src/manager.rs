//! Serving-side expert switching.
//!
//! The manager keeps one pristine copy of the base and one serving table.
//! Serving is always either byte-equal to the base or to
//! `merge(base, active expert)`; every failure path restores the base before
//! the error is returned.

use std::path::Path;
use std::time::Instant;

use crate::backbone::{forward, ActionChunk, BackboneWeights, Instruction, Observation};
use crate::error::{CoreError, Result};
use crate::lora::{merge_into, LoraExpert};
use crate::registry::Registry;
use crate::store::{self, decode_expert, load_registry, ExpertRegistry, MissPolicy, RegistryEntry};
use crate::tensor::Rng;

/// Fetches an adapter for a registry entry.
pub trait ExpertLoader: Send {
    fn name(&self) -> &'static str;

    fn load(&mut self, entry: &RegistryEntry) -> Result<LoraExpert>;
}

/// Reads and decodes the adapter file named by the entry.
#[derive(Debug, Default)]
pub struct DiskLoader;

impl ExpertLoader for DiskLoader {
    fn name(&self) -> &'static str {
        "disk"
    }

    fn load(&mut self, entry: &RegistryEntry) -> Result<LoraExpert> {
        let bytes = std::fs::read(&entry.path).map_err(|e| CoreError::MissingAdapter {
            expert_id: entry.expert_id.clone(),
            path: entry.path.clone(),
            reason: e.to_string(),
        })?;
        let expert = decode_expert(&bytes)?;
        if expert.expert_id != entry.expert_id {
            return Err(CoreError::MissingAdapter {
                expert_id: entry.expert_id.clone(),
                path: entry.path.clone(),
                reason: format!("file holds expert {:?}", expert.expert_id),
            });
        }
        Ok(expert)
    }
}

/// Kinds of failure [`FaultyLoader`] injects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The read itself fails.
    Io,
    /// One byte of the file is flipped before decoding.
    BitFlip,
    /// The file is cut short before decoding.
    Truncate,
    /// The file decodes but claims a different base, so the merge refuses it.
    StaleBase,
}

/// Disk loader that fails a seeded fraction of loads. Used to exercise the
/// manager's failure paths; every injected fault must surface as a typed
/// error and leave serving on the base.
#[derive(Debug)]
pub struct FaultyLoader {
    rate: f64,
    rng: Rng,
    injected: Vec<Fault>,
}

impl FaultyLoader {
    pub const DEFAULT_RATE: f64 = 0.25;

    pub fn new(rate: f64, seed: u64) -> Self {
        Self {
            rate,
            rng: Rng::new(seed),
            injected: Vec::new(),
        }
    }

    /// Faults injected so far, in order.
    pub fn injected(&self) -> &[Fault] {
        &self.injected
    }
}

impl ExpertLoader for FaultyLoader {
    fn name(&self) -> &'static str {
        "faulty"
    }

    fn load(&mut self, entry: &RegistryEntry) -> Result<LoraExpert> {
        if self.rng.uniform() >= self.rate {
            return DiskLoader.load(entry);
        }
        let fault = [Fault::Io, Fault::BitFlip, Fault::Truncate, Fault::StaleBase][self.rng.below(4)];
        self.injected.push(fault);
        if fault == Fault::Io {
            return Err(CoreError::Io(std::io::Error::other("injected read failure")));
        }
        let mut bytes = std::fs::read(&entry.path)?;
        match fault {
            Fault::BitFlip => {
                let i = self.rng.below(bytes.len());
                bytes[i] ^= 1 << self.rng.below(8);
                decode_expert(&bytes)
            }
            Fault::Truncate => {
                let keep = self.rng.below(bytes.len());
                decode_expert(&bytes[..keep])
            }
            _ => {
                let mut e = decode_expert(&bytes)?;
                e.base_fingerprint ^= self.rng.next_u64() | 1;
                Ok(e)
            }
        }
    }
}

pub fn loaders() -> Registry<dyn ExpertLoader> {
    let mut r: Registry<dyn ExpertLoader> = Registry::new("expert loader");
    r.register("disk", || Box::new(DiskLoader))
        .register("faulty", || Box::new(FaultyLoader::new(FaultyLoader::DEFAULT_RATE, 0)));
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceRequest {
    pub instruction: Instruction,
    pub observation: Observation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceResponse {
    pub action_chunk: ActionChunk,
    pub expert_id: Option<String>,
    pub switched: bool,
    pub switch_latency_ms: Option<f64>,
    pub macs: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SwitchStats {
    pub switches: u64,
    pub failed_switches: u64,
    pub latencies_ms: Vec<f64>,
    pub hits: u64,
    pub misses: u64,
    pub requests: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsReport {
    pub switches: u64,
    pub failed_switches: u64,
    pub latency_min_ms: f64,
    pub latency_mean_ms: f64,
    pub latency_p99_ms: f64,
    pub hits: u64,
    pub misses: u64,
    pub requests: u64,
}

/// Nearest-rank percentile, `q` in (0, 1]. Zero for an empty sample.
pub fn percentile(samples: &[f64], q: f64) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64).ceil() as usize).clamp(1, s.len());
    s[rank - 1]
}

impl SwitchStats {
    pub fn report(&self) -> StatsReport {
        let l = &self.latencies_ms;
        let (min, mean) = if l.is_empty() {
            (0.0, 0.0)
        } else {
            (
                l.iter().copied().fold(f64::INFINITY, f64::min),
                l.iter().sum::<f64>() / l.len() as f64,
            )
        };
        StatsReport {
            switches: self.switches,
            failed_switches: self.failed_switches,
            latency_min_ms: min,
            latency_mean_ms: mean,
            latency_p99_ms: percentile(l, 0.99),
            hits: self.hits,
            misses: self.misses,
            requests: self.requests,
        }
    }
}

pub struct Manager {
    base: BackboneWeights,
    base_fingerprint: u64,
    serving: BackboneWeights,
    active: Option<String>,
    registry: ExpertRegistry,
    loader: Box<dyn ExpertLoader>,
    stats: SwitchStats,
}

impl std::fmt::Debug for Manager {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Manager")
            .field("base_fingerprint", &format_args!("{:016x}", self.base_fingerprint))
            .field("active", &self.active)
            .field("experts", &self.registry.len())
            .field("loader", &self.loader.name())
            .finish()
    }
}

impl Manager {
    /// Takes ownership of a frozen base. Serving starts as a copy of it.
    pub fn new(base: BackboneWeights, registry: ExpertRegistry, loader: Box<dyn ExpertLoader>) -> Result<Self> {
        if !base.is_frozen() {
            return Err(CoreError::Contract("manager requires a frozen base".into()));
        }
        Ok(Self {
            base_fingerprint: store::fingerprint(&base),
            serving: base.clone(),
            base,
            active: None,
            registry,
            loader,
            stats: SwitchStats::default(),
        })
    }

    /// Loads a base checkpoint and a manifest from disk.
    pub fn open(base_path: &Path, manifest: &Path, on_miss: MissPolicy, loader: Box<dyn ExpertLoader>) -> Result<Self> {
        let mut base = store::load_base(base_path)?;
        base.freeze();
        Self::new(base, load_registry(manifest, on_miss)?, loader)
    }

    pub fn base(&self) -> &BackboneWeights {
        &self.base
    }

    pub fn base_fingerprint(&self) -> u64 {
        self.base_fingerprint
    }

    pub fn serving(&self) -> &BackboneWeights {
        &self.serving
    }

    pub fn active(&self) -> Option<&str> {
        self.active.as_deref()
    }

    pub fn registry(&self) -> &ExpertRegistry {
        &self.registry
    }

    pub fn loader_name(&self) -> &'static str {
        self.loader.name()
    }

    pub fn stats(&self) -> &SwitchStats {
        &self.stats
    }

    /// Swaps the routing table. Serving goes back to the base first, since
    /// the active expert may no longer be registered.
    pub fn replace_registry(&mut self, registry: ExpertRegistry) {
        self.restore();
        self.registry = registry;
    }

    /// Re-reads the manifest the current registry came from.
    pub fn reload_registry(&mut self) -> Result<usize> {
        let path = self
            .registry
            .source()
            .ok_or_else(|| CoreError::Contract("registry was not loaded from a manifest".into()))?
            .to_path_buf();
        let reg = load_registry(&path, self.registry.on_miss())?;
        let n = reg.len();
        self.replace_registry(reg);
        Ok(n)
    }

    /// Expert id for `instruction`, or `None` for the base under the
    /// fallback policy. Counts a hit or a miss.
    pub fn route(&mut self, instruction: &str) -> Result<Option<String>> {
        self.stats.requests += 1;
        match self.registry.lookup(instruction) {
            Some(e) => {
                self.stats.hits += 1;
                Ok(Some(e.expert_id.clone()))
            }
            None => {
                self.stats.misses += 1;
                match self.registry.on_miss() {
                    MissPolicy::BaseFallback => Ok(None),
                    MissPolicy::Reject => Err(CoreError::UnknownTask(store::normalize_instruction(instruction))),
                }
            }
        }
    }

    /// Deep copy of the cached base into serving.
    fn copy_base(&mut self) {
        for (s, b) in self.serving.layers_mut_unchecked().zip(self.base.layers()) {
            s.matrix.data_mut().copy_from_slice(b.matrix.data());
        }
    }

    fn restore(&mut self) {
        if self.active.take().is_some() {
            self.copy_base();
        }
    }

    fn load_and_merge(&mut self, expert_id: &str) -> Result<()> {
        let entry = self
            .registry
            .entry_for_expert(expert_id)
            .ok_or_else(|| CoreError::UnknownTask(expert_id.to_string()))?
            .clone();
        let expert = self.loader.load(&entry)?;
        if expert.expert_id != expert_id {
            return Err(CoreError::MissingAdapter {
                expert_id: expert_id.to_string(),
                path: entry.path,
                reason: format!("loader returned expert {:?}", expert.expert_id),
            });
        }
        merge_into(&mut self.serving, &expert, self.base_fingerprint)
    }

    /// Makes `target` the active expert (`None` = base). Returns the switch
    /// latency in ms, or `None` when `target` is already active. On error
    /// serving is left on the base.
    pub fn switch(&mut self, target: Option<&str>) -> Result<Option<f64>> {
        if target == self.active.as_deref() {
            return Ok(None);
        }
        let t0 = Instant::now();
        self.restore();
        if let Some(k) = target {
            if let Err(e) = self.load_and_merge(k) {
                // merge_into is all-or-nothing; copy anyway so the invariant
                // does not depend on that.
                self.copy_base();
                self.stats.failed_switches += 1;
                return Err(e);
            }
            self.active = Some(k.to_string());
        }
        let ms = t0.elapsed().as_secs_f64() * 1e3;
        self.stats.switches += 1;
        self.stats.latencies_ms.push(ms);
        Ok(Some(ms))
    }

    /// Route, switch if needed, then run the forward pass on serving.
    pub fn infer(&mut self, request: &InferenceRequest) -> Result<InferenceResponse> {
        let cfg = self.base.config();
        request.observation.check(cfg)?;
        if request.instruction.tokens.len() != cfg.max_instr_len {
            return Err(CoreError::Dimension {
                what: "instruction tokens".into(),
                expected: cfg.max_instr_len,
                got: request.instruction.tokens.len(),
            });
        }
        let target = self.route(&request.instruction.raw_text)?;
        let latency = self.switch(target.as_deref())?;
        let out = forward(&self.serving, &request.instruction, &request.observation)?;
        Ok(InferenceResponse {
            action_chunk: out.chunk,
            expert_id: target,
            switched: latency.is_some(),
            switch_latency_ms: latency,
            macs: out.macs,
        })
    }
}
