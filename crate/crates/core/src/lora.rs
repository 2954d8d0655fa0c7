//! Low-rank task experts and the merge arithmetic `W' = W + (α/r)·B·A`.

use std::collections::{BTreeMap, BTreeSet};

use crate::backbone::{layer_specs, param_count, BackboneConfig, BackboneWeights, Component, LayerKind, LayerSpec};
use crate::error::{CoreError, Result};
use crate::store;
use crate::tensor::{Matrix, Rng};

/// Standard deviation of the `A` factor at initialization; `B` starts at zero.
pub const A_INIT_STD: f32 = 0.02;

/// Which backbone layers receive an adapter.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InjectionPolicy {
    kinds: BTreeSet<LayerKind>,
    components: BTreeSet<Component>,
}

impl Default for InjectionPolicy {
    /// Attention query and value projections in both encoder and action head.
    fn default() -> Self {
        Self {
            kinds: [LayerKind::AttnQ, LayerKind::AttnV].into(),
            components: [Component::Encoder, Component::ActionHead].into(),
        }
    }
}

impl InjectionPolicy {
    pub fn new(
        kinds: impl IntoIterator<Item = LayerKind>,
        components: impl IntoIterator<Item = Component>,
    ) -> Result<Self> {
        let kinds: BTreeSet<_> = kinds.into_iter().collect();
        let components: BTreeSet<_> = components.into_iter().collect();
        if kinds.is_empty() || components.is_empty() {
            return Err(CoreError::Config("injection policy targets nothing".into()));
        }
        Ok(Self { kinds, components })
    }

    pub fn kinds(&self) -> impl Iterator<Item = LayerKind> + '_ {
        self.kinds.iter().copied()
    }

    pub fn components(&self) -> impl Iterator<Item = Component> + '_ {
        self.components.iter().copied()
    }

    pub fn targets_layer(&self, spec: &LayerSpec) -> bool {
        self.kinds.contains(&spec.kind) && self.components.contains(&spec.component)
    }

    /// Targeted layers of `config`, in backbone order.
    pub fn targets(&self, config: &BackboneConfig) -> Vec<LayerSpec> {
        layer_specs(config)
            .into_iter()
            .filter(|s| self.targets_layer(s))
            .collect()
    }

    /// `attn_q,attn_v@encoder,action_head`.
    pub fn encode(&self) -> String {
        let kinds: Vec<_> = self.kinds.iter().map(|k| k.as_str()).collect();
        let comps: Vec<_> = self.components.iter().map(|c| c.as_str()).collect();
        format!("{}@{}", kinds.join(","), comps.join(","))
    }

    pub fn parse(s: &str) -> Result<Self> {
        let (kinds, comps) = s
            .split_once('@')
            .ok_or_else(|| CoreError::Config(format!("policy {s:?} lacks '@'")))?;
        let kinds = kinds
            .split(',')
            .filter(|k| !k.is_empty())
            .map(LayerKind::parse)
            .collect::<Result<Vec<_>>>()?;
        let comps = comps
            .split(',')
            .filter(|c| !c.is_empty())
            .map(Component::parse)
            .collect::<Result<Vec<_>>>()?;
        Self::new(kinds, comps)
    }
}

/// One adapted layer: `A` is `r × m`, `B` is `d × r`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub name: String,
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraLayer {
    /// `(d, m)` of the weight this layer adapts.
    pub fn target_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraExpert {
    pub expert_id: String,
    pub rank: usize,
    pub alpha: f32,
    pub policy: InjectionPolicy,
    /// Adapted layers in backbone order.
    pub layers: Vec<LoraLayer>,
    pub base_fingerprint: u64,
    pub meta: BTreeMap<String, String>,
}

impl LoraExpert {
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn layer(&self, name: &str) -> Option<&LoraLayer> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn layer_mut(&mut self, name: &str) -> Option<&mut LoraLayer> {
        self.layers.iter_mut().find(|l| l.name == name)
    }

    /// Checks rank/alpha bounds and per-layer factor shapes.
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(CoreError::Config("expert rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(CoreError::Config(format!("expert alpha {} must be > 0", self.alpha)));
        }
        for l in &self.layers {
            if l.a.rows() != self.rank || l.b.cols() != self.rank {
                return Err(CoreError::Format(format!(
                    "layer {} factors {:?}/{:?} disagree with rank {}",
                    l.name,
                    l.a.shape(),
                    l.b.shape(),
                    self.rank
                )));
            }
        }
        Ok(())
    }

    /// Checks that every adapted layer exists in `config` with matching shape.
    pub fn check_against(&self, config: &BackboneConfig) -> Result<()> {
        let specs = layer_specs(config);
        for l in &self.layers {
            let spec = specs
                .iter()
                .find(|s| s.name == l.name)
                .ok_or_else(|| CoreError::UnknownLayer(l.name.clone()))?;
            if (spec.rows, spec.cols) != l.target_shape() {
                return Err(CoreError::Format(format!(
                    "layer {} expects {}x{}, adapter covers {:?}",
                    l.name,
                    spec.rows,
                    spec.cols,
                    l.target_shape()
                )));
            }
        }
        Ok(())
    }
}

/// Fresh expert bound to `base`: `A ~ N(0, 0.02²)`, `B = 0`, so the initial
/// delta is exactly zero.
pub fn init_expert(
    expert_id: impl Into<String>,
    base: &BackboneWeights,
    policy: &InjectionPolicy,
    rank: usize,
    alpha: f32,
    seed: u64,
) -> Result<LoraExpert> {
    let targets = policy.targets(base.config());
    if targets.is_empty() {
        return Err(CoreError::Config(format!(
            "policy {} matches no layer of this backbone",
            policy.encode()
        )));
    }
    let root = Rng::new(seed);
    let layers = targets
        .iter()
        .enumerate()
        .map(|(i, s)| LoraLayer {
            name: s.name.clone(),
            a: Matrix::gaussian(&mut root.fork(i as u64), rank, s.cols, A_INIT_STD),
            b: Matrix::zeros(s.rows, rank),
        })
        .collect();
    let mut meta = BTreeMap::new();
    meta.insert("seed".to_string(), seed.to_string());
    meta.insert("created_at".to_string(), "0".to_string());
    let expert = LoraExpert {
        expert_id: expert_id.into(),
        rank,
        alpha,
        policy: policy.clone(),
        layers,
        base_fingerprint: store::fingerprint(base),
        meta,
    };
    expert.validate()?;
    Ok(expert)
}

/// `(α/r)·B·A` for one adapted layer.
pub fn delta(expert: &LoraExpert, layer_name: &str) -> Result<Matrix> {
    let layer = expert
        .layer(layer_name)
        .ok_or_else(|| CoreError::UnknownLayer(layer_name.to_string()))?;
    Ok(layer.b.matmul(&layer.a)?.scale(expert.scale()))
}

/// Folds `expert` into a copy of `weights`. Untargeted layers are untouched.
pub fn merge(weights: &BackboneWeights, expert: &LoraExpert) -> Result<BackboneWeights> {
    let mut out = weights.clone();
    merge_into(&mut out, expert, store::fingerprint(weights))?;
    Ok(out)
}

/// In-place merge used by the manager, which already knows the fingerprint
/// of the pristine base `serving` was restored from. Either every targeted
/// layer is updated or, on error, none is.
pub fn merge_into(serving: &mut BackboneWeights, expert: &LoraExpert, base_fingerprint: u64) -> Result<()> {
    if !serving.is_frozen() {
        return Err(CoreError::Contract("merge requires a frozen backbone".into()));
    }
    if expert.base_fingerprint != base_fingerprint {
        return Err(CoreError::StaleExpert {
            expected: base_fingerprint,
            found: expert.base_fingerprint,
        });
    }
    expert.validate()?;
    expert.check_against(serving.config())?;
    let scale = expert.scale();
    let mut merged = Vec::with_capacity(expert.layers.len());
    for l in &expert.layers {
        let w = &serving
            .layer(&l.name)
            .ok_or_else(|| CoreError::UnknownLayer(l.name.clone()))?
            .matrix;
        merged.push(w.add_scaled(&l.b.matmul(&l.a)?, scale)?);
    }
    for (l, m) in expert.layers.iter().zip(merged) {
        *serving.matrix_mut_unchecked(&l.name)? = m;
    }
    Ok(())
}

/// `Σ r·(d + m)` over adapted layers.
pub fn expert_param_count(expert: &LoraExpert) -> usize {
    expert
        .layers
        .iter()
        .map(|l| {
            let (d, m) = l.target_shape();
            expert.rank * (d + m)
        })
        .sum()
}

/// Exact byte length of the expert's on-disk file.
pub fn expert_size_bytes(expert: &LoraExpert) -> usize {
    store::expert_file_len(expert)
}

/// Full-backbone parameters per expert parameter.
pub fn compression_ratio(config: &BackboneConfig, expert: &LoraExpert) -> f64 {
    param_count(config) as f64 / expert_param_count(expert) as f64
}

/// `Σ r·(d + m)` over the layers `policy` would adapt in `config`, without
/// materializing anything. Agrees with [`expert_param_count`] on real experts.
pub fn projected_param_count(config: &BackboneConfig, policy: &InjectionPolicy, rank: usize) -> usize {
    policy
        .targets(config)
        .iter()
        .map(|s| rank * (s.rows + s.cols))
        .sum()
}

pub fn projected_compression_ratio(config: &BackboneConfig, policy: &InjectionPolicy, rank: usize) -> f64 {
    param_count(config) as f64 / projected_param_count(config, policy, rank) as f64
}
