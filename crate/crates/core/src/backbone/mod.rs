//! The frozen policy backbone: an attention encoder that fuses an instruction
//! with an observation token, and an attention action head that turns the
//! fused sequence plus proprioception into an `H × d_a` action chunk.

mod model;
mod vocab;

use std::collections::HashMap;

pub use model::{mac_count, ActionTape, BackwardSink, EncoderTape, ForwardTape, Model};
pub use vocab::Vocabulary;

use crate::error::{CoreError, Result};
use crate::tensor::{Matrix, Real, Rng};

/// Standard deviation of every freshly initialized backbone weight.
pub const INIT_STD: f32 = 0.02;

/// MLP hidden width as a multiple of `model_dim`.
pub const MLP_RATIO: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BackboneConfig {
    pub model_dim: usize,
    pub enc_layers: usize,
    pub act_layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_instr_len: usize,
    pub obs_dim: usize,
    pub proprio_dim: usize,
    pub chunk_horizon: usize,
    pub action_dim: usize,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            model_dim: 64,
            enc_layers: 2,
            act_layers: 2,
            heads: 4,
            vocab_size: 64,
            max_instr_len: 8,
            obs_dim: 32,
            proprio_dim: 8,
            chunk_horizon: 8,
            action_dim: 23,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("model_dim", self.model_dim),
            ("enc_layers", self.enc_layers),
            ("act_layers", self.act_layers),
            ("heads", self.heads),
            ("vocab_size", self.vocab_size),
            ("max_instr_len", self.max_instr_len),
            ("obs_dim", self.obs_dim),
            ("proprio_dim", self.proprio_dim),
            ("chunk_horizon", self.chunk_horizon),
            ("action_dim", self.action_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CoreError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.model_dim % self.heads != 0 {
            return Err(CoreError::Config(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.vocab_size > u32::MAX as usize {
            return Err(CoreError::Config("vocab_size exceeds u32".into()));
        }
        Ok(())
    }

    /// Encoder sequence length `L`: instruction tokens plus one observation token.
    pub fn seq_len(&self) -> usize {
        self.max_instr_len + 1
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.model_dim * MLP_RATIO
    }

    /// Key/value pairs in the same text form used by file metadata.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("model_dim", self.model_dim.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("act_layers", self.act_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_instr_len", self.max_instr_len.to_string()),
            ("obs_dim", self.obs_dim.to_string()),
            ("proprio_dim", self.proprio_dim.to_string()),
            ("chunk_horizon", self.chunk_horizon.to_string()),
            ("action_dim", self.action_dim.to_string()),
            ("seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    /// Applies recognised keys from `pairs` on top of `self`; unknown keys are ignored.
    pub fn apply_pairs<'a, I>(mut self, pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        for (k, v) in pairs {
            let slot = match k {
                "model_dim" => &mut self.model_dim,
                "enc_layers" => &mut self.enc_layers,
                "act_layers" => &mut self.act_layers,
                "heads" => &mut self.heads,
                "vocab_size" => &mut self.vocab_size,
                "max_instr_len" => &mut self.max_instr_len,
                "obs_dim" => &mut self.obs_dim,
                "proprio_dim" => &mut self.proprio_dim,
                "chunk_horizon" => &mut self.chunk_horizon,
                "action_dim" => &mut self.action_dim,
                "seed" => {
                    self.seed = parse_num(k, v)?;
                    continue;
                }
                _ => continue,
            };
            *slot = parse_num(k, v)?;
        }
        self.validate()?;
        Ok(self)
    }
}

fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .trim()
        .parse()
        .map_err(|_| CoreError::Config(format!("{key}: cannot parse {value:?}")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerKind {
    AttnQ,
    AttnK,
    AttnV,
    AttnO,
    Mlp,
    Embed,
    OutProj,
}

impl LayerKind {
    pub const ALL: [LayerKind; 7] = [
        LayerKind::AttnQ,
        LayerKind::AttnK,
        LayerKind::AttnV,
        LayerKind::AttnO,
        LayerKind::Mlp,
        LayerKind::Embed,
        LayerKind::OutProj,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::AttnQ => "attn_q",
            LayerKind::AttnK => "attn_k",
            LayerKind::AttnV => "attn_v",
            LayerKind::AttnO => "attn_o",
            LayerKind::Mlp => "mlp",
            LayerKind::Embed => "embed",
            LayerKind::OutProj => "out_proj",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| CoreError::Config(format!("unknown layer kind {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Encoder,
    ActionHead,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::Encoder => "encoder",
            Component::ActionHead => "action_head",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "encoder" => Ok(Component::Encoder),
            "action_head" => Ok(Component::ActionHead),
            _ => Err(CoreError::Config(format!("unknown component {s:?}"))),
        }
    }
}

/// Name, role and shape of one weight matrix, derived purely from the config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub component: Component,
    pub rows: usize,
    pub cols: usize,
}

/// The full ordered layer table for a config. The order is the storage order.
pub fn layer_specs(config: &BackboneConfig) -> Vec<LayerSpec> {
    let d = config.model_dim;
    let hidden = config.mlp_dim();
    let mut out = Vec::new();
    let mut push = |name: String, kind, component, rows, cols| {
        out.push(LayerSpec {
            name,
            kind,
            component,
            rows,
            cols,
        })
    };
    use Component::*;
    use LayerKind::*;

    push("enc.tok_embed".into(), Embed, Encoder, config.vocab_size, d);
    push("enc.pos_embed".into(), Embed, Encoder, config.seq_len(), d);
    push("enc.obs_proj".into(), Embed, Encoder, d, config.obs_dim);
    for (prefix, comp, n) in [
        ("enc", Encoder, config.enc_layers),
        ("act", ActionHead, config.act_layers),
    ] {
        if comp == ActionHead {
            push("act.query".into(), Embed, ActionHead, config.chunk_horizon, d);
            push("act.proprio_proj".into(), Embed, ActionHead, d, config.proprio_dim);
        }
        for i in 0..n {
            push(format!("{prefix}.{i}.attn.q"), AttnQ, comp, d, d);
            push(format!("{prefix}.{i}.attn.k"), AttnK, comp, d, d);
            push(format!("{prefix}.{i}.attn.v"), AttnV, comp, d, d);
            push(format!("{prefix}.{i}.attn.o"), AttnO, comp, d, d);
            push(format!("{prefix}.{i}.mlp.up"), Mlp, comp, hidden, d);
            push(format!("{prefix}.{i}.mlp.down"), Mlp, comp, d, hidden);
        }
    }
    push("act.out_proj".into(), OutProj, ActionHead, config.action_dim, d);
    out
}

/// Closed-form total parameter count.
pub fn param_count(config: &BackboneConfig) -> usize {
    let d = config.model_dim;
    let block = 4 * d * d + 2 * config.mlp_dim() * d;
    config.vocab_size * d
        + config.seq_len() * d
        + d * config.obs_dim
        + config.enc_layers * block
        + config.chunk_horizon * d
        + d * config.proprio_dim
        + config.act_layers * block
        + config.action_dim * d
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub name: String,
    pub kind: LayerKind,
    pub component: Component,
    pub matrix: Matrix,
}

/// The ordered weight table of one backbone.
///
/// Once frozen, the public mutators refuse to write. Only merge (inside this
/// crate) writes to a frozen table, and only on a serving copy.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneWeights {
    config: BackboneConfig,
    layers: Vec<LayerWeights>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl BackboneWeights {
    /// Builds a table from matrices in [`layer_specs`] order, checking every shape.
    pub fn from_matrices(config: BackboneConfig, matrices: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let specs = layer_specs(&config);
        if specs.len() != matrices.len() {
            return Err(CoreError::Dimension {
                what: "layer count".into(),
                expected: specs.len(),
                got: matrices.len(),
            });
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (spec, matrix) in specs.into_iter().zip(matrices) {
            if matrix.shape() != (spec.rows, spec.cols) {
                return Err(CoreError::Shape {
                    op: "backbone layer",
                    left: (spec.rows, spec.cols),
                    right: matrix.shape(),
                });
            }
            layers.push(LayerWeights {
                name: spec.name,
                kind: spec.kind,
                component: spec.component,
                matrix,
            });
        }
        let index = layers
            .iter()
            .enumerate()
            .map(|(i, l)| (l.name.clone(), i))
            .collect();
        Ok(Self {
            config,
            layers,
            index,
            frozen: false,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn layer(&self, name: &str) -> Option<&LayerWeights> {
        self.index.get(name).map(|&i| &self.layers[i])
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// An unfrozen deep copy, the only legal starting point for full fine-tuning.
    pub fn thawed_copy(&self) -> Self {
        let mut copy = self.clone();
        copy.frozen = false;
        copy
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.matrix.len()).sum()
    }

    /// Mutable access for training; fails on a frozen table.
    pub fn matrix_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        if self.frozen {
            return Err(CoreError::Frozen(name.to_string()));
        }
        self.matrix_mut_unchecked(name)
    }

    /// Mutable access to every matrix in table order; fails on a frozen table.
    pub fn matrices_mut(&mut self) -> Result<impl Iterator<Item = &mut Matrix>> {
        if self.frozen {
            return Err(CoreError::Frozen("<all layers>".into()));
        }
        Ok(self.layers.iter_mut().map(|l| &mut l.matrix))
    }

    pub(crate) fn matrix_mut_unchecked(&mut self, name: &str) -> Result<&mut Matrix> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| CoreError::UnknownLayer(name.to_string()))?;
        Ok(&mut self.layers[i].matrix)
    }

    pub(crate) fn layers_mut_unchecked(&mut self) -> impl Iterator<Item = &mut LayerWeights> {
        self.layers.iter_mut()
    }

    /// Matrices in table order, converted to `T`, ready for [`Model`].
    pub fn params<T: Real>(&self) -> Vec<Matrix<T>> {
        self.layers.iter().map(|l| l.matrix.cast()).collect()
    }

    pub fn model(&self) -> Model<'_, f32> {
        Model::new(&self.config, self.layers.iter().map(|l| &l.matrix).collect())
    }
}

/// Seeded scaled-Gaussian initialization (std [`INIT_STD`]); unfrozen.
pub fn init_backbone(config: &BackboneConfig) -> Result<BackboneWeights> {
    config.validate()?;
    let root = Rng::new(config.seed);
    let matrices = layer_specs(config)
        .iter()
        .enumerate()
        .map(|(i, s)| Matrix::gaussian(&mut root.fork(i as u64), s.rows, s.cols, INIT_STD))
        .collect();
    BackboneWeights::from_matrices(config.clone(), matrices)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instruction {
    pub raw_text: String,
    /// Exactly `max_instr_len` ids, zero-padded.
    pub tokens: Vec<u32>,
}

impl Instruction {
    pub fn from_tokens(raw_text: impl Into<String>, tokens: Vec<u32>, config: &BackboneConfig) -> Result<Self> {
        if tokens.len() > config.max_instr_len {
            return Err(CoreError::Dimension {
                what: "instruction tokens".into(),
                expected: config.max_instr_len,
                got: tokens.len(),
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= config.vocab_size) {
            return Err(CoreError::Dimension {
                what: format!("token id {bad} vs vocab_size"),
                expected: config.vocab_size,
                got: bad as usize,
            });
        }
        let mut tokens = tokens;
        tokens.resize(config.max_instr_len, 0);
        Ok(Self {
            raw_text: raw_text.into(),
            tokens,
        })
    }

    /// Whitespace tokenization over the toy vocabulary, truncated to fit.
    pub fn from_text(text: &str, config: &BackboneConfig) -> Self {
        let vocab = Vocabulary::new(config.vocab_size);
        let mut tokens: Vec<u32> = text
            .split_whitespace()
            .map(|w| vocab.lookup(w))
            .take(config.max_instr_len)
            .collect();
        tokens.resize(config.max_instr_len, 0);
        Self {
            raw_text: text.to_string(),
            tokens,
        }
    }

    pub fn padding(config: &BackboneConfig) -> Self {
        Self {
            raw_text: String::new(),
            tokens: vec![0; config.max_instr_len],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub features: Vec<f32>,
    pub proprio: Vec<f32>,
}

impl Observation {
    pub fn zeros(config: &BackboneConfig) -> Self {
        Self {
            features: vec![0.0; config.obs_dim],
            proprio: vec![0.0; config.proprio_dim],
        }
    }

    pub fn check(&self, config: &BackboneConfig) -> Result<()> {
        if self.features.len() != config.obs_dim {
            return Err(CoreError::Dimension {
                what: "observation".into(),
                expected: config.obs_dim,
                got: self.features.len(),
            });
        }
        if self.proprio.len() != config.proprio_dim {
            return Err(CoreError::Dimension {
                what: "proprio".into(),
                expected: config.proprio_dim,
                got: self.proprio.len(),
            });
        }
        if !self.features.iter().chain(&self.proprio).all(|v| v.is_finite()) {
            return Err(CoreError::NonFinite("observation"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionChunk {
    /// `H × d_a`.
    pub actions: Matrix,
}

/// Encoder output `z`, `L × d`.
pub type EncoderOutput = Matrix;

fn check_instruction(instruction: &Instruction, config: &BackboneConfig) -> Result<()> {
    if instruction.tokens.len() != config.max_instr_len {
        return Err(CoreError::Dimension {
            what: "instruction tokens".into(),
            expected: config.max_instr_len,
            got: instruction.tokens.len(),
        });
    }
    if let Some(&bad) = instruction
        .tokens
        .iter()
        .find(|&&t| t as usize >= config.vocab_size)
    {
        return Err(CoreError::Dimension {
            what: "token id".into(),
            expected: config.vocab_size,
            got: bad as usize,
        });
    }
    Ok(())
}

/// `z = f_enc(observation, instruction)`.
pub fn encode(weights: &BackboneWeights, instruction: &Instruction, observation: &Observation) -> Result<EncoderOutput> {
    let cfg = weights.config();
    check_instruction(instruction, cfg)?;
    observation.check(cfg)?;
    let mut macs = 0;
    let (z, _) = weights
        .model()
        .encode(&instruction.tokens, &observation.features, &mut macs)?;
    Ok(z)
}

/// `â = f_act(z, proprio)`.
pub fn act(weights: &BackboneWeights, z: &EncoderOutput, proprio: &[f32]) -> Result<ActionChunk> {
    let cfg = weights.config();
    if z.shape() != (cfg.seq_len(), cfg.model_dim) {
        return Err(CoreError::Shape {
            op: "act input z",
            left: (cfg.seq_len(), cfg.model_dim),
            right: z.shape(),
        });
    }
    if proprio.len() != cfg.proprio_dim {
        return Err(CoreError::Dimension {
            what: "proprio".into(),
            expected: cfg.proprio_dim,
            got: proprio.len(),
        });
    }
    let mut macs = 0;
    let (actions, _) = weights.model().act(z, proprio, &mut macs)?;
    Ok(ActionChunk { actions })
}

/// Result of a full forward pass, with the multiply-accumulate count.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub chunk: ActionChunk,
    pub macs: u64,
}

/// `(f_act ∘ f_enc)` with MAC accounting.
pub fn forward(weights: &BackboneWeights, instruction: &Instruction, observation: &Observation) -> Result<ForwardOutput> {
    let cfg = weights.config();
    check_instruction(instruction, cfg)?;
    observation.check(cfg)?;
    let model = weights.model();
    let mut macs = 0;
    let (z, _) = model.encode(&instruction.tokens, &observation.features, &mut macs)?;
    let (actions, _) = model.act(&z, &observation.proprio, &mut macs)?;
    Ok(ForwardOutput {
        chunk: ActionChunk { actions },
        macs,
    })
}
