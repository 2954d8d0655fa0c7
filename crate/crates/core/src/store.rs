//! On-disk container shared by adapters, base checkpoints and task exports,
//! plus the instruction → expert registry manifest.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    "CRLX"                      4
//! version  u16 = 1                     2
//! kind     u8  (0 base, 1 adapter, 2 task)
//! flags    u8  = 0
//! meta_len u32, then meta_len bytes of UTF-8 `key=value\n` lines
//! count    u32
//! count × { name_len u16, name UTF-8, d u32, m u32, r u32, payload }
//! trailer  u64 FNV-1a-64 of every preceding byte
//! ```
//!
//! With `r ≥ 1` the payload is `A` (`r×m`) then `B` (`d×r`) as row-major
//! `f32`. With `r = 0` the payload is one dense `d×m` matrix; base
//! checkpoints and task exports use that form.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::backbone::{BackboneConfig, BackboneWeights};
use crate::error::{CoreError, Result};
use crate::lora::{InjectionPolicy, LoraExpert, LoraLayer};
use crate::tensor::{fnv1a64, Fnv1a, Matrix};

pub const MAGIC: &[u8; 4] = b"CRLX";
pub const VERSION: u16 = 1;

/// Fixed bytes outside metadata and entries: magic, version, kind, flags,
/// meta length, entry count, trailer.
pub const FIXED_OVERHEAD: usize = 4 + 2 + 1 + 1 + 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FileKind {
    Base = 0,
    Adapter = 1,
    Task = 2,
}

impl FileKind {
    fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(FileKind::Base),
            1 => Ok(FileKind::Adapter),
            2 => Ok(FileKind::Task),
            other => Err(CoreError::Format(format!("unknown file kind {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Dense(Matrix),
    LowRank { a: Matrix, b: Matrix },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub payload: Payload,
}

impl Entry {
    fn dims(&self) -> (usize, usize, usize) {
        match &self.payload {
            Payload::Dense(w) => (w.rows(), w.cols(), 0),
            Payload::LowRank { a, b } => (b.rows(), a.cols(), a.rows()),
        }
    }

    fn encoded_len(&self) -> usize {
        let floats = match &self.payload {
            Payload::Dense(w) => w.len(),
            Payload::LowRank { a, b } => a.len() + b.len(),
        };
        2 + self.name.len() + 12 + 4 * floats
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub kind: FileKind,
    pub meta: Vec<(String, String)>,
    pub entries: Vec<Entry>,
}

fn meta_block(meta: &[(String, String)]) -> Result<String> {
    let mut out = String::new();
    for (k, v) in meta {
        if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
            return Err(CoreError::Format(format!("metadata pair {k:?}={v:?} is not encodable")));
        }
        out.push_str(k);
        out.push('=');
        out.push_str(v);
        out.push('\n');
    }
    Ok(out)
}

impl Container {
    pub fn meta_get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn meta_required(&self, key: &str) -> Result<&str> {
        self.meta_get(key)
            .ok_or_else(|| CoreError::Format(format!("missing metadata key {key:?}")))
    }

    pub fn encoded_len(&self) -> Result<usize> {
        Ok(FIXED_OVERHEAD
            + meta_block(&self.meta)?.len()
            + self.entries.iter().map(Entry::encoded_len).sum::<usize>())
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let meta = meta_block(&self.meta)?;
        let mut out = Vec::with_capacity(self.encoded_len()?);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.push(0);
        out.extend_from_slice(&u32_len(meta.len(), "metadata")?.to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&u32_len(self.entries.len(), "entry count")?.to_le_bytes());
        for e in &self.entries {
            let name_len = u16::try_from(e.name.len())
                .map_err(|_| CoreError::Format(format!("entry name too long: {}", e.name)))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            let (d, m, r) = e.dims();
            for v in [d, m, r] {
                out.extend_from_slice(&u32_len(v, "dimension")?.to_le_bytes());
            }
            match &e.payload {
                Payload::Dense(w) => out.extend_from_slice(&w.to_le_bytes()),
                Payload::LowRank { a, b } => {
                    out.extend_from_slice(&a.to_le_bytes());
                    out.extend_from_slice(&b.to_le_bytes());
                }
            }
        }
        let digest = fnv1a64(&out);
        out.extend_from_slice(&digest.to_le_bytes());
        Ok(out)
    }

    /// Parses and verifies a container. Never reads past declared lengths.
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FIXED_OVERHEAD {
            return Err(CoreError::Format(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(CoreError::Format("bad magic".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        let (body, trailer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(trailer.try_into().expect("8-byte trailer"));
        let computed = fnv1a64(body);
        if stored != computed {
            return Err(CoreError::Corrupt { stored, computed });
        }
        if version != VERSION {
            return Err(CoreError::UnsupportedVersion(version));
        }

        let mut cur = Cursor { buf: body, pos: 6 };
        let kind = FileKind::from_u8(cur.u8()?)?;
        let flags = cur.u8()?;
        if flags != 0 {
            return Err(CoreError::Format(format!("unknown flags {flags:#04x}")));
        }
        let meta_len = cur.u32()? as usize;
        let meta_text = std::str::from_utf8(cur.take(meta_len)?)
            .map_err(|_| CoreError::Format("metadata is not UTF-8".into()))?;
        let mut meta = Vec::new();
        for line in meta_text.split_terminator('\n') {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CoreError::Format(format!("metadata line {line:?} lacks '='")))?;
            meta.push((k.to_string(), v.to_string()));
        }
        if !meta_text.is_empty() && !meta_text.ends_with('\n') {
            return Err(CoreError::Format("metadata block not newline-terminated".into()));
        }

        let count = cur.u32()? as usize;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = cur.u16()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| CoreError::Format("entry name is not UTF-8".into()))?
                .to_string();
            let d = cur.u32()? as usize;
            let m = cur.u32()? as usize;
            let r = cur.u32()? as usize;
            let payload = if r == 0 {
                Payload::Dense(cur.matrix(d, m)?)
            } else {
                let a = cur.matrix(r, m)?;
                let b = cur.matrix(d, r)?;
                Payload::LowRank { a, b }
            };
            entries.push(Entry { name, payload });
        }
        if cur.pos != body.len() {
            return Err(CoreError::Format(format!(
                "{} trailing bytes after last entry",
                body.len() - cur.pos
            )));
        }
        Ok(Self { kind, meta, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn u32_len(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| CoreError::Format(format!("{what} {v} exceeds u32")))
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                CoreError::Format(format!(
                    "truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.buf.len() - self.pos
                ))
            })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let n = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| CoreError::Format(format!("matrix {rows}x{cols} overflows")))?;
        let raw = self.take(n)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Matrix::from_vec(rows, cols, data)
            .map_err(|_| CoreError::Format(format!("non-finite payload in {rows}x{cols} matrix")))
    }
}

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| CoreError::Format(format!("{} has no file name", path.display())))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// FNV-1a-64 over the canonical weight table: per layer, `name_len u16`,
/// name, `rows u32`, `cols u32`, then the row-major `f32` payload.
pub fn fingerprint(weights: &BackboneWeights) -> u64 {
    let mut h = Fnv1a::new();
    for l in weights.layers() {
        h = h
            .update(&(l.name.len() as u16).to_le_bytes())
            .update(l.name.as_bytes())
            .update(&(l.matrix.rows() as u32).to_le_bytes())
            .update(&(l.matrix.cols() as u32).to_le_bytes());
        for v in l.matrix.data() {
            h = h.update(&v.to_le_bytes());
        }
    }
    h.finish()
}

const RESERVED_KEYS: [&str; 5] = ["expert_id", "r", "alpha", "base_fingerprint", "policy"];

fn expert_container(expert: &LoraExpert) -> Result<Container> {
    let mut meta = vec![
        ("expert_id".to_string(), expert.expert_id.clone()),
        ("r".to_string(), expert.rank.to_string()),
        ("alpha".to_string(), expert.alpha.to_string()),
        ("base_fingerprint".to_string(), format!("{:016x}", expert.base_fingerprint)),
        ("policy".to_string(), expert.policy.encode()),
    ];
    for (k, v) in &expert.meta {
        if RESERVED_KEYS.contains(&k.as_str()) {
            return Err(CoreError::Format(format!("metadata key {k:?} is reserved")));
        }
        meta.push((k.clone(), v.clone()));
    }
    Ok(Container {
        kind: FileKind::Adapter,
        meta,
        entries: expert
            .layers
            .iter()
            .map(|l| Entry {
                name: l.name.clone(),
                payload: Payload::LowRank {
                    a: l.a.clone(),
                    b: l.b.clone(),
                },
            })
            .collect(),
    })
}

/// Byte budget of an adapter file, split by role.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpertLayout {
    /// Magic, version, kind, flags, length fields and trailer.
    pub fixed: usize,
    /// UTF-8 metadata block.
    pub meta: usize,
    /// Per-layer name and shape fields.
    pub entry_headers: usize,
    /// `4·Σ r·(d + m)`.
    pub payload: usize,
}

impl ExpertLayout {
    pub fn total(&self) -> usize {
        self.fixed + self.meta + self.entry_headers + self.payload
    }
}

pub fn expert_layout(expert: &LoraExpert) -> ExpertLayout {
    let meta: usize = expert_container(expert)
        .map(|c| meta_block(&c.meta).map(|m| m.len()).unwrap_or(0))
        .unwrap_or(0);
    ExpertLayout {
        fixed: FIXED_OVERHEAD,
        meta,
        entry_headers: expert.layers.iter().map(|l| 2 + l.name.len() + 12).sum(),
        payload: expert.layers.iter().map(|l| 4 * (l.a.len() + l.b.len())).sum(),
    }
}

/// Exact serialized size of an adapter file.
pub fn expert_file_len(expert: &LoraExpert) -> usize {
    expert_layout(expert).total()
}

pub fn encode_expert(expert: &LoraExpert) -> Result<Vec<u8>> {
    expert.validate()?;
    expert_container(expert)?.encode()
}

pub fn decode_expert(bytes: &[u8]) -> Result<LoraExpert> {
    let c = Container::decode(bytes)?;
    if c.kind != FileKind::Adapter {
        return Err(CoreError::Format(format!("expected adapter file, found {:?}", c.kind)));
    }
    let rank: usize = parse_meta(&c, "r")?;
    let alpha: f32 = parse_meta(&c, "alpha")?;
    let fp_text = c.meta_required("base_fingerprint")?;
    let base_fingerprint = u64::from_str_radix(fp_text, 16)
        .map_err(|_| CoreError::Format(format!("bad base_fingerprint {fp_text:?}")))?;
    let policy = InjectionPolicy::parse(c.meta_required("policy")?)
        .map_err(|e| CoreError::Format(e.to_string()))?;
    let meta: BTreeMap<String, String> = c
        .meta
        .iter()
        .filter(|(k, _)| !RESERVED_KEYS.contains(&k.as_str()))
        .cloned()
        .collect();
    let expert_id = c.meta_required("expert_id")?.to_string();
    let mut layers = Vec::with_capacity(c.entries.len());
    for e in c.entries {
        match e.payload {
            Payload::LowRank { a, b } => layers.push(LoraLayer { name: e.name, a, b }),
            Payload::Dense(_) => {
                return Err(CoreError::Format(format!("adapter entry {} has rank 0", e.name)))
            }
        }
    }
    let expert = LoraExpert {
        expert_id,
        rank,
        alpha,
        policy,
        layers,
        base_fingerprint,
        meta,
    };
    expert.validate().map_err(|e| CoreError::Format(e.to_string()))?;
    Ok(expert)
}

fn parse_meta<N: std::str::FromStr>(c: &Container, key: &str) -> Result<N> {
    let v = c.meta_required(key)?;
    v.parse()
        .map_err(|_| CoreError::Format(format!("bad {key} value {v:?}")))
}

pub fn save_expert(expert: &LoraExpert, path: &Path) -> Result<()> {
    write_atomic(path, &encode_expert(expert)?)
}

pub fn load_expert(path: &Path) -> Result<LoraExpert> {
    decode_expert(&fs::read(path)?)
}

fn base_container(weights: &BackboneWeights) -> Container {
    let mut meta = weights.config().to_pairs();
    meta.push(("frozen".into(), if weights.is_frozen() { "1" } else { "0" }.into()));
    Container {
        kind: FileKind::Base,
        meta,
        entries: weights
            .layers()
            .iter()
            .map(|l| Entry {
                name: l.name.clone(),
                payload: Payload::Dense(l.matrix.clone()),
            })
            .collect(),
    }
}

pub fn encode_base(weights: &BackboneWeights) -> Result<Vec<u8>> {
    base_container(weights).encode()
}

pub fn decode_base(bytes: &[u8]) -> Result<BackboneWeights> {
    let c = Container::decode(bytes)?;
    if c.kind != FileKind::Base {
        return Err(CoreError::Format(format!("expected base checkpoint, found {:?}", c.kind)));
    }
    let config = BackboneConfig::default()
        .apply_pairs(c.meta.iter().map(|(k, v)| (k.as_str(), v.as_str())))
        .map_err(|e| CoreError::Format(e.to_string()))?;
    let specs = crate::backbone::layer_specs(&config);
    if specs.len() != c.entries.len() {
        return Err(CoreError::Format(format!(
            "checkpoint has {} layers, config implies {}",
            c.entries.len(),
            specs.len()
        )));
    }
    let frozen = c.meta_get("frozen") == Some("1");
    let mut mats = Vec::with_capacity(specs.len());
    for (spec, e) in specs.iter().zip(c.entries) {
        if spec.name != e.name {
            return Err(CoreError::Format(format!("layer {} where {} expected", e.name, spec.name)));
        }
        match e.payload {
            Payload::Dense(w) => mats.push(w),
            Payload::LowRank { .. } => {
                return Err(CoreError::Format(format!("base layer {} is low-rank", e.name)))
            }
        }
    }
    let mut weights = BackboneWeights::from_matrices(config, mats)
        .map_err(|e| CoreError::Format(e.to_string()))?;
    if frozen {
        weights.freeze();
    }
    Ok(weights)
}

pub fn save_base(weights: &BackboneWeights, path: &Path) -> Result<()> {
    write_atomic(path, &encode_base(weights)?)
}

pub fn load_base(path: &Path) -> Result<BackboneWeights> {
    decode_base(&fs::read(path)?)
}

/// Lowercase, trim, collapse internal whitespace runs to one space.
pub fn normalize_instruction(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// What routing does with an instruction absent from the registry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MissPolicy {
    #[default]
    BaseFallback,
    Reject,
}

impl MissPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "base_fallback" | "fallback" => Ok(MissPolicy::BaseFallback),
            "reject" => Ok(MissPolicy::Reject),
            _ => Err(CoreError::Config(format!("unknown miss policy {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MissPolicy::BaseFallback => "base_fallback",
            MissPolicy::Reject => "reject",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistryEntry {
    pub instruction: String,
    pub expert_id: String,
    pub path: PathBuf,
    pub file_bytes: u64,
}

/// Exact-match routing table from normalized instruction to adapter file.
#[derive(Clone, Debug, Default)]
pub struct ExpertRegistry {
    entries: Vec<RegistryEntry>,
    by_instruction: HashMap<String, usize>,
    on_miss: MissPolicy,
    source: Option<PathBuf>,
}

impl ExpertRegistry {
    pub fn empty(on_miss: MissPolicy) -> Self {
        Self {
            on_miss,
            ..Default::default()
        }
    }

    /// Validates `(instruction, expert_id, path)` triples: normalized
    /// instructions must be unique and every path must hold an adapter with
    /// the declared id.
    pub fn from_entries<I>(items: I, on_miss: MissPolicy) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, PathBuf)>,
    {
        let mut reg = Self::empty(on_miss);
        for (instruction, expert_id, path) in items {
            let instruction = normalize_instruction(&instruction);
            if let Some(&prev) = reg.by_instruction.get(&instruction) {
                let first = &reg.entries[prev];
                return Err(CoreError::Collision {
                    instruction,
                    first: format!("{} ({})", first.expert_id, first.path.display()),
                    second: format!("{} ({})", expert_id, path.display()),
                });
            }
            let missing = |reason: String| CoreError::MissingAdapter {
                expert_id: expert_id.clone(),
                path: path.clone(),
                reason,
            };
            let bytes = fs::read(&path).map_err(|e| missing(e.to_string()))?;
            let expert = decode_expert(&bytes).map_err(|e| missing(e.to_string()))?;
            if expert.expert_id != expert_id {
                return Err(missing(format!("file holds expert {:?}", expert.expert_id)));
            }
            reg.by_instruction.insert(instruction.clone(), reg.entries.len());
            reg.entries.push(RegistryEntry {
                instruction,
                expert_id,
                path,
                file_bytes: bytes.len() as u64,
            });
        }
        Ok(reg)
    }

    pub fn entries(&self) -> &[RegistryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn on_miss(&self) -> MissPolicy {
        self.on_miss
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    pub fn lookup(&self, instruction: &str) -> Option<&RegistryEntry> {
        self.by_instruction
            .get(&normalize_instruction(instruction))
            .map(|&i| &self.entries[i])
    }

    pub fn entry_for_expert(&self, expert_id: &str) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.expert_id == expert_id)
    }

    /// Sum of adapter file sizes over distinct experts.
    pub fn total_adapter_bytes(&self) -> u64 {
        let mut seen = std::collections::HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.expert_id.as_str()))
            .map(|e| e.file_bytes)
            .sum()
    }
}

/// One manifest line: `instruction TAB expert_id TAB path`.
pub fn manifest_line(instruction: &str, expert_id: &str, path: &Path) -> String {
    format!("{}\t{}\t{}", normalize_instruction(instruction), expert_id, path.display())
}

/// Loads a TAB-separated manifest. Relative paths resolve against the
/// manifest's directory; blank lines and `#` lines are skipped.
pub fn load_registry(manifest_path: &Path, on_miss: MissPolicy) -> Result<ExpertRegistry> {
    let text = fs::read_to_string(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CoreError::Format(format!(
                "{}:{}: expected 3 TAB-separated fields, found {}",
                manifest_path.display(),
                lineno + 1,
                fields.len()
            )));
        }
        let path = Path::new(fields[2].trim());
        let path = if path.is_absolute() { path.to_path_buf() } else { dir.join(path) };
        items.push((fields[0].to_string(), fields[1].trim().to_string(), path));
    }
    let mut reg = ExpertRegistry::from_entries(items, on_miss)?;
    reg.source = Some(manifest_path.to_path_buf());
    Ok(reg)
}
