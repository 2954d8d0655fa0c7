//! Acceptance suite. Runs without the libtest harness so every check prints
//! exactly one PASS/FAIL line, even under a plain `cargo test`. Extra
//! arguments that do not start with `-` filter checks by id substring.
//!
//! The first check that needs it pretrains the default backbone (about a
//! minute in release mode); everything after shares that base.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Instant;

use hotlora_cli::commands;
use hotlora_cli::settings::Settings;
use hotlora_core::backbone::{
    forward, init_backbone, mac_count, param_count, BackboneConfig, BackboneWeights, Instruction, Observation,
};
use hotlora_core::lora::{compression_ratio, delta, init_expert, merge, InjectionPolicy, LoraExpert};
use hotlora_core::manager::{loaders, DiskLoader, ExpertLoader, FaultyLoader, InferenceRequest, Manager};
use hotlora_core::store::{
    decode_expert, expert_layout, fingerprint, load_expert, manifest_line, save_base, save_expert,
    MissPolicy,
};
use hotlora_core::taskgen::{bayes_floor, eval_loss, make_conflict_suite, Episode, SuiteConfig, TaskDataset};
use hotlora_core::tensor::{fnv1a64, Matrix, Rng};
use hotlora_core::trainer::{
    self, full_finetune, regimes, train_expert, Objective, PretrainConfig, RegimeOutput, TrainConfig, TrainLog,
    TrainedModel,
};
use hotlora_service::{actions_from_json, Client, Server};
use serde_json::{json, Value};

// Thresholds fixed from oracle runs on the default pretrained base before
// this suite was written. See the decisions ledger for the measurements.

/// 50-step expert vs zero expert on the default `K=2, d=1` suite
/// (oracle: 21.0x and 17.9x).
const EXPERT_GAIN_MIN: f64 = 10.0;
/// Expert eval loss on the default `K=2, d=1` suite (oracle: 0.027, 0.033).
const D1_EXPERT_EVAL_MAX: f64 = 0.05;
/// Sequential full fine-tuning, task-1 loss after phase 2 over after
/// phase 1 (oracle: 21.6x on the default suite, >= 19x on seeds 0..5).
const FORGETTING_MIN: f64 = 10.0;
const LATENCY_P99_MAX_MS: f64 = 100.0;
const STREAM_LEN: usize = 1000;
const FUZZ_CASES: usize = 10_000;
const MONOTONE_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

struct Library {
    _dir: tempfile::TempDir,
    base_path: PathBuf,
    manifest: PathBuf,
    suite: Vec<TaskDataset>,
    experts: Vec<LoraExpert>,
    paths: Vec<PathBuf>,
    logs: Vec<TrainLog>,
    /// Digest checks made while the library was trained, one per step.
    isolation: Vec<String>,
    isolation_ok: bool,
}

#[derive(Default)]
struct Ctx {
    base: OnceLock<BackboneWeights>,
    library: OnceLock<Library>,
    interference: OnceLock<Vec<(String, RegimeOutput, Vec<f64>)>>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn file_digest(p: &Path) -> u64 {
    fnv1a64(&std::fs::read(p).expect("read file"))
}

fn same_bits(a: &BackboneWeights, b: &BackboneWeights) -> bool {
    a.layers().len() == b.layers().len()
        && a.layers().iter().zip(b.layers()).all(|(x, y)| {
            x.name == y.name
                && x.matrix.shape() == y.matrix.shape()
                && x.matrix.data().iter().zip(y.matrix.data()).all(|(p, q)| p.to_bits() == q.to_bits())
        })
}

fn random_observation(cfg: &BackboneConfig, rng: &mut Rng) -> Observation {
    Observation {
        features: (0..cfg.obs_dim).map(|_| rng.normal() as f32).collect(),
        proprio: (0..cfg.proprio_dim).map(|_| rng.normal() as f32).collect(),
    }
}

impl Ctx {
    fn base(&self) -> &BackboneWeights {
        self.base.get_or_init(|| {
            let t = Instant::now();
            let (base, _) = trainer::pretrain(&BackboneConfig::default(), &PretrainConfig::default())
                .expect("pretraining the default base");
            say(&format!(
                "  (pretrained default base in {:.1} s, fingerprint {:016x})",
                t.elapsed().as_secs_f64(),
                fingerprint(&base)
            ));
            base
        })
    }

    /// Eight experts on the default suite, trained one after another with
    /// the base checkpoint and every earlier adapter file re-hashed after
    /// each one.
    fn library(&self) -> &Library {
        self.library.get_or_init(|| {
            let base = self.base();
            let dir = tempfile::tempdir().expect("tempdir");
            let base_path = dir.path().join("base.crlx");
            save_base(base, &base_path).expect("save base");
            let base_file = file_digest(&base_path);
            let base_fp = fingerprint(base);
            let suite = make_conflict_suite(base.config(), &SuiteConfig::default()).expect("suite");
            let cfg = TrainConfig::desk();
            let (mut experts, mut paths, mut logs, mut digests) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            let mut isolation = Vec::new();
            let mut ok = true;
            let mut manifest = String::new();
            for ds in &suite {
                let (e, log) = train_expert(base, ds, &cfg).expect("train expert");
                let p = dir.path().join(format!("{}.crlx", e.expert_id));
                save_expert(&e, &p).expect("save expert");
                manifest.push_str(&manifest_line(
                    &ds.spec.instruction.raw_text,
                    &e.expert_id,
                    Path::new(p.file_name().unwrap()),
                ));
                manifest.push('\n');
                let earlier_same = paths.iter().zip(&digests).all(|(q, d): (&PathBuf, &u64)| file_digest(q) == *d);
                let base_same = file_digest(&base_path) == base_file && fingerprint(base) == base_fp;
                ok &= earlier_same && base_same;
                isolation.push(format!(
                    "{}: base {} earlier adapters ({}) {}",
                    e.expert_id,
                    if base_same { "same" } else { "CHANGED" },
                    paths.len(),
                    if earlier_same { "same" } else { "CHANGED" }
                ));
                digests.push(file_digest(&p));
                paths.push(p);
                experts.push(e);
                logs.push(log);
            }
            let manifest_path = dir.path().join("manifest.tsv");
            std::fs::write(&manifest_path, manifest).expect("write manifest");
            Library {
                _dir: dir,
                base_path,
                manifest: manifest_path,
                suite,
                experts,
                paths,
                logs,
                isolation,
                isolation_ok: ok,
            }
        })
    }

    fn manager(&self, loader: Box<dyn ExpertLoader>) -> Manager {
        let lib = self.library();
        Manager::open(&lib.base_path, &lib.manifest, MissPolicy::BaseFallback, loader).expect("open manager")
    }

    /// Every regime on the default `K=8, d=0.25` suite, each with its desk
    /// preset: same step budget, batch size and optimizer.
    fn interference(&self) -> &[(String, RegimeOutput, Vec<f64>)] {
        self.interference.get_or_init(|| {
            let base = self.base();
            let suite = make_conflict_suite(base.config(), &SuiteConfig::default()).expect("suite");
            ["lora_expert", "full_independent", "full_joint"]
                .iter()
                .map(|m| {
                    let out = regimes()
                        .create(m)
                        .expect("regime")
                        .train(base, &suite, &TrainConfig::desk_for(m))
                        .expect("train regime");
                    let losses = out.eval_losses(base, &suite).expect("eval");
                    (m.to_string(), out, losses)
                })
                .collect()
        })
    }
}

fn say(line: &str) {
    // Written straight to the handle so it is never swallowed by capture.
    let mut out = std::io::stdout();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

// ---------------------------------------------------------------- criteria

fn c01_merge_scale(_: &Ctx) -> Outcome {
    let mut rng = Rng::new(101);
    let mut layers = 0usize;
    let mut worst = 0.0f64;
    let mut worst_merged = 0.0f64;
    let mut scale_ok = true;
    let mut seed = 0u64;
    while layers < 100 {
        let cfg = BackboneConfig {
            model_dim: 8 * (1 + rng.below(6)),
            heads: 2,
            enc_layers: 1 + rng.below(2),
            act_layers: 1 + rng.below(2),
            obs_dim: 4 + rng.below(12),
            action_dim: 1 + rng.below(8),
            seed,
            ..BackboneConfig::default()
        };
        seed += 1;
        let mut base = init_backbone(&cfg).unwrap();
        base.freeze();
        let mut e = init_expert("m", &base, &InjectionPolicy::default(), 16, 32.0, seed).unwrap();
        scale_ok &= e.scale() == 2.0;
        for l in &mut e.layers {
            l.b = Matrix::gaussian(&mut rng, l.b.rows(), l.b.cols(), 0.5);
        }
        let merged = merge(&base, &e).unwrap();
        for l in &e.layers {
            if layers == 100 {
                break;
            }
            let got = delta(&e, &l.name).unwrap();
            let (d, m) = got.shape();
            let w = &base.layer(&l.name).unwrap().matrix;
            let mw = &merged.layer(&l.name).unwrap().matrix;
            let (mut err, mut peak, mut merr, mut mpeak) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for i in 0..d {
                for j in 0..m {
                    let mut acc = 0.0f64;
                    for k in 0..16 {
                        acc += l.b.get(i, k) as f64 * l.a.get(k, j) as f64;
                    }
                    let oracle = 2.0 * acc;
                    err = err.max((got.get(i, j) as f64 - oracle).abs());
                    peak = peak.max(oracle.abs());
                    let moracle = w.get(i, j) as f64 + oracle;
                    merr = merr.max((mw.get(i, j) as f64 - moracle).abs());
                    mpeak = mpeak.max(moracle.abs());
                }
            }
            worst = worst.max(err / peak.max(f64::MIN_POSITIVE));
            worst_merged = worst_merged.max(merr / mpeak.max(f64::MIN_POSITIVE));
            layers += 1;
        }
    }
    outcome(
        scale_ok && worst < 1e-5 && worst_merged < 1e-5,
        format!(
            "scale alpha/r = 2.0 exact: {scale_ok}; max relative error over {layers} layers: delta {worst:.2e}, merged weights {worst_merged:.2e} (limit 1e-5)"
        ),
    )
}

fn c02_zero_init(_: &Ctx) -> Outcome {
    let mut rng = Rng::new(202);
    let mut bad = Vec::new();
    for case in 0..50u64 {
        let heads = 1 + rng.below(4);
        let cfg = BackboneConfig {
            model_dim: heads * (1 + rng.below(8)),
            heads,
            enc_layers: 1 + rng.below(3),
            act_layers: 1 + rng.below(3),
            vocab_size: 4 + rng.below(60),
            max_instr_len: 1 + rng.below(8),
            obs_dim: 1 + rng.below(16),
            proprio_dim: 1 + rng.below(8),
            chunk_horizon: 1 + rng.below(8),
            action_dim: 1 + rng.below(8),
            seed: case,
        };
        let mut base = init_backbone(&cfg).unwrap();
        base.freeze();
        let rank = 1 + rng.below(16);
        let e = init_expert("z", &base, &InjectionPolicy::default(), rank, 2.0 * rank as f32, case).unwrap();
        let merged = merge(&base, &e).unwrap();
        for _ in 0..3 {
            let tokens = (0..cfg.max_instr_len).map(|_| rng.below(cfg.vocab_size) as u32).collect();
            let instr = Instruction::from_tokens("z", tokens, &cfg).unwrap();
            let obs = random_observation(&cfg, &mut rng);
            let a = forward(&base, &instr, &obs).unwrap().chunk.actions;
            let b = forward(&merged, &instr, &obs).unwrap().chunk.actions;
            if a.data() != b.data() {
                bad.push(case);
            }
        }
    }
    outcome(bad.is_empty(), format!("50 random configs x 3 inputs, outputs differing: {bad:?}"))
}

fn c03_switch_roundtrip(ctx: &Ctx) -> Outcome {
    let lib = ctx.library();
    let base = ctx.base();
    let cfg = base.config().clone();
    let oracle: BTreeMap<String, BackboneWeights> = lib
        .paths
        .iter()
        .map(|p| {
            let e = load_expert(p).unwrap();
            (e.expert_id.clone(), merge(base, &e).unwrap())
        })
        .collect();
    let mut texts: Vec<(String, Option<String>)> = lib
        .suite
        .iter()
        .zip(&lib.experts)
        .map(|(d, e)| (d.spec.instruction.raw_text.clone(), Some(e.expert_id.clone())))
        .collect();
    texts.push(("no such task here".into(), None));

    let mut notes = Vec::new();
    let mut ok = true;
    let runs: [(&str, Box<dyn ExpertLoader>); 3] = [
        ("disk", Box::new(DiskLoader)),
        ("faulty 0.25", Box::new(FaultyLoader::new(0.25, 31))),
        ("faulty 0.5", Box::new(FaultyLoader::new(0.5, 32))),
    ];
    for (i, (label, loader)) in runs.into_iter().enumerate() {
        let mut m = ctx.manager(loader);
        let mut rng = Rng::new(300 + i as u64);
        let (mut mismatches, mut failures) = (0usize, 0usize);
        for _ in 0..STREAM_LEN {
            let (text, routed) = &texts[rng.below(texts.len())];
            let before = m.active().map(String::from);
            let req = InferenceRequest {
                instruction: Instruction::from_text(text, &cfg),
                observation: random_observation(&cfg, &mut rng),
            };
            let expected = match m.infer(&req) {
                Ok(_) => routed.clone(),
                Err(_) => {
                    failures += 1;
                    // Only a needed switch may fail.
                    if before == *routed {
                        mismatches += 1;
                    }
                    None
                }
            };
            let want = match &expected {
                None => base,
                Some(id) => &oracle[id],
            };
            if m.active().map(String::from) != expected || !same_bits(m.serving(), want) {
                mismatches += 1;
            }
        }
        let s = m.stats().report();
        ok &= mismatches == 0 && s.failed_switches == failures as u64;
        if label != "disk" {
            ok &= failures > 0;
        }
        notes.push(format!("{label}: {STREAM_LEN} steps, {failures} failed loads, {mismatches} mismatches"));
    }
    outcome(ok, format!("{} experts; {}", lib.experts.len(), notes.join("; ")))
}

fn c04_macs(ctx: &Ctx) -> Outcome {
    let lib = ctx.library();
    let mut m = ctx.manager(Box::new(DiskLoader));
    let cfg = m.base().config().clone();
    let expected = mac_count(&cfg);
    let mut rng = Rng::new(404);
    let mut seen = Vec::new();
    for d in lib.suite.iter().map(|d| d.spec.instruction.raw_text.clone()).chain(["unrouted words".to_string()]) {
        let req = InferenceRequest {
            instruction: Instruction::from_text(&d, &cfg),
            observation: random_observation(&cfg, &mut rng),
        };
        let base_macs = forward(m.base(), &req.instruction, &req.observation).unwrap().macs;
        let resp = m.infer(&req).unwrap();
        seen.push((resp.expert_id.is_some(), resp.macs, base_macs));
    }
    let ok = seen.iter().all(|&(_, a, b)| a == expected && b == expected);
    outcome(
        ok,
        format!(
            "MACs per request {expected}; {} requests with a merged expert and 1 on the base, all equal: {ok}",
            seen.iter().filter(|s| s.0).count()
        ),
    )
}

fn c05_latency(ctx: &Ctx) -> Outcome {
    let lib = ctx.library();
    let mut m = ctx.manager(Box::new(DiskLoader));
    let cfg = m.base().config().clone();
    let mut rng = Rng::new(505);
    let n = lib.suite.len();
    for i in 0..STREAM_LEN {
        // Step through experts so every request switches.
        let k = (i + rng.below(n - 1) + 1) % n;
        let req = InferenceRequest {
            instruction: Instruction::from_text(&lib.suite[k].spec.instruction.raw_text, &cfg),
            observation: random_observation(&cfg, &mut rng),
        };
        m.infer(&req).unwrap();
    }
    let s = m.stats().report();
    outcome(
        s.latency_p99_ms < LATENCY_P99_MAX_MS && s.switches > 0,
        format!(
            "{} switches: p99 {:.3} ms (limit {LATENCY_P99_MAX_MS} ms), mean {:.3} ms, min {:.3} ms",
            s.switches, s.latency_p99_ms, s.latency_mean_ms, s.latency_min_ms
        ),
    )
}

fn c06_isolation(ctx: &Ctx) -> Outcome {
    let lib = ctx.library();
    let reloaded_same = lib.paths.iter().zip(&lib.experts).all(|(p, e)| &load_expert(p).unwrap() == e);
    outcome(
        lib.isolation_ok && reloaded_same && lib.experts.len() == 8,
        format!(
            "8 experts trained in sequence; after each: {}; all adapters reload identical: {reloaded_same}",
            if lib.isolation_ok {
                "base digest and earlier adapter digests unchanged".to_string()
            } else {
                lib.isolation.join(", ")
            }
        ),
    )
}

fn c07_forgetting(ctx: &Ctx) -> Outcome {
    let base = ctx.base();
    let suite = make_conflict_suite(base.config(), &SuiteConfig { tasks: 2, ..SuiteConfig::default() }).unwrap();
    let t1 = &suite[0];
    let (ck, _) = full_finetune(&base.thawed_copy(), &suite, &TrainConfig::desk_for("full_sequential")).unwrap();
    let p1 = eval_loss(&ck[0].1, None, t1).unwrap();
    let p2 = eval_loss(&ck[1].1, None, t1).unwrap();
    let ratio = p2 / p1;

    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig::desk();
    let (e1, _) = train_expert(base, t1, &cfg).unwrap();
    let path1 = dir.path().join("e1.crlx");
    save_expert(&e1, &path1).unwrap();
    let d1 = file_digest(&path1);
    let l1 = eval_loss(base, Some(&e1), t1).unwrap();
    let (e2, _) = train_expert(base, &suite[1], &cfg).unwrap();
    save_expert(&e2, &dir.path().join("e2.crlx")).unwrap();
    let l1_after = eval_loss(base, Some(&load_expert(&path1).unwrap()), t1).unwrap();
    let unchanged = l1 == l1_after && file_digest(&path1) == d1;
    outcome(
        ratio >= FORGETTING_MIN && unchanged,
        format!(
            "full sequential task-1 loss {p1:.4} -> {p2:.4} ({ratio:.1}x, need >= {FORGETTING_MIN}x); experts task-1 loss {l1:.6} -> {l1_after:.6} (exactly unchanged: {unchanged})"
        ),
    )
}

fn c08_interference(ctx: &Ctx) -> Outcome {
    let runs = ctx.interference();
    let m: Vec<f64> = runs.iter().map(|(_, _, l)| mean(l)).collect();
    let lr: Vec<f32> = runs.iter().map(|(name, _, _)| TrainConfig::desk_for(name).lr).collect();
    outcome(
        m[0] <= m[1] && m[1] < m[2],
        format!(
            "mean eval loss experts {:.4} (lr {:e}) <= independent {:.4} (lr {:e}) < joint {:.4} (lr {:e}); {} steps per model",
            m[0],
            lr[0],
            m[1],
            lr[1],
            m[2],
            lr[2],
            runs[2].1.log.lines.len()
        ),
    )
}

fn tiny_configs() -> Vec<BackboneConfig> {
    let c = |model_dim, heads, enc, act, vocab, li, obs, proprio, h, da, seed| BackboneConfig {
        model_dim,
        heads,
        enc_layers: enc,
        act_layers: act,
        vocab_size: vocab,
        max_instr_len: li,
        obs_dim: obs,
        proprio_dim: proprio,
        chunk_horizon: h,
        action_dim: da,
        seed,
    };
    vec![
        c(8, 2, 1, 1, 16, 4, 6, 3, 2, 3, 1),
        c(4, 1, 1, 1, 8, 3, 5, 2, 3, 2, 2),
        c(8, 4, 2, 1, 12, 5, 4, 4, 2, 2, 3),
        c(12, 3, 1, 2, 10, 2, 7, 1, 1, 4, 4),
        c(6, 2, 2, 2, 9, 3, 3, 3, 2, 3, 5),
    ]
}

fn random_batch(cfg: &BackboneConfig, n: usize, rng: &mut Rng) -> Vec<Episode> {
    (0..n)
        .map(|_| {
            let tokens = (0..cfg.max_instr_len).map(|_| rng.below(cfg.vocab_size) as u32).collect();
            Episode {
                instruction: Instruction::from_tokens("g", tokens, cfg).unwrap(),
                observation: random_observation(cfg, rng),
                target: Matrix::gaussian(rng, cfg.chunk_horizon, cfg.action_dim, 1.0),
            }
        })
        .collect()
}

/// Worst relative gap between analytic and central-difference gradients
/// over every trainable entry. Entries where both are below 1e-6 are
/// compared against that floor instead of their own magnitude.
fn fd_worst(obj: &Objective<f64>, batch: &[&Episode]) -> (f64, usize) {
    const H: f64 = 1e-5;
    let (_, g) = obj.loss_and_grad(batch).unwrap();
    let mut worst = 0.0f64;
    let mut n = 0;
    for name in obj.trainable_names() {
        let ga = g.get(&name).unwrap();
        for i in 0..ga.len() {
            let mut plus = obj.clone();
            let v = plus.trainable_named_mut(&name).unwrap().data()[i];
            plus.trainable_named_mut(&name).unwrap().data_mut()[i] = v + H;
            let mut minus = obj.clone();
            minus.trainable_named_mut(&name).unwrap().data_mut()[i] = v - H;
            let fd = (plus.loss(batch).unwrap() - minus.loss(batch).unwrap()) / (2.0 * H);
            let a = ga.data()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
            n += 1;
        }
    }
    (worst, n)
}

fn c09_gradients(_: &Ctx) -> Outcome {
    let mut rng = Rng::new(909);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for cfg in tiny_configs() {
        let weights = init_backbone(&cfg).unwrap();
        let batch = random_batch(&cfg, 3, &mut rng);
        let refs: Vec<&Episode> = batch.iter().collect();
        let (w, n) = fd_worst(&Objective::<f64>::full(&weights), &refs);
        worst = worst.max(w);
        checked += n;

        let mut frozen = weights.clone();
        frozen.freeze();
        let mut e = init_expert("g", &frozen, &InjectionPolicy::default(), 2, 4.0, cfg.seed).unwrap();
        for l in &mut e.layers {
            l.a = Matrix::gaussian(&mut rng, l.a.rows(), l.a.cols(), 0.3);
            l.b = Matrix::gaussian(&mut rng, l.b.rows(), l.b.cols(), 0.3);
        }
        let (w, n) = fd_worst(&Objective::<f64>::lora(&frozen, &e).unwrap(), &refs);
        worst = worst.max(w);
        checked += n;
    }
    outcome(
        worst < 1e-4,
        format!("5 tiny configs, full and expert parameter sets, {checked} entries: worst relative error {worst:.2e} (limit 1e-4, f64, h = 1e-5)"),
    )
}

fn c10_storage(ctx: &Ctx) -> Outcome {
    let lib = ctx.library();
    let cfg = ctx.base().config().clone();
    let brute_params: usize = ctx.base().layers().iter().map(|l| l.matrix.len()).sum();
    let mut ok = brute_params == param_count(&cfg);
    let mut example = String::new();
    for (e, p) in lib.experts.iter().zip(&lib.paths) {
        let bytes = std::fs::read(p).unwrap();
        let sum_r_dm: usize = e.layers.iter().map(|l| e.rank * (l.b.rows() + l.a.cols())).sum();
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header = 4 + 2 + 1 + 1 + 4 + meta_len + 4 + e.layers.iter().map(|l| 2 + l.name.len() + 12).sum::<usize>();
        let overhead = 8;
        let lay = expert_layout(e);
        ok &= bytes.len() == header + 4 * sum_r_dm + overhead
            && lay.total() == bytes.len()
            && lay.payload == 4 * sum_r_dm
            && compression_ratio(&cfg, e) == brute_params as f64 / sum_r_dm as f64;
        if example.is_empty() {
            example = format!(
                "{}: {} B = header {header} + 4x{sum_r_dm} + trailer {overhead}, ratio {:.3}",
                e.expert_id,
                bytes.len(),
                compression_ratio(&cfg, e)
            );
        }
    }
    let settings = Settings::default();
    let report = commands::report_storage(&settings, &lib.base_path, &lib.manifest).unwrap();
    let cli_ratios_match = report.get("experts").and_then(Value::as_array).is_some_and(|rows| {
        rows.iter().zip(&lib.experts).all(|(r, e)| r["compression_ratio"].as_f64() == Some(compression_ratio(&cfg, e)))
    });
    ok &= cli_ratios_match;
    let proj = &report.get("reference_projection").unwrap()["rows"][0];
    outcome(
        ok,
        format!(
            "{} adapters exact; {example}; report ratios match: {cli_ratios_match}; projected 0.8B stack, r=16 on q,v: {:.1} MB, {:.0}x (reference figures: about 26 MB, about 100x; shown, not asserted)",
            lib.experts.len(),
            proj["megabytes"].as_f64().unwrap_or(f64::NAN),
            proj["ratio"].as_f64().unwrap_or(f64::NAN)
        ),
    )
}

fn c11_fuzz(ctx: &Ctx) -> Outcome {
    let lib = ctx.library();
    let clean = std::fs::read(&lib.paths[0]).unwrap();
    assert!(decode_expert(&clean).is_ok());
    let mut rng = Rng::new(1111);
    let (mut loaded, mut panics) = (0usize, 0usize);
    let mut kinds: BTreeMap<&'static str, usize> = BTreeMap::new();
    let hook = std::panic::take_hook();
    std::panic::set_hook(Box::new(|_| {}));
    for i in 0..FUZZ_CASES {
        let mut bytes = clean.clone();
        if i % 2 == 0 {
            for _ in 0..1 + rng.below(8) {
                let at = rng.below(bytes.len());
                bytes[at] ^= 1 << rng.below(8);
            }
            if bytes == clean {
                // Two flips of the same bit cancel; flip once more.
                bytes[0] ^= 1;
            }
        } else {
            bytes.truncate(rng.below(bytes.len()));
        }
        match catch_unwind(|| decode_expert(&bytes)) {
            Ok(Ok(_)) => loaded += 1,
            Ok(Err(e)) => *kinds.entry(e.kind()).or_default() += 1,
            Err(_) => panics += 1,
        }
    }
    std::panic::set_hook(hook);
    outcome(
        loaded == 0 && panics == 0,
        format!("{FUZZ_CASES} corruptions (bit flips, truncations): {loaded} loaded, {panics} panics, typed errors {kinds:?}"),
    )
}

fn c12_service(ctx: &Ctx) -> Outcome {
    let lib = ctx.library();
    let served = ctx.manager(Box::new(DiskLoader));
    let mut direct = ctx.manager(Box::new(DiskLoader));
    let cfg = direct.base().config().clone();
    let server = Server::bind("127.0.0.1:0", served).unwrap();
    let addr = server.local_addr().unwrap();
    let stop = server.shutdown_handle().unwrap();
    let worker = std::thread::spawn(move || server.run());
    let mut client = Client::connect(addr).unwrap();

    let mut rng = Rng::new(1212);
    let mut texts: Vec<String> = lib.suite.iter().map(|d| d.spec.instruction.raw_text.clone()).collect();
    texts.push("words no expert knows".into());
    let mut transcript = Vec::new();
    let mut mismatches = 0usize;
    for step in 0..200 {
        // Repeat the previous instruction now and then so some requests do
        // not switch.
        let text = if step > 0 && rng.below(3) == 0 {
            transcript.last().map(|(t, _): &(String, Value)| t.clone()).unwrap()
        } else {
            texts[rng.below(texts.len())].clone()
        };
        let obs = random_observation(&cfg, &mut rng);
        let reply = client.infer(&text, &obs).unwrap();
        let want = direct
            .infer(&InferenceRequest { instruction: Instruction::from_text(&text, &cfg), observation: obs })
            .unwrap();
        let got = actions_from_json(&reply).unwrap();
        let a = &want.action_chunk.actions;
        let same_actions = got.len() == a.rows()
            && got.iter().enumerate().all(|(i, row)| {
                row.len() == a.cols() && row.iter().zip(a.row(i)).all(|(x, y)| x.to_bits() == y.to_bits())
            });
        if !same_actions
            || reply["expert"] != json!(want.expert_id)
            || reply["switched"] != json!(want.switched)
        {
            mismatches += 1;
        }
        transcript.push((text, reply));
    }
    let stats = client.call(&json!({"op": "stats"})).unwrap();
    let d = direct.stats().report();
    let counts_match = stats["switches"] == json!(d.switches)
        && stats["failed_switches"] == json!(d.failed_switches)
        && stats["hits"] == json!(d.hits)
        && stats["misses"] == json!(d.misses)
        && stats["requests"] == json!(d.requests);
    drop(client);
    stop.shutdown();
    let clean_exit = worker.join().map(|r| r.is_ok()).unwrap_or(false);
    outcome(
        mismatches == 0 && counts_match && clean_exit,
        format!(
            "{} infer lines over TCP: {mismatches} mismatches vs direct manager; switches {} (direct {}), hits {}, misses {}; counts match: {counts_match}; clean shutdown: {clean_exit}",
            transcript.len(),
            stats["switches"],
            d.switches,
            d.hits,
            d.misses
        ),
    )
}

// ------------------------------------------------- trainer / taskgen checks

fn k2_suite(base: &BackboneWeights, d: f64) -> Vec<TaskDataset> {
    make_conflict_suite(base.config(), &SuiteConfig { tasks: 2, discriminability: d, ..SuiteConfig::default() }).unwrap()
}

fn x_expert_gain(ctx: &Ctx) -> Outcome {
    let base = ctx.base();
    let mut ratios = Vec::new();
    let mut evals = Vec::new();
    for ds in k2_suite(base, 1.0) {
        let zero = eval_loss(base, None, &ds).unwrap();
        let (e, _) = train_expert(base, &ds, &TrainConfig::desk()).unwrap();
        let l = eval_loss(base, Some(&e), &ds).unwrap();
        ratios.push(zero / l);
        evals.push(l);
    }
    let gain_ok = ratios.iter().all(|&r| r >= EXPERT_GAIN_MIN);
    let level_ok = evals.iter().all(|&l| l <= D1_EXPERT_EVAL_MAX);
    outcome(
        gain_ok && level_ok,
        format!(
            "K=2, d=1, 50 steps: gain over zero expert {ratios:.1?} (need >= {EXPERT_GAIN_MIN}x); eval loss {evals:.4?} (oracle threshold {D1_EXPERT_EVAL_MAX}; nominal 1e-2 met: {})",
            evals.iter().all(|&l| l <= 1e-2)
        ),
    )
}

fn x_bayes_floor(ctx: &Ctx) -> Outcome {
    let base = ctx.base();
    let suite = k2_suite(base, 0.0);
    let out = regimes().create("full_joint").unwrap().train(base, &suite, &TrainConfig::desk_for("full_joint")).unwrap();
    let loss = mean(&out.eval_losses(base, &suite).unwrap());
    let floor = mean(&suite.iter().map(|d| bayes_floor(&d.spec, SuiteConfig::default().obs_std)).collect::<Vec<_>>());
    let identical = suite[0].spec.instruction == suite[1].spec.instruction;
    outcome(
        loss >= 0.9 * floor && identical,
        format!("d=0 pair (identical instructions: {identical}): joint eval loss {loss:.4} vs Bayes floor {floor:.4} (need >= 0.9x)"),
    )
}

fn x_joint_single_is_independent(ctx: &Ctx) -> Outcome {
    let base = ctx.base();
    let ds = &k2_suite(base, 1.0)[..1];
    let run = |mode: &str| {
        let (ck, _) = full_finetune(&base.thawed_copy(), ds, &TrainConfig::desk_for(mode)).unwrap();
        ck.into_iter().next().unwrap().1
    };
    let same = same_bits(&run("full_joint"), &run("full_independent"));
    outcome(same, format!("joint on one dataset vs independent: weights bit-identical: {same}"))
}

fn x_expert_beats_base(ctx: &Ctx) -> Outcome {
    let lib = ctx.library();
    let base = ctx.base();
    let pairs: Vec<(f64, f64)> = lib
        .suite
        .iter()
        .zip(&lib.experts)
        .map(|(d, e)| (eval_loss(base, Some(e), d).unwrap(), eval_loss(base, None, d).unwrap()))
        .collect();
    let worst = pairs.iter().map(|(e, b)| e / b).fold(0.0, f64::max);
    outcome(
        pairs.iter().all(|(e, b)| e <= b),
        format!("8 tasks: expert eval <= base eval on each; worst expert/base ratio {worst:.3}"),
    )
}

fn x_loss_windows(ctx: &Ctx) -> Outcome {
    let lib = ctx.library();
    let fr: Vec<f64> = lib.logs.iter().map(|l| l.non_increasing_fraction(5)).collect();
    outcome(
        fr.iter().all(|&f| f >= 0.8),
        format!("non-increasing 5-step windows per expert run: {fr:.2?} (need >= 0.80 each)"),
    )
}

fn x_independent_storage(ctx: &Ctx) -> Outcome {
    let runs = ctx.interference();
    let (_, out, _) = runs.iter().find(|(m, _, _)| m == "full_independent").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut on_disk = 0u64;
    for (label, m) in &out.models {
        let TrainedModel::Backbone(w) = m else { unreachable!("full regime yields backbones") };
        let p = dir.path().join(format!("{label}.crlx"));
        save_base(w, &p).unwrap();
        on_disk += std::fs::metadata(&p).unwrap().len();
    }
    let one = std::fs::metadata(&ctx.library().base_path).unwrap().len();
    let n = out.models.len() as u64;
    outcome(
        on_disk == n * one && out.storage_bytes().unwrap() == on_disk && n == 8,
        format!("{n} checkpoints on disk: {on_disk} B = {n} x {one} B"),
    )
}

fn x_monotone_ambiguity(ctx: &Ctx) -> Outcome {
    let base = ctx.base();
    let ds = [1.0, 0.5, 0.25, 0.0];
    let mut avg = vec![0.0f64; ds.len()];
    for seed in MONOTONE_SEEDS {
        for (i, &d) in ds.iter().enumerate() {
            let suite =
                make_conflict_suite(base.config(), &SuiteConfig { discriminability: d, seed, ..SuiteConfig::default() })
                    .unwrap();
            let out =
                regimes().create("full_joint").unwrap().train(base, &suite, &TrainConfig::desk_for("full_joint")).unwrap();
            avg[i] += mean(&out.eval_losses(base, &suite).unwrap()) / MONOTONE_SEEDS.len() as f64;
        }
    }
    outcome(
        avg.windows(2).all(|w| w[0] <= w[1]),
        format!("joint eval loss averaged over suite seeds {MONOTONE_SEEDS:?} at d = 1, 0.5, 0.25, 0: {avg:.4?} (need non-decreasing)"),
    )
}

fn x_loader_registry(_: &Ctx) -> Outcome {
    let names = loaders().names();
    let r = regimes().names();
    let o = trainer::optimizers().names();
    outcome(
        names.contains(&"disk") && names.contains(&"faulty") && r.len() == 4 && o.contains(&"sgd") && o.contains(&"adam"),
        format!("loaders {names:?}, regimes {r:?}, optimizers {o:?}"),
    )
}

type Check = (&'static str, &'static str, fn(&Ctx) -> Outcome);

const CHECKS: &[Check] = &[
    ("c01", "merge scale", c01_merge_scale),
    ("c02", "zero-init neutrality", c02_zero_init),
    ("c03", "switch roundtrip", c03_switch_roundtrip),
    ("c04", "zero inference overhead", c04_macs),
    ("c05", "switch latency", c05_latency),
    ("c06", "parameter isolation", c06_isolation),
    ("c07", "forgetting", c07_forgetting),
    ("c08", "interference ordering", c08_interference),
    ("c09", "gradient correctness", c09_gradients),
    ("c10", "storage accounting", c10_storage),
    ("c11", "format robustness", c11_fuzz),
    ("c12", "service fidelity", c12_service),
    ("x-gain", "expert gain and d=1 level", x_expert_gain),
    ("x-floor", "Bayes floor under joint training", x_bayes_floor),
    ("x-joint1", "joint on one dataset", x_joint_single_is_independent),
    ("x-vsbase", "expert vs base per task", x_expert_beats_base),
    ("x-windows", "loss windows", x_loss_windows),
    ("x-storage", "independent-mode storage", x_independent_storage),
    ("x-monotone", "monotone ambiguity", x_monotone_ambiguity),
    ("x-registry", "strategy registries", x_loader_registry),
];

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let ctx = Ctx::default();
    let mut failed = Vec::new();
    let mut ran = 0;
    for (id, title, check) in CHECKS {
        if !filters.is_empty() && !filters.iter().any(|f| id.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(|| check(&ctx)))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                outcome(false, format!("panicked: {msg}"))
            });
        say(&format!(
            "{:<10} {}  {title}: {} [{:.1} s]",
            id,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        ));
        if !o.pass {
            failed.push(*id);
        }
    }
    say(&format!("acceptance: {} of {ran} checks passed; failing: {failed:?}", ran - failed.len()));
    if !failed.is_empty() {
        std::process::exit(1);
    }
}
