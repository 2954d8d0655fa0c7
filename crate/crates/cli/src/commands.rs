use std::path::{Path, PathBuf};

use hotlora_core::backbone::{init_backbone, mac_count, param_count, BackboneConfig, BackboneWeights, Instruction, Observation};
use hotlora_core::lora::{
    compression_ratio, expert_param_count, projected_compression_ratio, projected_param_count, InjectionPolicy,
};
use hotlora_core::manager::{loaders, InferenceRequest, Manager};
use hotlora_core::store::{
    expert_layout, fingerprint, load_base, load_expert, load_registry, manifest_line, save_base, save_expert,
    write_atomic,
};
use hotlora_core::taskgen::{bayes_floor, eval_loss, export_suite, import_suite, make_conflict_suite, TaskDataset};
use hotlora_core::tensor::{fnv1a64, Rng};
use hotlora_core::trainer::{self, full_finetune, regimes, train_expert, TrainLog, TrainedModel};
use hotlora_core::CoreError;
use hotlora_service::Server;
use serde_json::{json, Value};

use crate::report::{f, Report};
use crate::settings::Settings;
use crate::{CliError, Result};

pub const INTERFERENCE_MODES: [&str; 3] = ["lora_expert", "full_independent", "full_joint"];

/// Switch budget the latency bench checks against.
pub const LATENCY_BUDGET_MS: f64 = 100.0;

/// A hypothetical 0.8B-parameter stack used only to project storage at
/// that scale: 2048 wide, 15 blocks, 32k vocabulary.
pub fn reference_config() -> BackboneConfig {
    BackboneConfig {
        model_dim: 2048,
        enc_layers: 11,
        act_layers: 4,
        heads: 16,
        vocab_size: 32_000,
        max_instr_len: 64,
        obs_dim: 2048,
        proprio_dim: 32,
        chunk_horizon: 16,
        action_dim: 23,
        seed: 0,
    }
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn create_dir(path: &Path) -> Result<()> {
    io(path, std::fs::create_dir_all(path))
}

pub fn load_frozen_base(path: &Path) -> Result<BackboneWeights> {
    let mut base = load_base(path)?;
    base.freeze();
    Ok(base)
}

fn write_log(out: &Path, name: &str, log: &TrainLog) -> Result<PathBuf> {
    let p = out.join(name);
    write_atomic(&p, log.to_tsv().as_bytes())?;
    Ok(p)
}

fn tail_mean(log: &TrainLog, n: usize) -> f64 {
    let l = &log.lines;
    let k = n.min(l.len()).max(1);
    l[l.len().saturating_sub(k)..].iter().map(|x| x.loss).sum::<f64>() / k as f64
}

/// Suite from `--suite DIR` when given, otherwise generated from settings.
pub fn suite_for(settings: &Settings, cfg: &BackboneConfig, dir: Option<&Path>) -> Result<Vec<TaskDataset>> {
    match dir {
        Some(d) => {
            let (scfg, ds) = import_suite(d)?;
            if &scfg != cfg {
                return Err(CoreError::Config(format!("suite at {} was built for a different backbone config", d.display())).into());
            }
            Ok(ds)
        }
        None => Ok(make_conflict_suite(cfg, &settings.suite)?),
    }
}

pub fn pretrain(settings: &Settings, out: &Path) -> Result<Report> {
    create_dir(out)?;
    let (base, log) = trainer::pretrain(&settings.backbone, &settings.pretrain)?;
    let path = out.join("base.crlx");
    save_base(&base, &path)?;
    write_log(out, "pretrain_log.tsv", &log)?;
    let suite = make_conflict_suite(&settings.backbone, &settings.pretrain.suite)?;
    let evals = suite.iter().map(|d| eval_loss(&base, None, d)).collect::<hotlora_core::Result<Vec<_>>>()?;
    let eval_mean = evals.iter().sum::<f64>() / evals.len() as f64;
    let mut r = Report::new("pretrain", settings);
    r.set("base", json!(path.display().to_string()))
        .set("base_fingerprint", json!(format!("{:016x}", fingerprint(&base))))
        .set("params", json!(base.param_count()))
        .set("steps", json!(log.lines.len()))
        .set("first_loss", json!(log.lines.first().map(|l| l.loss)))
        .set("final_loss_mean50", json!(tail_mean(&log, 50)))
        .set("pretrain_eval_mean", json!(eval_mean));
    r.columns(&["quantity", "value"])
        .row(vec!["params".into(), base.param_count().to_string()])
        .row(vec!["steps".into(), log.lines.len().to_string()])
        .row(vec!["final train loss (mean of 50)".into(), f(tail_mean(&log, 50))])
        .row(vec!["eval loss on pretraining suite".into(), f(eval_mean)])
        .note(format!("frozen base written to {}", path.display()));
    Ok(r)
}

pub fn make_suite(settings: &Settings, base: Option<&Path>, out: &Path) -> Result<Report> {
    let cfg = match base {
        Some(p) => load_base(p)?.config().clone(),
        None => settings.backbone.clone(),
    };
    let suite = make_conflict_suite(&cfg, &settings.suite)?;
    export_suite(out, &cfg, &settings.suite, &suite)?;
    let mut r = Report::new("make-suite", settings);
    r.columns(&["task", "group", "instruction", "bayes_floor_if_ambiguous"]);
    let mut tasks = Vec::new();
    for d in &suite {
        let floor = bayes_floor(&d.spec, settings.suite.obs_std);
        r.row(vec![d.spec.name(), d.spec.conflict_group.map_or("-".to_string(), |g| g.to_string()), d.spec.instruction.raw_text.clone(), f(floor)]);
        tasks.push(json!({"task": d.spec.name(), "instruction": d.spec.instruction.raw_text, "bayes_floor": floor}));
    }
    r.set("tasks", Value::Array(tasks));
    Ok(r)
}

/// Replaces manifest lines for the given expert ids and appends the new ones.
fn update_manifest(path: &Path, new_lines: &[(String, String)]) -> Result<()> {
    let old = if path.exists() { io(path, std::fs::read_to_string(path))? } else { String::new() };
    let ids: Vec<&str> = new_lines.iter().map(|(id, _)| id.as_str()).collect();
    let mut lines: Vec<String> = old
        .lines()
        .filter(|l| l.split('\t').nth(1).map_or(true, |id| !ids.contains(&id.trim())))
        .map(String::from)
        .collect();
    lines.extend(new_lines.iter().map(|(_, l)| l.clone()));
    let mut text = lines.join("\n");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

/// Trains the selected tasks in `settings.train.mode`. Experts go to
/// `<out>/expert_taskNN.crlx` plus `manifest.tsv`; full modes write one
/// checkpoint per trained model.
pub fn train_expert_cmd(settings: &Settings, base_path: &Path, suite_dir: Option<&Path>, tasks: &[usize], out: &Path) -> Result<Report> {
    create_dir(out)?;
    let base = load_frozen_base(base_path)?;
    let all = suite_for(settings, base.config(), suite_dir)?;
    let picked: Vec<TaskDataset> = if tasks.is_empty() {
        all.clone()
    } else {
        tasks
            .iter()
            .map(|&t| {
                all.get(t)
                    .cloned()
                    .ok_or_else(|| CliError::Usage(format!("task {t} out of range (suite has {})", all.len())))
            })
            .collect::<Result<_>>()?
    };
    let mode = settings.train.mode.as_str();
    let trained = regimes().create(mode)?.train(&base, &picked, &settings.train_for(mode))?;
    write_log(out, "train_log.tsv", &trained.log)?;
    let losses = trained.eval_losses(&base, &picked)?;

    let mut r = Report::new("train-expert", settings);
    r.set("mode", json!(mode));
    let mut manifest = Vec::new();
    let mut files = Vec::new();
    for (label, model) in &trained.models {
        let path = out.join(format!("{label}.crlx"));
        match model {
            TrainedModel::Expert(e) => {
                save_expert(e, &path)?;
                let ds = picked.iter().find(|d| trainer::expert_id_for(d) == e.expert_id).expect("expert per task");
                manifest.push((e.expert_id.clone(), manifest_line(&ds.spec.instruction.raw_text, &e.expert_id, Path::new(&format!("{label}.crlx")))));
            }
            TrainedModel::Backbone(w) => save_base(w, &path)?,
        }
        let bytes = io(&path, std::fs::metadata(&path))?.len();
        files.push(json!({"label": label, "path": path.display().to_string(), "bytes": bytes}));
    }
    if !manifest.is_empty() {
        update_manifest(&out.join("manifest.tsv"), &manifest)?;
    }
    r.columns(&["task", "zero_expert_eval", "trained_eval", "model"]);
    let mut per_task = Vec::new();
    for ((d, loss), &m) in picked.iter().zip(&losses).zip(&trained.assignment) {
        let zero = eval_loss(&base, None, d)?;
        r.row(vec![d.spec.name(), f(zero), f(*loss), trained.models[m].0.clone()]);
        per_task.push(json!({"task": d.spec.name(), "zero_expert_eval": zero, "eval": loss}));
    }
    let storage = trained.storage_bytes()?;
    r.set("tasks", Value::Array(per_task))
        .set("files", Value::Array(files))
        .set("storage_bytes", json!(storage))
        .set("monotone_window_fraction", json!(trained.log.non_increasing_fraction(5)))
        .note(format!("{} model file(s), {} bytes in total", trained.models.len(), storage));
    Ok(r)
}

pub fn bench_interference(settings: &Settings, base_path: &Path, suite_dir: Option<&Path>, modes: &[String]) -> Result<Report> {
    let base = load_frozen_base(base_path)?;
    let suite = suite_for(settings, base.config(), suite_dir)?;
    let modes: Vec<String> = if modes.is_empty() { INTERFERENCE_MODES.iter().map(|s| s.to_string()).collect() } else { modes.to_vec() };
    let zero = suite.iter().map(|d| eval_loss(&base, None, d)).collect::<hotlora_core::Result<Vec<_>>>()?;
    let mut results = serde_json::Map::new();
    let mut losses = Vec::new();
    for m in &modes {
        let trained = regimes().create(m)?.train(&base, &suite, &settings.train_for(m))?;
        let l = trained.eval_losses(&base, &suite)?;
        let mean = l.iter().sum::<f64>() / l.len() as f64;
        results.insert(
            m.clone(),
            json!({
                "per_task": l,
                "mean": mean,
                "lr": settings.train_for(m).lr,
                "models": trained.models.len(),
                "storage_bytes": trained.storage_bytes()?,
                "optimizer_steps_per_model": trained.log.lines.len() / trained.models.len().max(1),
            }),
        );
        losses.push(l);
    }
    let mut r = Report::new("bench-interference", settings);
    let mut cols = vec!["task".to_string(), "base".to_string()];
    cols.extend(modes.iter().cloned());
    r.columns(&cols.iter().map(String::as_str).collect::<Vec<_>>());
    for (i, d) in suite.iter().enumerate() {
        let mut row = vec![d.spec.name(), f(zero[i])];
        row.extend(losses.iter().map(|l| f(l[i])));
        r.row(row);
    }
    let means: Vec<f64> = losses.iter().map(|l| l.iter().sum::<f64>() / l.len() as f64).collect();
    let mut row = vec!["mean".to_string(), f(zero.iter().sum::<f64>() / zero.len() as f64)];
    row.extend(means.iter().map(|&m| f(m)));
    r.row(row);
    let mean_of = |name: &str| modes.iter().position(|m| m == name).map(|i| means[i]);
    let verdict = match (mean_of("lora_expert"), mean_of("full_independent"), mean_of("full_joint")) {
        (Some(e), Some(i), Some(j)) => {
            let ok = e <= i && i < j;
            r.note(format!(
                "ordering experts <= independent < joint: {} ({} <= {} < {})",
                if ok { "holds" } else { "VIOLATED" },
                f(e),
                f(i),
                f(j)
            ));
            Some(ok)
        }
        _ => None,
    };
    r.set("base_eval", json!(zero)).set("regimes", Value::Object(results)).set("ordering_holds", json!(verdict));
    Ok(r)
}

pub fn bench_forgetting(settings: &Settings, base_path: &Path, out: &Path) -> Result<Report> {
    create_dir(out)?;
    let base = load_frozen_base(base_path)?;
    let base_digest = fingerprint(&base);
    let mut suite_cfg = settings.suite.clone();
    suite_cfg.tasks = 2;
    let suite = make_conflict_suite(base.config(), &suite_cfg)?;
    let t1 = &suite[0];

    let full_cfg = settings.train_for("full_sequential");
    let (ckpts, _) = full_finetune(&base.thawed_copy(), &suite, &full_cfg)?;
    let full = [
        eval_loss(&base, None, t1)?,
        eval_loss(&ckpts[0].1, None, t1)?,
        eval_loss(&ckpts[1].1, None, t1)?,
    ];

    let lora_cfg = settings.train_for("lora_expert");
    let (e1, _) = train_expert(&base, t1, &lora_cfg)?;
    let p1 = out.join(format!("{}.crlx", e1.expert_id));
    save_expert(&e1, &p1)?;
    let d1 = fnv1a64(&io(&p1, std::fs::read(&p1))?);
    let after_p1 = eval_loss(&base, Some(&e1), t1)?;
    let (e2, _) = train_expert(&base, &suite[1], &lora_cfg)?;
    save_expert(&e2, &out.join(format!("{}.crlx", e2.expert_id)))?;
    let reloaded = load_expert(&p1)?;
    let after_p2 = eval_loss(&base, Some(&reloaded), t1)?;
    let d1_after = fnv1a64(&io(&p1, std::fs::read(&p1))?);
    let experts = [full[0], after_p1, after_p2];

    let full_ratio = full[2] / full[1];
    let mut r = Report::new("bench-forgetting", settings);
    r.columns(&["regime", "task1_before", "task1_after_phase1", "task1_after_phase2", "ratio"])
        .row(vec!["full_sequential".into(), f(full[0]), f(full[1]), f(full[2]), format!("{full_ratio:.2}")])
        .row(vec!["expert_sequential".into(), f(experts[0]), f(experts[1]), f(experts[2]), format!("{:.2}", experts[2] / experts[1])])
        .note(format!("task-1 adapter digest {d1:016x} before, {d1_after:016x} after phase 2"))
        .note(format!("base fingerprint unchanged: {}", fingerprint(&base) == base_digest))
        .set("full_sequential", json!(full))
        .set("expert_sequential", json!(experts))
        .set("full_forgetting_ratio", json!(full_ratio))
        .set("expert_task1_unchanged", json!(after_p1 == after_p2 && d1 == d1_after))
        .set("base_unchanged", json!(fingerprint(&base) == base_digest));
    Ok(r)
}

pub fn report_storage(settings: &Settings, base_path: &Path, manifest: &Path) -> Result<Report> {
    let base = load_frozen_base(base_path)?;
    let cfg = base.config().clone();
    let reg = load_registry(manifest, settings.on_miss)?;
    let full_bytes = io(base_path, std::fs::metadata(base_path))?.len();
    let mut r = Report::new("report-storage", settings);
    r.columns(&["expert", "bytes", "fixed", "meta", "entry_hdr", "payload", "params", "ratio"]);
    let mut seen = std::collections::BTreeSet::new();
    let mut experts = Vec::new();
    let mut total = 0u64;
    for entry in reg.entries() {
        if !seen.insert(entry.expert_id.clone()) {
            continue;
        }
        let e = load_expert(&entry.path)?;
        let lay = expert_layout(&e);
        let params = expert_param_count(&e);
        let ratio = compression_ratio(&cfg, &e);
        if lay.total() as u64 != entry.file_bytes || lay.payload != 4 * params {
            return Err(CoreError::Format(format!("{} does not match its layout", entry.path.display())).into());
        }
        total += entry.file_bytes;
        r.row(vec![
            e.expert_id.clone(),
            entry.file_bytes.to_string(),
            lay.fixed.to_string(),
            lay.meta.to_string(),
            lay.entry_headers.to_string(),
            lay.payload.to_string(),
            params.to_string(),
            format!("{ratio:.3}"),
        ]);
        experts.push(json!({
            "expert": e.expert_id, "bytes": entry.file_bytes, "fixed": lay.fixed, "meta": lay.meta,
            "entry_headers": lay.entry_headers, "payload": lay.payload, "params": params, "compression_ratio": ratio,
        }));
    }
    let n = experts.len().max(1) as u64;
    let per_expert = total / n;
    let mut proj = Vec::new();
    for tasks in [1u64, 8, 40, 100] {
        let full = tasks * full_bytes;
        let lib = full_bytes + tasks * per_expert;
        proj.push(json!({"tasks": tasks, "full_checkpoints_bytes": full, "base_plus_experts_bytes": lib}));
        r.note(format!("{tasks:>3} tasks: full checkpoints {full} B, base + experts {lib} B"));
    }
    let refc = reference_config();
    let mut reference = Vec::new();
    for (label, policy) in [
        ("q,v", InjectionPolicy::default()),
        ("q,k,v,o", InjectionPolicy::parse("attn_q,attn_k,attn_v,attn_o@encoder,action_head")?),
    ] {
        let params = projected_param_count(&refc, &policy, 16);
        let ratio = projected_compression_ratio(&refc, &policy, 16);
        let mb = 4.0 * params as f64 / 1e6;
        r.note(format!(
            "reference stack ({:.2}B params), r=16 on {label}: {params} adapter params, {mb:.1} MB, ratio {ratio:.1}x",
            param_count(&refc) as f64 / 1e9
        ));
        reference.push(json!({"targets": label, "adapter_params": params, "megabytes": mb, "ratio": ratio}));
    }
    r.note("reference figures for comparison: about 26 MB per rank-16 expert, about 100x below a full checkpoint");
    r.set("experts", Value::Array(experts))
        .set("library_bytes", json!(total))
        .set("full_checkpoint_bytes", json!(full_bytes))
        .set("base_params", json!(param_count(&cfg)))
        .set("projection", Value::Array(proj))
        .set("reference_projection", json!({"base_params": param_count(&refc), "rank": 16, "rows": reference}));
    Ok(r)
}

fn random_observation(cfg: &BackboneConfig, rng: &mut Rng) -> Observation {
    Observation {
        features: (0..cfg.obs_dim).map(|_| rng.normal() as f32).collect(),
        proprio: (0..cfg.proprio_dim).map(|_| rng.normal() as f32).collect(),
    }
}

/// Builds a manager with the loader named in settings.
pub fn open_manager(settings: &Settings, base_path: &Path, manifest: &Path) -> Result<Manager> {
    let loader = loaders().create(&settings.loader)?;
    Ok(Manager::open(base_path, manifest, settings.on_miss, loader)?)
}

/// Drives a seeded instruction stream where every request names a different
/// expert from the previous one, so each request switches. Latencies are
/// wall-clock and differ run to run.
pub fn bench_latency(settings: &Settings, base_path: &Path, manifest: &Path) -> Result<Report> {
    let mut m = open_manager(settings, base_path, manifest)?;
    let cfg = m.base().config().clone();
    let instr: Vec<String> = m.registry().entries().iter().map(|e| e.instruction.clone()).collect();
    if instr.len() < 2 {
        return Err(CliError::Usage("latency bench needs at least two registered experts".into()));
    }
    let mut rng = Rng::new(settings.train.seed).fork(0x1A7);
    let mut prev = usize::MAX;
    let mut failures = 0u64;
    let mut macs = Vec::new();
    for _ in 0..settings.iterations {
        let mut k = rng.below(instr.len());
        if k == prev {
            k = (k + 1) % instr.len();
        }
        prev = k;
        let req = InferenceRequest {
            instruction: Instruction::from_text(&instr[k], &cfg),
            observation: random_observation(&cfg, &mut rng),
        };
        match m.infer(&req) {
            Ok(resp) => macs.push(resp.macs),
            Err(_) => failures += 1,
        }
    }
    let s = m.stats().report();
    let within = s.latency_p99_ms < LATENCY_BUDGET_MS;
    let mut r = Report::new("bench-latency", settings);
    r.columns(&["switches", "failed", "min_ms", "mean_ms", "p99_ms", "budget_ms"])
        .row(vec![
            s.switches.to_string(),
            s.failed_switches.to_string(),
            format!("{:.4}", s.latency_min_ms),
            format!("{:.4}", s.latency_mean_ms),
            format!("{:.4}", s.latency_p99_ms),
            format!("{LATENCY_BUDGET_MS}"),
        ])
        .note(format!("p99 within budget: {within}"))
        .note("latencies are wall-clock and vary between runs")
        .set("switches", json!(s.switches))
        .set("failed_switches", json!(s.failed_switches))
        .set("request_failures", json!(failures))
        .set("latency_min_ms", json!(s.latency_min_ms))
        .set("latency_mean_ms", json!(s.latency_mean_ms))
        .set("latency_p99_ms", json!(s.latency_p99_ms))
        .set("within_budget", json!(within))
        .set("macs_per_request", json!(mac_count(&cfg)))
        .set("macs_constant", json!(macs.iter().all(|&x| x == mac_count(&cfg))))
        .set("loader", json!(m.loader_name()));
    Ok(r)
}

pub fn serve(settings: &Settings, base_path: &Path, manifest: &Path, addr: &str) -> Result<()> {
    let m = open_manager(settings, base_path, manifest)?;
    let server = Server::bind(addr, m)?;
    eprintln!("listening on {}", server.local_addr()?);
    Ok(server.run()?)
}

/// Fresh, untrained, frozen base for smoke runs.
pub fn random_base(cfg: &BackboneConfig) -> Result<BackboneWeights> {
    let mut w = init_backbone(cfg)?;
    w.freeze();
    Ok(w)
}
