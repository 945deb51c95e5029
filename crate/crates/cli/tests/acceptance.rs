//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Criteria 1-5 and 10 always run and are enforced. The end-to-end criteria
//! 6-9 need hours of training at desk scale; by default they run on a
//! scaled-down config and are reported without failing the run. Set
//! `DECODER_ACCEPTANCE_SCALE=full` to run them at full scale and enforce
//! them. `ACCEPTANCE_OUT=<dir>` keeps the artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use bolddecode::brainmod::is_brain_param;
use bolddecode::diffgen::{is_lora_param, is_unet_param, NULL_TOKENS};
use bolddecode::prep::{build_split_standard, PrepConfig, PreparedRuns, WindowSpec};
use bolddecode::selftest::{run_suite, Check};
use bolddecode::substrate::ParamStore;
use bolddecode::synthcortex::{build_dataset, Dataset, DatasetConfig, SubjectConfig, TR};
use bolddecode::trainer::{
    init_joint, pretrain_generator, train_image_bank, trainer_for, ModelConfig, Regime, Stage, TrainConfig, TrainingSet,
};
use serde_json::Value;

const QUICK: &str = r#"{
  "dataset": {"n_subjects": 3, "n_train": 80, "n_test": 20, "trials_per_run": 20, "resolution": 16},
  "model": {
    "unet": {"resolution": 16, "base_channels": 16, "channel_mults": [1, 2], "attention": [false, true],
             "temb_dim": 32, "groups": 4, "tokens": 4, "token_dim": 16},
    "brain": {"hidden": 32, "tokens": 4, "token_dim": 16},
    "sampler": {"steps": 10}
  },
  "pretrain": {"steps": 400, "batch_size": 8, "warmup_steps": 40},
  "train": {"steps": 400, "batch_size": 8, "warmup_steps": 40}
}"#;

#[derive(Clone, Copy, PartialEq)]
enum Scale {
    Quick,
    Full,
}

struct Line {
    id: u32,
    passed: bool,
    enforced: bool,
    text: String,
}

struct Report {
    lines: Vec<Line>,
}

impl Report {
    fn record(&mut self, id: u32, passed: bool, enforced: bool, text: String) {
        let tag = match (passed, enforced) {
            (true, _) => "PASS",
            (false, true) => "FAIL",
            (false, false) => "FAIL (reported, not enforced at quick scale)",
        };
        println!("criterion {id:>2}: {tag}: {text}");
        self.lines.push(Line { id, passed, enforced, text });
    }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn suites(names: &[&str]) -> (Vec<Check>, Duration) {
    let t0 = Instant::now();
    let checks = names.iter().flat_map(|s| run_suite(s, 1_000_000).expect("suite runs")).collect();
    (checks, t0.elapsed())
}

fn summarize(checks: &[Check]) -> (bool, String) {
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let worst = checks.iter().filter(|c| c.bound < 0.5).map(|c| c.value / c.bound).fold(0.0, f64::max);
    if failed.is_empty() {
        (true, format!("{} checks, worst value/bound {worst:.2e}", checks.len()))
    } else {
        (false, format!("{} of {} checks failed: {}", failed.len(), checks.len(), failed.join("; ")))
    }
}

fn property_suite(report: &mut Report, id: u32, suite: &str, what: &str, limit_s: f64) {
    let (checks, took) = suites(&[suite]);
    let (ok, detail) = summarize(&checks);
    let fast = secs(took) < limit_s;
    report.record(id, ok && fast, true, format!("{what}: {detail}; {:.1} s (limit {limit_s} s)", secs(took)));
}

fn tiny_model() -> ModelConfig {
    serde_json::from_value(serde_json::json!({
        "unet": {"resolution": 16, "base_channels": 8, "channel_mults": [1, 2], "attention": [false, true],
                 "temb_dim": 16, "groups": 4, "tokens": 4, "token_dim": 8},
        "brain": {"hidden": 12, "tokens": 4, "token_dim": 8},
        "sampler": {"steps": 4}
    }))
    .expect("model config")
}

fn changed(before: &ParamStore<f32>, after: &ParamStore<f32>) -> Vec<String> {
    let (a, b) = (before.hashes(), after.hashes());
    a.iter().filter(|(n, h)| b.get(*n) != Some(h)).map(|(n, _)| n.clone()).collect()
}

/// Every regime, 100 steps: changed parameters stay inside the declared
/// trainable set, and the frozen generator hashes stay put.
fn regime_freezing(report: &mut Report, work: &Path) {
    let t0 = Instant::now();
    let cfg = DatasetConfig {
        n_subjects: 1,
        n_train: 40,
        n_test: 10,
        trials_per_run: 10,
        resolution: 16,
        subject: SubjectConfig { voxels_min: 40, voxels_max: 60, ..Default::default() },
        ..Default::default()
    };
    let dir = work.join("regimes");
    build_dataset(&cfg, 5, &dir).expect("dataset");
    let ds = Dataset::open(&dir).expect("dataset opens");
    let prepared = PreparedRuns::load(&ds, PrepConfig::default(), &[0]).expect("prep");
    let split = build_split_standard(&ds.manifest).expect("split");
    let set = TrainingSet::build(&ds, &prepared, &split, &[0], WindowSpec::default(), 0.0, None).expect("set");
    let model = tiny_model();
    let bank = train_image_bank(&ds).expect("bank");
    let pre = pretrain_generator(
        &bank,
        &model,
        &TrainConfig { steps: 5, batch_size: 4, warmup_steps: 1, ..TrainConfig::pretrain() },
    )
    .expect("pretrain");
    let mut problems = Vec::new();
    let mut counts = Vec::new();
    for regime in Regime::ALL {
        let tc =
            TrainConfig { finetune_regime: regime, steps: 100, batch_size: 4, warmup_steps: 10, ..Default::default() };
        let start = init_joint(&pre, &model.brain, &set, &tc, PrepConfig::default(), Stage::SingleStage).expect("init");
        let trained = trainer_for(start.clone(), None, Some(&set)).and_then(|t| t.run()).expect("train");
        let moved = changed(&start.params, &trained.params);
        for name in &moved {
            let declared = start.params.is_trainable(name);
            let allowed = regime.trains_unet_param(name)
                || (regime == Regime::Lora && is_lora_param(name))
                || is_brain_param(name)
                || name == NULL_TOKENS;
            if !(declared && allowed) {
                problems.push(format!("{} moved {name}", regime.name()));
            }
        }
        let unet_same = start.params.hash_where(is_unet_param) == trained.params.hash_where(is_unet_param);
        let frozen = matches!(regime, Regime::None | Regime::Lora);
        if unet_same != frozen {
            problems.push(format!("{}: generator hash unchanged = {unet_same}", regime.name()));
        }
        counts.push(format!("{} {}", regime.name(), moved.len()));
    }
    let took = secs(t0.elapsed());
    let ok = problems.is_empty() && took < 600.0;
    let detail =
        if problems.is_empty() { format!("tensors moved: {}", counts.join(", ")) } else { problems.join("; ") };
    report.record(5, ok, true, format!("regime freezing after 100 steps: {detail}; {took:.1} s (limit 600 s)"));
}

/// Drives the command-line binary.
struct Cli {
    root: PathBuf,
    config: PathBuf,
}

impl Cli {
    fn run(&self, args: &[&str]) -> String {
        let out = Command::new(env!("CARGO_BIN_EXE_bolddecode"))
            .arg("-q")
            .arg("--root")
            .arg(&self.root)
            .arg("--config")
            .arg(&self.config)
            .args(args)
            .env_remove("BOLDDECODE_OUT")
            .output()
            .expect("binary runs");
        assert!(out.status.success(), "bolddecode {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).expect("utf8")
    }

    fn replay(&self, resolved: &Path) {
        let out = Command::new(env!("CARGO_BIN_EXE_bolddecode"))
            .arg("-q")
            .arg("--root")
            .arg(&self.root)
            .arg("replay")
            .arg(resolved)
            .env_remove("BOLDDECODE_OUT")
            .output()
            .expect("binary runs");
        assert!(out.status.success(), "replay failed:\n{}", String::from_utf8_lossy(&out.stderr));
    }

    fn json(&self, rel: &str) -> Value {
        let p = self.root.join(rel);
        serde_json::from_slice(&std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))).expect("json")
    }

    fn path(&self, rel: &str) -> String {
        self.root.join(rel).to_string_lossy().into_owned()
    }
}

fn mean(summary: &Value, metric: &str) -> f64 {
    summary[metric]["mean"].as_f64().unwrap_or(f64::NAN)
}

fn eval_summary(cli: &Cli, name: &str, extra: &[&str]) -> Value {
    let mut args = vec!["eval", "--name", name];
    args.extend_from_slice(extra);
    cli.run(&args);
    cli.json(&format!("eval/{name}/report.json"))["summary"].clone()
}

fn end_to_end(report: &mut Report, cli: &Cli, scale: Scale, n_subjects: usize) {
    let enforce = scale == Scale::Full;
    let label = if enforce { "full scale" } else { "quick scale" };

    // 6: standard split decoding against the constant-background baseline
    let t0 = Instant::now();
    cli.run(&["train", "--name", "standard"]);
    let model = eval_summary(cli, "standard", &["--model", &cli.path("train/standard")]);
    let constant = eval_summary(cli, "constant", &["--baseline", "constant"]);
    let id = mean(&model, "id_low");
    let (miou, miou_c) = (mean(&model, "miou"), mean(&constant, "miou"));
    let sem = model["id_low"]["sem"].as_f64();
    let ok = id >= 75.0 && miou >= 2.0 * miou_c && sem.is_some();
    report.record(
        6,
        ok,
        enforce,
        format!(
            "{label}: id_low {id:.1} ± {} (need ≥ 75), mIoU {miou:.3} vs constant {miou_c:.3} (need ≥ 2×); {:.0} s",
            sem.map(|s| format!("{s:.1}")).unwrap_or_else(|| "n/a".into()),
            secs(t0.elapsed())
        ),
    );

    // 7: shifted windows, general and specialized
    let t0 = Instant::now();
    cli.run(&["sweep-time"]);
    let sweep = cli.json("sweeps/time/sweep_time.json");
    let points = sweep["points"].as_array().expect("points");
    let gen_id = |p: &Value| p["values"]["general"]["id_low"]["mean"].as_f64().unwrap_or(f64::NAN);
    let early: Vec<f64> =
        points.iter().filter(|p| p["window_end"].as_f64().unwrap() <= 3.0 + 0.5 * TR).map(gen_id).collect();
    let chance_ok = !early.is_empty() && early.iter().all(|v| (v - 50.0).abs() <= 7.0);
    let peak = points.iter().max_by(|a, b| gen_id(a).total_cmp(&gen_id(b))).expect("points");
    let (p_start, p_end) = (
        peak["window_end"].as_f64().unwrap() - peak["window"]["d"].as_f64().unwrap(),
        peak["window_end"].as_f64().unwrap(),
    );
    let p_mid = 0.5 * (p_start + p_end);
    let peak_ok = (4.0..=11.0).contains(&p_mid);
    let at = |k: i32| points.iter().find(|p| (p["delta"].as_f64().unwrap() - k as f64 * TR).abs() < 1e-6);
    let (prev, cur) = at(-3)
        .map(|p| {
            let n = &p["neighbor_id"]["general"];
            (n["previous"]["mean"].as_f64().unwrap_or(f64::NAN), n["current"]["mean"].as_f64().unwrap_or(f64::NAN))
        })
        .unwrap_or((f64::NAN, f64::NAN));
    let prev_ok = prev > cur;
    let mut spec_notes = Vec::new();
    let mut spec_ok = true;
    for p in points {
        let Some(s) = p["values"].get("specialized") else { continue };
        let k = (p["delta"].as_f64().unwrap() / TR).round() as i32;
        if k.abs() < 2 {
            continue;
        }
        let (sv, gv) = (s["id_low"]["mean"].as_f64().unwrap_or(f64::NAN), gen_id(p));
        spec_ok &= sv >= gv - 2.0;
        spec_notes.push(format!("{k}TR {sv:.1}/{gv:.1}"));
    }
    spec_ok &= !spec_notes.is_empty();
    report.record(
        7,
        chance_ok && peak_ok && prev_ok && spec_ok,
        enforce,
        format!(
            "{label}: early-window id {} (need 50 ± 7) {}; peak {:.1} at window [{p_start:.1}, {p_end:.1}] s (midpoint in 4-11 s) {}; \
             at -3TR previous {prev:.1} vs current {cur:.1} {}; specialized/general {} {}; {:.0} s",
            early.iter().map(|v| format!("{v:.1}")).collect::<Vec<_>>().join(","),
            mark(chance_ok),
            gen_id(peak),
            mark(peak_ok),
            mark(prev_ok),
            spec_notes.join(", "),
            mark(spec_ok),
            secs(t0.elapsed())
        ),
    );

    // 8: shuffled conditioning
    let t0 = Instant::now();
    cli.run(&["train", "--shuffle", "--name", "shuffled"]);
    let shuffled = eval_summary(cli, "shuffled", &["--model", &cli.path("train/shuffled")]);
    let (lo, hi) = (mean(&shuffled, "id_low"), mean(&shuffled, "id_high"));
    let ok = (lo - 50.0).abs() <= 7.0 && (hi - 50.0).abs() <= 7.0;
    report.record(
        8,
        ok,
        enforce,
        format!("{label}: shuffled id_low {lo:.1}, id_high {hi:.1} (need 50 ± 7); {:.0} s", secs(t0.elapsed())),
    );

    // 9: multi-subject trunk, then adapting a held-out subject on a quarter of its runs
    let t0 = Instant::now();
    let held_out = n_subjects - 1;
    let others: Vec<String> = (0..held_out).map(|s| s.to_string()).collect();
    let manifest = cli.json("data/manifest.json");
    let runs = manifest["runs"]
        .as_array()
        .expect("runs")
        .iter()
        .filter(|r| r["subject"].as_u64() == Some(held_out as u64))
        .count();
    let sessions = ((runs as f64 * 0.25).round() as usize).max(1).to_string();
    let held = held_out.to_string();
    cli.run(&["train", "--multi-subject", "--subjects", &others.join(","), "--name", "multi"]);
    cli.run(&[
        "train",
        "--adapt-subject",
        &held,
        "--base",
        &cli.path("train/multi"),
        "--sessions",
        &sessions,
        "--name",
        "adapted",
    ]);
    cli.run(&["train", "--subjects", &held, "--max-runs", &sessions, "--name", "scratch"]);
    let adapted =
        mean(&eval_summary(cli, "adapted", &["--model", &cli.path("train/adapted"), "--subjects", &held]), "id_low");
    let scratch =
        mean(&eval_summary(cli, "scratch", &["--model", &cli.path("train/scratch"), "--subjects", &held]), "id_low");
    report.record(
        9,
        adapted >= scratch - 2.0,
        enforce,
        format!(
            "{label}: adapted {adapted:.1} vs from-scratch {scratch:.1} on {sessions} of {runs} runs (need ≥ scratch - 2); {:.0} s",
            secs(t0.elapsed())
        ),
    );
}

fn mark(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "MISS"
    }
}

/// Every file under `dir`, relative path → bytes.
fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).expect("readable"));
            }
        }
    }
    out
}

/// Replays recorded commands over moved-away outputs and compares every file.
fn determinism(report: &mut Report, cli: &Cli) {
    let mut diffs = Vec::new();
    let mut compared = 0;
    for rel in ["data", "pretrain", "train/shuffled", "eval/shuffled", "sweeps/time"] {
        let dir = cli.root.join(rel);
        let before = files(&dir);
        let recorded = cli.root.join("replayed.json");
        std::fs::copy(dir.join("resolved_config.json"), &recorded).expect("resolved config");
        std::fs::remove_dir_all(&dir).expect("removable");
        cli.replay(&recorded);
        let after = files(&dir);
        compared += before.len();
        if before.keys().ne(after.keys()) {
            diffs.push(format!("{rel}: file sets differ"));
        }
        for (k, v) in &before {
            if after.get(k) != Some(v) {
                diffs.push(format!("{rel}/{}", k.display()));
            }
        }
    }
    let ok = diffs.is_empty();
    let detail = if ok {
        format!("{compared} files bitwise identical after replay")
    } else {
        format!("differs: {}", diffs.join(", "))
    };
    report.record(10, ok, true, format!("determinism (data, pretraining, training, eval, time sweep): {detail}"));
}

fn main() {
    let scale = match std::env::var("DECODER_ACCEPTANCE_SCALE").as_deref() {
        Ok("full") => Scale::Full,
        _ => Scale::Quick,
    };
    let keep = std::env::var_os("ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("tempdir");
    let work = keep.clone().unwrap_or_else(|| tmp.path().to_path_buf());
    std::fs::create_dir_all(&work).expect("work dir");
    let mut report = Report { lines: Vec::new() };
    println!("acceptance ({} scale) in {}", if scale == Scale::Full { "full" } else { "quick" }, work.display());

    let (checks, took) = suites(&["substrate"]);
    let (ok, detail) = summarize(&checks);
    report.record(
        1,
        ok && secs(took) < 60.0,
        true,
        format!("substrate gradchecks and AdamW step: {detail}; {:.1} s (limit 60 s)", secs(took)),
    );
    property_suite(&mut report, 2, "prep", "preprocessing oracles", 60.0);
    property_suite(&mut report, 3, "diffusion", "diffusion invariants at 10^6 draws", 300.0);
    property_suite(&mut report, 4, "brain", "brain module variants", 300.0);
    regime_freezing(&mut report, &work);

    let config = work.join("config.json");
    let n_subjects = match scale {
        Scale::Quick => {
            std::fs::write(&config, QUICK).expect("config");
            3
        }
        Scale::Full => {
            std::fs::write(&config, "{}").expect("config");
            DatasetConfig::default().n_subjects
        }
    };
    let cli = Cli { root: work.join("runs"), config };
    let t0 = Instant::now();
    cli.run(&["gen-data"]);
    cli.run(&["preprocess"]);
    cli.run(&["pretrain-gen"]);
    println!("data and generator ready in {:.0} s", secs(t0.elapsed()));
    end_to_end(&mut report, &cli, scale, n_subjects);
    determinism(&mut report, &cli);

    report.lines.sort_by_key(|l| l.id);
    let passed = report.lines.iter().filter(|l| l.passed).count();
    let enforced_failures: Vec<&Line> = report.lines.iter().filter(|l| l.enforced && !l.passed).collect();
    println!("acceptance: {passed}/{} criteria pass", report.lines.len());
    if !enforced_failures.is_empty() {
        for l in &enforced_failures {
            eprintln!("criterion {} failed: {}", l.id, l.text);
        }
        std::process::exit(1);
    }
}
