//! Invariant suites runnable outside `cargo test`: gradient checks, the
//! preprocessing oracles, diffusion invariants and brain-module identities.
//! Each check reports the measured value next to its bound.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::brainmod::{brain_forward, init_brain_module, BrainModuleConfig};
use crate::diffgen::schedule::bicubic_transform;
use crate::diffgen::{
    attach_lora, bicubic_cdf, cfg_combine, ddim_loop, init_unet, make_schedule, offset_noise, unet_forward,
    NoiseSchedule, UNetConfig,
};
use crate::error::Result;
use crate::prep::{cosine_basis, detrend, window_indices, zscore, WindowSpec, DEFAULT_CUTOFF_S};
use crate::substrate::gradcheck::{gradcheck, gradcheck_layer, GradCheckOptions, LayerKind};
use crate::substrate::{adamw_step, AdamWConfig, Binder, Graph, OptimizerState, ParamStore, Rng, Tensor};
use crate::synthcortex::{FmriRun, RunTimeline, TR};

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: &'static str,
    pub name: String,
    /// Measured quantity; compare against `bound`.
    pub value: f64,
    pub bound: f64,
    pub passed: bool,
}

impl Check {
    fn below(suite: &'static str, name: impl Into<String>, value: f64, bound: f64) -> Self {
        Self { suite, name: name.into(), value, bound, passed: value < bound }
    }

    fn holds(suite: &'static str, name: impl Into<String>, ok: bool) -> Self {
        Self { suite, name: name.into(), value: if ok { 0.0 } else { 1.0 }, bound: 0.5, passed: ok }
    }
}

pub const SUITES: [&str; 4] = ["substrate", "prep", "diffusion", "brain"];

/// Runs one named suite. `draws` sets the Monte-Carlo sample size of the
/// sampler checks.
pub fn run_suite(name: &str, draws: usize) -> Result<Vec<Check>> {
    match name {
        "substrate" => substrate_suite(),
        "prep" => prep_suite(),
        "diffusion" => diffusion_suite(draws),
        "brain" => brain_suite(),
        other => Err(crate::Error::InvalidArgument(format!("unknown suite `{other}` (expected one of {SUITES:?})"))),
    }
}

pub fn substrate_suite() -> Result<Vec<Check>> {
    const S: &str = "substrate";
    let mut out = Vec::new();
    for kind in LayerKind::ALL {
        for seed in 0..3 {
            let rep = gradcheck_layer(kind, seed, GradCheckOptions { seed, ..Default::default() })?;
            out.push(Check::below(S, format!("gradcheck {kind:?} seed {seed}"), rep.max_rel_err, 1e-3));
        }
    }
    // two AdamW steps, reference values computed with 40-digit decimals
    let mut p = ParamStore::new();
    p.insert("theta", Tensor::scalar(1.0f64), true)?;
    let mut st = OptimizerState::new();
    let cfg = AdamWConfig::default();
    let mut errs = Vec::new();
    for (g, expected) in [(1.0, 0.899_000_000_999_999_99), (-2.0, 0.934_711_353_471_075_1)] {
        let grads = BTreeMap::from([("theta".to_string(), Tensor::scalar(g))]);
        adamw_step(&mut p, &grads, &mut st, 0.1, &cfg)?;
        errs.push((p.get("theta").expect("inserted above").data()[0] - expected).abs());
    }
    out.push(Check::below(S, "adamw hand-computed step 1", errs[0], 1e-9));
    out.push(Check::below(S, "adamw hand-computed step 2", errs[1], 1e-9));
    Ok(out)
}

fn single_voxel_run(rows: Vec<Vec<f64>>) -> FmriRun {
    let n = rows[0].len();
    FmriRun {
        subject: 0,
        run: 0,
        split_tag: "selftest".into(),
        timeline: RunTimeline { tr: TR, n_volumes: n, events: vec![] },
        n_voxels: rows.len(),
        data: rows.concat(),
    }
}

/// Worst residual power fraction after detrending injected slow cosines.
pub fn drift_residual(seeds: u64, n_volumes: usize) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut r = Rng::new(seed).split("drift");
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                let comps: Vec<(f64, f64, f64)> = (0..3)
                    .map(|_| (r.uniform_range(64.0, 256.0), r.uniform_range(0.0, std::f64::consts::TAU), r.normal()))
                    .collect();
                (0..n_volumes)
                    .map(|i| {
                        let t = i as f64 * TR;
                        comps.iter().map(|&(p, ph, a)| a * (std::f64::consts::TAU * t / p + ph).cos()).sum()
                    })
                    .collect()
            })
            .collect();
        let run = single_voxel_run(rows.clone());
        let out = detrend(&run, DEFAULT_CUTOFF_S)?;
        for (v, row) in rows.iter().enumerate() {
            let before: f64 = row.iter().map(|x| x * x).sum();
            let after: f64 = out.voxel(v).iter().map(|x| x * x).sum();
            worst = worst.max(after / before);
        }
    }
    Ok(worst)
}

/// Exact decisecond arithmetic: TR is 13 units.
fn brute_window(onset_ds: i64, t_ds: i64, d_ds: i64, delta_tr: i64) -> Option<(usize, usize)> {
    let start = onset_ds + t_ds + 13 * delta_tr;
    if start < -12 {
        return None;
    }
    let mut n = 0i64;
    while 13 * n < start {
        n += 1;
    }
    // d/TR is never a half-integer in deciseconds, so rounding is unambiguous
    let mut t = 0i64;
    while (13 * (t + 1) - d_ds).abs() < (13 * t - d_ds).abs() {
        t += 1;
    }
    Some((n as usize, t as usize))
}

/// Window index arithmetic against a brute-force enumeration; returns the
/// number of disagreeing cases.
pub fn window_mismatches(cases: usize, seed: u64) -> usize {
    let mut r = Rng::new(seed).split("windows");
    let mut bad = 0;
    for _ in 0..cases {
        let onset_ds = 160 + 40 * r.below(120) as i64;
        let t_ds = r.below(101) as i64;
        let d_ds = 13 + r.below(80) as i64;
        let delta_tr = r.below(16) as i64 - 6;
        let w = WindowSpec { t: t_ds as f64 / 10.0, d: d_ds as f64 / 10.0 };
        let got = window_indices(onset_ds as f64 / 10.0, w, delta_tr as f64 * TR, TR);
        if got != brute_window(onset_ds, t_ds, d_ds, delta_tr) {
            bad += 1;
        }
    }
    bad
}

/// Largest deviation of per-voxel z-scored mean from 0 and std from 1.
pub fn zscore_moment_error(seed: u64) -> Result<f64> {
    let mut r = Rng::new(seed).split("zscore");
    let rows: Vec<Vec<f64>> = (0..16)
        .map(|_| {
            let (m, s) = (r.uniform_range(-50.0, 50.0), r.uniform_range(0.01, 20.0));
            (0..179).map(|_| m + s * r.normal()).collect()
        })
        .collect();
    let (out, _) = zscore(&single_voxel_run(rows))?;
    let mut worst: f64 = 0.0;
    for v in 0..out.n_voxels {
        let x = out.voxel(v);
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let std = (x.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n).sqrt();
        worst = worst.max(mean.abs()).max((std - 1.0).abs());
    }
    Ok(worst)
}

pub fn prep_suite() -> Result<Vec<Check>> {
    const S: &str = "prep";
    let basis = cosine_basis(179, TR, DEFAULT_CUTOFF_S);
    Ok(vec![
        Check::below(S, "drift 64-256 s residual power", drift_residual(5, 179)?, 0.01),
        Check::below(S, "z-score moments", zscore_moment_error(0)?, 1e-5),
        Check::below(S, "window indices vs enumeration (10^4 cases)", window_mismatches(10_000, 0) as f64, 0.5),
        Check::holds(S, "basis starts with the constant", basis[0].iter().all(|&v| v == 1.0)),
    ])
}

/// DDIM with an oracle noise predictor; max-abs error of the recovered x0.
pub fn ddim_oracle_error(schedule: &NoiseSchedule, steps: usize, seed: u64) -> Result<f64> {
    let mut r = Rng::new(seed);
    let x0: Vec<f32> = (0..256).map(|_| r.uniform_range(-1.0, 1.0) as f32).collect();
    let xt: Vec<f32> = (0..256).map(|_| r.normal() as f32).collect();
    let out = ddim_loop(schedule, steps, false, xt, |x, t| {
        let (a, sd) = schedule.coefficients(t);
        Ok(x.iter().zip(&x0).map(|(&xv, &x0v)| ((xv as f64 - a * x0v as f64) / sd) as f32).collect())
    })?;
    Ok(out.iter().zip(&x0).map(|(a, b)| (a - b).abs() as f64).fold(0.0, f64::max))
}

/// Sup-norm between the empirical timestep CDF and the analytic one.
pub fn bicubic_sup_norm(draws: usize, t_max: usize, seed: u64) -> f64 {
    let mut r = Rng::new(seed).split("bicubic");
    let mut counts = vec![0usize; t_max];
    for _ in 0..draws {
        counts[bicubic_transform(r.uniform(), t_max)] += 1;
    }
    let mut acc = 0usize;
    let mut sup: f64 = 0.0;
    for (x, c) in counts.iter().enumerate() {
        acc += c;
        sup = sup.max((acc as f64 / draws as f64 - bicubic_cdf(x, t_max)).abs());
    }
    sup
}

/// Relative error of the offset-noise variance against 1 + λ².
pub fn offset_variance_error(draws: usize, lambda: f64, seed: u64) -> f64 {
    let mut r = Rng::new(seed).split("offset");
    let per = 16;
    let items = draws.div_ceil(per);
    let (mut s, mut ss, mut n) = (0.0, 0.0, 0.0);
    for _ in 0..items {
        for v in offset_noise(&mut r, (1, 4, 4), lambda) {
            s += v as f64;
            ss += (v as f64).powi(2);
            n += 1.0;
        }
    }
    let var = ss / n - (s / n).powi(2);
    (var / (1.0 + lambda * lambda) - 1.0).abs()
}

fn lora_zero_bitwise() -> Result<bool> {
    let cfg = UNetConfig {
        resolution: 8,
        base_channels: 4,
        channel_mults: vec![1, 2],
        attention: vec![false, true],
        temb_dim: 8,
        groups: 2,
        tokens: 2,
        token_dim: 3,
        ..Default::default()
    };
    let mut store = init_unet::<f32>(&cfg, &Rng::new(1))?;
    for n in store.names().cloned().collect::<Vec<_>>() {
        let mut r = Rng::new(5).split(&n);
        store.tensor_mut(&n).expect("listed").data_mut().iter_mut().for_each(|v| *v += 0.1 * r.normal() as f32);
    }
    let mut r = Rng::new(2);
    let x = Tensor::randn(&mut r, &[2, 3, 8, 8], 1.0);
    let tok = Tensor::randn(&mut r, &[2, 2, 3], 1.0);
    let forward = |store: &ParamStore<f32>| -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let mut b = Binder::frozen(store);
        let (xv, tv) = (g.constant(x.clone()), g.constant(tok.clone()));
        let out = unet_forward(&mut g, &mut b, &cfg, xv, &[3, 900], tv)?;
        Ok(g.value(out).clone())
    };
    let plain = forward(&store)?;
    attach_lora(&cfg, &mut store, &Rng::new(3))?;
    let adapted = forward(&store)?;
    Ok(plain.data().iter().zip(adapted.data()).all(|(p, q)| p.to_bits() == q.to_bits()))
}

pub fn diffusion_suite(draws: usize) -> Result<Vec<Check>> {
    const S: &str = "diffusion";
    let sched = make_schedule(1000, 1e-4, 0.02)?;
    let ab = &sched.alpha_bar;
    let monotone = ab.windows(2).all(|w| w[1] < w[0]) && ab[0] > 0.99 && ab[ab.len() - 1] < 0.01;
    let mut r = Rng::new(4);
    let c: Vec<f32> = (0..64).map(|_| r.normal() as f32).collect();
    let u: Vec<f32> = (0..64).map(|_| r.normal() as f32).collect();
    let cfg_one = cfg_combine(&c, &u, 1.0).iter().zip(&c).all(|(a, b)| a.to_bits() == b.to_bits());
    let mut out = vec![
        Check::holds(S, "schedule monotone with endpoint bounds", monotone),
        Check::below(S, "oracle DDIM x0 recovery (20 steps)", ddim_oracle_error(&sched, 20, 3)?, 1e-3),
        Check::below(S, "oracle DDIM x0 recovery (1000 steps)", ddim_oracle_error(&sched, 1000, 3)?, 1e-3),
        Check::holds(S, "LoRA with zero B is bitwise identical", lora_zero_bitwise()?),
        Check::holds(S, "guidance 1 returns the conditional prediction", cfg_one),
        Check::below(S, format!("bicubic CDF sup-norm ({draws} draws)"), bicubic_sup_norm(draws, 1000, 0), 0.01),
    ];
    for lambda in [0.1, 1.0] {
        out.push(Check::below(
            S,
            format!("offset-noise variance 1+λ², λ={lambda} ({draws} draws)"),
            offset_variance_error(draws, lambda, 1),
            0.01,
        ));
    }
    Ok(out)
}

fn brain_small() -> BrainModuleConfig {
    BrainModuleConfig { hidden: 6, tokens: 2, token_dim: 3, window_len: 3, dropout: 0.5, ..Default::default() }
}

fn brain_run(cfg: &BrainModuleConfig, store: &ParamStore<f64>, subject: usize, x: &Tensor<f64>) -> Result<Tensor<f64>> {
    let mut g = Graph::new();
    let mut b = Binder::frozen(store);
    let xv = g.constant(x.clone());
    let out = brain_forward(&mut g, &mut b, cfg, subject, xv, false, &mut Rng::new(0))?;
    Ok(g.value(out).clone())
}

/// Max-abs gap between the per-timestep variant with T identical matrices
/// and the shared variant.
pub fn equal_timestep_gap() -> Result<f64> {
    let cfg = brain_small();
    let shared_cfg = BrainModuleConfig { timestep_layer_enabled: false, ..cfg.clone() };
    let shared = init_brain_module::<f64>(&shared_cfg, &[(0, 4)], &Rng::new(8))?;
    let mut per = shared.clone();
    let w = shared.get("brain/subject/0/shared/weight").expect("shared variant").clone();
    let bias = shared.get("brain/subject/0/shared/bias").expect("shared variant").clone();
    per.remove("brain/subject/0/shared/weight");
    per.remove("brain/subject/0/shared/bias");
    per.insert("brain/subject/0/timestep/weight", Tensor::stack(&vec![(*w).clone(); cfg.window_len])?, true)?;
    per.insert("brain/subject/0/timestep/bias", Tensor::stack(&vec![(*bias).clone(); cfg.window_len])?, true)?;
    let mut worst: f64 = 0.0;
    for seed in 0..5 {
        let x = Tensor::randn(&mut Rng::new(seed), &[3, 3, 4], 1.0);
        let a = brain_run(&cfg, &per, 0, &x)?;
        let b = brain_run(&shared_cfg, &shared, 0, &x)?;
        worst = a.data().iter().zip(b.data()).map(|(p, q)| (p - q).abs()).fold(worst, f64::max);
    }
    Ok(worst)
}

pub fn brain_suite() -> Result<Vec<Check>> {
    const S: &str = "brain";
    let mut out = Vec::new();
    for (name, cfg) in brain_small().variants() {
        let mut store = init_brain_module::<f64>(&cfg, &[(0, 4), (1, 7)], &Rng::new(5))?;
        let mut shapes_ok = true;
        for (subject, c) in [(0usize, 4usize), (1, 7)] {
            let x = Tensor::randn(&mut Rng::new(subject as u64), &[2, cfg.window_len, c], 1.0);
            shapes_ok &= brain_run(&cfg, &store, subject, &x)?.shape() == [2, cfg.tokens, cfg.token_dim];
        }
        out.push(Check::holds(S, format!("{name}: P×D tokens for C=4 and C=7"), shapes_ok));
        for n in store.names().cloned().collect::<Vec<_>>() {
            let mut r = Rng::new(9).split(&n);
            store.tensor_mut(&n).expect("listed").data_mut().iter_mut().for_each(|v| *v += 0.3 * r.normal());
        }
        store.insert("x", Tensor::randn(&mut Rng::new(6), &[2, 3, 4], 1.0), true)?;
        let weights: Vec<f64> = (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.5).collect();
        let rep = gradcheck(
            &store,
            |g, b| {
                let x = b.var(g, "x");
                let out = brain_forward(g, b, &cfg, 0, x, true, &mut Rng::new(11)).expect("valid fixture");
                g.weighted_sum(out, weights.clone())
            },
            GradCheckOptions::default(),
        )?;
        out.push(Check::below(S, format!("{name}: gradcheck"), rep.max_rel_err, 1e-3));
    }
    out.push(Check::below(S, "equal timestep matrices match the shared layer", equal_timestep_gap()?, 1e-6));
    Ok(out)
}
