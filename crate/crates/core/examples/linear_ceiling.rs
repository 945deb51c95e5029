//! Closed-form ridge decoder from epochs to pixels, scored with the same
//! identification probes as the diffusion decoder. A cheap estimate of how
//! much linearly decodable image information a dataset carries.
//!
//! cargo run --release -p bolddecode --example linear_ceiling -- <dataset dir> [subject] [--mean]
//!
//! `--mean` averages each voxel over the window (C features instead of C·T).

use bolddecode::evalkit::{ProbeKind, Scorer};
use bolddecode::prep::{build_split_standard, pick_test_repetitions, Epoch, PrepConfig, PreparedRuns, WindowSpec};
use bolddecode::synthcortex::Dataset;

/// Solves `A·X = B` in place for symmetric positive definite `A` (n×n);
/// `B` is n×m and receives `X`.
fn cholesky_solve(a: &mut [f64], n: usize, b: &mut [f64], m: usize) {
    for j in 0..n {
        let d = (a[j * n + j] - (0..j).map(|k| a[j * n + k] * a[j * n + k]).sum::<f64>()).sqrt();
        a[j * n + j] = d;
        for i in j + 1..n {
            let s = a[i * n + j] - (0..j).map(|k| a[i * n + k] * a[j * n + k]).sum::<f64>();
            a[i * n + j] = s / d;
        }
    }
    for c in 0..m {
        for i in 0..n {
            let s = b[i * m + c] - (0..i).map(|k| a[i * n + k] * b[k * m + c]).sum::<f64>();
            b[i * m + c] = s / a[i * n + i];
        }
        for i in (0..n).rev() {
            let s = b[i * m + c] - (i + 1..n).map(|k| a[k * n + i] * b[k * m + c]).sum::<f64>();
            b[i * m + c] = s / a[i * n + i];
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn main() -> bolddecode::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mean_features = args.iter().any(|a| a == "--mean");
    let pos: Vec<&String> = args.iter().filter(|a| !a.starts_with("--")).collect();
    let Some(dir) = pos.first() else {
        eprintln!("usage: linear_ceiling <dataset dir> [subject] [--mean]");
        std::process::exit(2);
    };
    let subject: usize = pos.get(1).map(|s| s.parse().expect("subject id")).unwrap_or(0);

    let ds = Dataset::open(std::path::Path::new(dir.as_str()))?;
    let prepared = PreparedRuns::load(&ds, PrepConfig::default(), &[subject])?;
    let split = build_split_standard(&ds.manifest)?;
    let trials = split.subject(subject).expect("subject in split");
    let features = |e: &Epoch| -> Vec<f64> {
        if mean_features {
            e.data
                .chunks(e.n_samples)
                .map(|row| row.iter().map(|&x| x as f64).sum::<f64>() / e.n_samples as f64)
                .collect()
        } else {
            e.data.iter().map(|&x| x as f64).collect()
        }
    };
    let w = WindowSpec::default();
    let train: Vec<Epoch> = trials.train.iter().filter_map(|&t| prepared.epoch(subject, t, w, 0.0).ok()).collect();
    let x: Vec<Vec<f64>> = train.iter().map(features).collect();
    let y: Vec<Vec<f32>> = train.iter().map(|e| ds.image(e.stimulus)).collect::<bolddecode::Result<_>>()?;
    let (n, m) = (x.len(), y[0].len());
    let y_mean: Vec<f64> = (0..m).map(|j| y.iter().map(|r| r[j] as f64).sum::<f64>() / n as f64).collect();
    let reps = pick_test_repetitions(&ds.manifest, &split, 0);
    let test: Vec<Epoch> =
        reps.trials(subject).iter().filter_map(|&(_, _, t)| prepared.epoch(subject, t, w, 0.0).ok()).collect();
    let targets: Vec<Vec<f32>> = test.iter().map(|e| ds.image(e.stimulus)).collect::<bolddecode::Result<_>>()?;
    let gram: Vec<f64> = (0..n * n).map(|k| dot(&x[k / n], &x[k % n])).collect();
    let scorer = Scorer::new(ds.manifest.config.resolution);
    println!("subject {subject}: {n} training trials, {} features, {} test trials", x[0].len(), test.len());
    // dual form: alpha = (X·Xᵀ + λI)⁻¹ (Y − ȳ), prediction = ȳ + k(x)ᵀ alpha
    for lambda in [1.0, 10.0, 100.0, 1000.0, 10000.0] {
        let mut a = gram.clone();
        for i in 0..n {
            a[i * n + i] += lambda;
        }
        let mut alpha: Vec<f64> = (0..n * m).map(|k| y[k / m][k % m] as f64 - y_mean[k % m]).collect();
        cholesky_solve(&mut a, n, &mut alpha, m);
        let recons: Vec<Vec<f32>> = test
            .iter()
            .map(|e| {
                let f = features(e);
                let k: Vec<f64> = x.iter().map(|r| dot(r, &f)).collect();
                (0..m)
                    .map(|j| (y_mean[j] + (0..n).map(|i| k[i] * alpha[i * m + j]).sum::<f64>()).clamp(0.0, 1.0) as f32)
                    .collect()
            })
            .collect();
        let (low, _) = scorer.identification(ProbeKind::Low, &recons, &targets)?;
        let (high, _) = scorer.identification(ProbeKind::High, &recons, &targets)?;
        println!("λ = {lambda:>7}: id_low {low:.1}  id_high {high:.1}");
    }
    Ok(())
}
