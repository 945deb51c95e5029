//! Trial-wise image metrics.

use crate::error::{Error, Result};
use crate::synthcortex::Palette;

/// Pearson correlation of two equal-length vectors; `None` when either is
/// constant.
pub fn pearson(a: &[f32], b: &[f32]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson: length mismatch");
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa < 1e-20 || sbb < 1e-20 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flagged {
    pub value: f64,
    /// The input was degenerate and `value` is the documented fallback.
    pub degenerate: bool,
}

/// Pixel-wise correlation over all channels; 0 (flagged) for a constant image.
pub fn pixcorr(a: &[f32], b: &[f32]) -> Flagged {
    match pearson(a, b) {
        Some(r) => Flagged { value: r, degenerate: false },
        None => Flagged { value: 0.0, degenerate: true },
    }
}

/// Luminance of an HWC RGB image.
pub fn grayscale(img: &[f32]) -> Vec<f64> {
    img.chunks(3).map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).collect()
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> =
        (0..SSIM_WINDOW).map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Mean SSIM of two HWC RGB images (grayscale, L = 1) over every position
/// where the 11×11 Gaussian window fits.
pub fn ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> Result<f64> {
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!("{h}x{w} image is smaller than the SSIM window")));
    }
    if a.len() != h * w * 3 || b.len() != a.len() {
        return Err(Error::Shape(format!("ssim expects two {h}x{w}x3 images")));
    }
    let (x, y) = (grayscale(a), grayscale(b));
    let g = gaussian_window();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..ho {
        for ox in 0..wo {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let wgt = g[ky] * g[kx];
                    let p = (oy + ky) * w + ox + kx;
                    mx += wgt * x[p];
                    my += wgt * y[p];
                    sxx += wgt * (x[p] * x[p]);
                    syy += wgt * (y[p] * y[p]);
                    sxy += wgt * (x[p] * y[p]);
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok(total / (ho * wo) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Identification {
    /// Percentage in [0, 100] over the non-excluded items.
    pub percent: f64,
    pub excluded: usize,
}

/// Two-way identification with reconstructions as queries: for each `i`,
/// the fraction of `j ≠ i` with `corr(r_i, g_i) > corr(r_i, g_j)`, ties ½.
/// Items whose reconstruction or target features are constant are
/// excluded (and skipped as distractors).
pub fn two_way_id(recon: &[Vec<f32>], gt: &[Vec<f32>]) -> Result<Identification> {
    if recon.len() != gt.len() || recon.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "two-way identification needs ≥ 2 aligned items, got {} and {}",
            recon.len(),
            gt.len()
        )));
    }
    let n = recon.len();
    let valid_gt: Vec<bool> = gt.iter().map(|g| pearson(g, g).is_some()).collect();
    let mut scores = Vec::new();
    let mut excluded = 0;
    for i in 0..n {
        if !valid_gt[i] || pearson(&recon[i], &recon[i]).is_none() {
            excluded += 1;
            continue;
        }
        let own = pearson(&recon[i], &gt[i]).expect("both non-constant");
        let (mut wins, mut count) = (0.0, 0usize);
        for j in (0..n).filter(|&j| j != i && valid_gt[j]) {
            let other = pearson(&recon[i], &gt[j]).expect("both non-constant");
            wins += if own > other {
                1.0
            } else if own == other {
                0.5
            } else {
                0.0
            };
            count += 1;
        }
        if count > 0 {
            scores.push(wins / count as f64);
        } else {
            excluded += 1;
        }
    }
    let percent = if scores.is_empty() { 50.0 } else { 100.0 * scores.iter().sum::<f64>() / scores.len() as f64 };
    Ok(Identification { percent, excluded })
}

/// Nearest-palette-color class per pixel; ties go to the lower class.
pub fn segment_by_palette(img: &[f32], palette: &Palette) -> Vec<u8> {
    img.chunks(3)
        .map(|p| {
            let mut best = (f32::INFINITY, 0usize);
            for (c, col) in palette.colors.iter().enumerate() {
                let d: f32 = (0..3).map(|k| (p[k] - col[k]).powi(2)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1 as u8
        })
        .collect()
}

/// Mean IoU over classes present in either mask.
pub fn miou(a: &[u8], b: &[u8], n_classes: usize) -> f64 {
    assert_eq!(a.len(), b.len(), "miou: mask sizes differ");
    let mut inter = vec![0usize; n_classes];
    let mut union = vec![0usize; n_classes];
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as usize, y as usize);
        if x == y {
            inter[x] += 1;
            union[x] += 1;
        } else {
            union[x] += 1;
            union[y] += 1;
        }
    }
    let ious: Vec<f64> = (0..n_classes).filter(|&c| union[c] > 0).map(|c| inter[c] as f64 / union[c] as f64).collect();
    if ious.is_empty() {
        return 1.0;
    }
    ious.iter().sum::<f64>() / ious.len() as f64
}
