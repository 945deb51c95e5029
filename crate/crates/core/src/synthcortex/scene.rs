use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::substrate::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
}

/// One filled shape. `size` is the half-extent: circle radius, square
/// half-side, triangle circumradius. Coordinates are in `[0, 1]` with `y`
/// pointing down.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Palette index in `1..=K`.
    pub color: usize,
    pub center: (f64, f64),
    pub size: f64,
}

impl Shape {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        match self.kind {
            ShapeKind::Circle => dx * dx + dy * dy <= self.size * self.size,
            ShapeKind::Square => dx.abs() <= self.size && dy.abs() <= self.size,
            ShapeKind::Triangle => {
                let s = self.size;
                let h = 3f64.sqrt() / 2.0;
                let v = [(0.0, -s), (h * s, 0.5 * s), (-h * s, 0.5 * s)];
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (dy - a.1) - (b.1 - a.1) * (dx - a.0);
                let e = [edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0])];
                e.iter().all(|&c| c >= 0.0) || e.iter().all(|&c| c <= 0.0)
            }
        }
    }
}

/// Shapes are painted in order, so later shapes occlude earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StimulusScene {
    pub shapes: Vec<Shape>,
    /// Always the palette background (class 0).
    pub background: usize,
}

/// `colors[0]` is the background, `colors[1..=K]` the foreground classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub colors: Vec<[f32; 3]>,
}

pub const MIN_PALETTE_DISTANCE: f32 = 0.3;

impl Default for Palette {
    fn default() -> Self {
        Self {
            colors: vec![
                [0.5, 0.5, 0.5],
                [0.9, 0.1, 0.1],
                [0.1, 0.8, 0.2],
                [0.15, 0.25, 0.95],
                [0.95, 0.9, 0.1],
                [0.85, 0.2, 0.85],
                [0.1, 0.85, 0.9],
            ],
        }
    }
}

impl Palette {
    pub fn n_foreground(&self) -> usize {
        self.colors.len() - 1
    }

    pub fn n_classes(&self) -> usize {
        self.colors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.colors.len() < 2 {
            return Err(Error::InvalidArgument("palette needs a background and at least one color".into()));
        }
        for (i, a) in self.colors.iter().enumerate() {
            if a.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return Err(Error::InvalidArgument(format!("palette color {i} outside [0,1]")));
            }
            for (j, b) in self.colors.iter().enumerate().skip(i + 1) {
                let d = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt();
                if d < MIN_PALETTE_DISTANCE {
                    return Err(Error::InvalidArgument(format!("palette colors {i} and {j} are {d:.3} apart")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    /// Probabilities of 1, 2 and 3 shapes.
    pub count_probs: [f64; 3],
    /// Probabilities of circle, square, triangle.
    pub kind_probs: [f64; 3],
    pub size_min: f64,
    pub size_max: f64,
    pub center_min: f64,
    pub center_max: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            count_probs: [0.4, 0.4, 0.2],
            kind_probs: [1.0 / 3.0; 3],
            size_min: 0.1,
            size_max: 0.4,
            center_min: 0.15,
            center_max: 0.85,
        }
    }
}

fn pick(rng: &mut Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let mut u = rng.uniform() * total;
    for (i, &p) in probs.iter().enumerate() {
        if u < p {
            return i;
        }
        u -= p;
    }
    probs.len() - 1
}

pub fn sample_scene(rng: &mut Rng, cfg: &SceneConfig, palette: &Palette) -> StimulusScene {
    let n = pick(rng, &cfg.count_probs) + 1;
    let shapes = (0..n)
        .map(|_| Shape {
            kind: ShapeKind::ALL[pick(rng, &cfg.kind_probs)],
            color: 1 + rng.below(palette.n_foreground()),
            center: (
                rng.uniform_range(cfg.center_min, cfg.center_max),
                rng.uniform_range(cfg.center_min, cfg.center_max),
            ),
            size: rng.uniform_range(cfg.size_min, cfg.size_max),
        })
        .collect();
    StimulusScene { shapes, background: 0 }
}

/// Class id per pixel (row-major `res × res`), 0 = background.
pub fn render_mask(scene: &StimulusScene, res: usize) -> Vec<u8> {
    let mut mask = vec![scene.background as u8; res * res];
    for shape in &scene.shapes {
        for py in 0..res {
            let y = (py as f64 + 0.5) / res as f64;
            for px in 0..res {
                let x = (px as f64 + 0.5) / res as f64;
                if shape.contains(x, y) {
                    mask[py * res + px] = shape.color as u8;
                }
            }
        }
    }
    mask
}

/// RGB image, row-major `res × res × 3` in `[0, 1]`, exact palette values.
pub fn render_scene(scene: &StimulusScene, palette: &Palette, res: usize) -> Vec<f32> {
    render_mask(scene, res).iter().flat_map(|&c| palette.colors[c as usize]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(center: (f64, f64), size: f64, color: usize) -> Shape {
        Shape { kind: ShapeKind::Square, color, center, size }
    }

    #[test]
    fn default_palette_is_valid() {
        Palette::default().validate().unwrap();
        let mut p = Palette::default();
        p.colors[2] = [0.9, 0.15, 0.1];
        assert!(p.validate().is_err());
    }

    #[test]
    fn sampling_is_deterministic_and_valid() {
        let cfg = SceneConfig::default();
        let pal = Palette::default();
        let a = sample_scene(&mut Rng::new(7), &cfg, &pal);
        let b = sample_scene(&mut Rng::new(7), &cfg, &pal);
        assert_eq!(a, b);
        let mut rng = Rng::new(1);
        for _ in 0..500 {
            let s = sample_scene(&mut rng, &cfg, &pal);
            assert!((1..=3).contains(&s.shapes.len()));
            for sh in &s.shapes {
                assert!(sh.color != s.background && sh.color <= pal.n_foreground());
                assert!((0.1..=0.4).contains(&sh.size));
            }
        }
    }

    #[test]
    fn forced_single_shape() {
        let cfg = SceneConfig { count_probs: [1.0, 0.0, 0.0], ..Default::default() };
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            assert_eq!(sample_scene(&mut rng, &cfg, &Palette::default()).shapes.len(), 1);
        }
    }

    #[test]
    fn kind_frequencies_match_configuration() {
        let cfg = SceneConfig { count_probs: [1.0, 0.0, 0.0], kind_probs: [0.5, 0.3, 0.2], ..Default::default() };
        let mut rng = Rng::new(99);
        let n = 10_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            let s = sample_scene(&mut rng, &cfg, &Palette::default());
            counts[ShapeKind::ALL.iter().position(|k| *k == s.shapes[0].kind).unwrap()] += 1;
        }
        for (c, p) in counts.iter().zip(cfg.kind_probs) {
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            assert!((*c as f64 - n as f64 * p).abs() < 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn empty_scene_is_background() {
        let scene = StimulusScene { shapes: vec![], background: 0 };
        let pal = Palette::default();
        assert!(render_mask(&scene, 32).iter().all(|&c| c == 0));
        let img = render_scene(&scene, &pal, 32);
        assert!(img.chunks(3).all(|px| px == pal.colors[0]));
    }

    #[test]
    fn square_pixel_count_matches_geometry() {
        // Pixel centers at (i + 0.5)/32; |x − 0.5| ≤ 0.25 holds for i in 8..=23.
        let scene = StimulusScene { shapes: vec![square((0.5, 0.5), 0.25, 3)], background: 0 };
        let fg = render_mask(&scene, 32).iter().filter(|&&c| c == 3).count();
        assert_eq!(fg, 16 * 16);
        let cover = StimulusScene { shapes: vec![square((0.5, 0.5), 0.4 * 2f64.sqrt() * 1.0001, 1)], background: 0 };
        assert!(render_mask(&cover, 32).iter().all(|&c| c == 1));
    }

    #[test]
    fn mask_and_image_agree() {
        let pal = Palette::default();
        let scene = sample_scene(&mut Rng::new(12), &SceneConfig::default(), &pal);
        let mask = render_mask(&scene, 32);
        let img = render_scene(&scene, &pal, 32);
        for (p, &c) in mask.iter().enumerate() {
            assert_eq!(&img[3 * p..3 * p + 3], &pal.colors[c as usize]);
        }
    }

    #[test]
    fn single_circle_mask_values() {
        let scene = StimulusScene {
            shapes: vec![Shape { kind: ShapeKind::Circle, color: 2, center: (0.4, 0.6), size: 0.2 }],
            background: 0,
        };
        let mask = render_mask(&scene, 32);
        assert!(mask.iter().all(|&c| c == 0 || c == 2));
        assert!(mask.contains(&2));
    }

    #[test]
    fn later_shapes_occlude() {
        let tri = Shape { kind: ShapeKind::Triangle, color: 5, center: (0.5, 0.5), size: 0.2 };
        let scene = StimulusScene { shapes: vec![square((0.5, 0.5), 0.3, 1), tri], background: 0 };
        let mask = render_mask(&scene, 32);
        for py in 0..32 {
            for px in 0..32 {
                let (x, y) = ((px as f64 + 0.5) / 32.0, (py as f64 + 0.5) / 32.0);
                let expected = if tri.contains(x, y) {
                    5
                } else if (x - 0.5).abs() <= 0.3 && (y - 0.5).abs() <= 0.3 {
                    1
                } else {
                    0
                };
                assert_eq!(mask[py * 32 + px], expected);
            }
        }
        // the triangle's own centroid lies inside the overlap
        assert_eq!(mask[16 * 32 + 16], 5);
    }
}
