//! Procedural color–shape world: type-1 primitives are RGB colors, type-2
//! primitives are binary shape masks. Each image paints one shape in one
//! color over a low-frequency grayscale texture, then adds pixel noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Composition, Dataset, DatasetError, DatasetRules, Kind, PrimitiveDecl, Sample, Split};
use crate::diffcore::Tensor;

/// `n` evenly spaced, saturated hues.
pub fn palette(n: usize) -> Vec<[f64; 3]> {
    (0..n).map(|k| hsv_to_rgb(k as f64 / n as f64, 0.85, 0.9)).collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.fract() * 6.0).rem_euclid(6.0);
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Where a shape lands and what the background looks like for one image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Placement {
    pub dy: usize,
    pub dx: usize,
    pub bg_level: f64,
    pub bg_freq: [f64; 2],
    pub bg_phase: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticWorld {
    image_size: usize,
    box_size: usize,
    colors: Vec<[f64; 3]>,
    shapes: Vec<Vec<bool>>,
}

const BG_AMPLITUDE: f64 = 0.12;

impl SyntheticWorld {
    pub fn new(n_colors: usize, n_shapes: usize, image_size: usize, rng: &mut ChaCha8Rng) -> Result<Self, DatasetError> {
        if image_size < 8 {
            return Err(DatasetError::InvalidSize(format!("image_size must be at least 8, got {image_size}")));
        }
        let box_size = ((image_size as f64) * 0.625).round() as usize;
        let shapes = random_shapes(n_shapes, box_size, rng)?;
        Ok(Self { image_size, box_size, colors: palette(n_colors), shapes })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn box_size(&self) -> usize {
        self.box_size
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        self.colors[i]
    }

    /// Row-major `box_size × box_size` mask.
    pub fn shape_mask(&self, i: usize) -> &[bool] {
        &self.shapes[i]
    }

    pub fn random_placement(&self, rng: &mut ChaCha8Rng) -> Placement {
        let slack = self.image_size - self.box_size;
        Placement {
            dy: rng.random_range(0..=slack),
            dx: rng.random_range(0..=slack),
            bg_level: rng.random_range(0.35..0.55),
            bg_freq: [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)],
            bg_phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    /// Noise-free image of `color` painted on `shape`.
    pub fn render(&self, color: usize, shape: usize, at: &Placement) -> Tensor {
        let n = self.image_size;
        let rgb = self.colors[color];
        let mask = &self.shapes[shape];
        let mut data = vec![0.0; 3 * n * n];
        for y in 0..n {
            for x in 0..n {
                let arg = std::f64::consts::TAU * (at.bg_freq[0] * y as f64 + at.bg_freq[1] * x as f64) / n as f64;
                let bg = at.bg_level + BG_AMPLITUDE * (arg + at.bg_phase).sin();
                let inside = y >= at.dy
                    && x >= at.dx
                    && y - at.dy < self.box_size
                    && x - at.dx < self.box_size
                    && mask[(y - at.dy) * self.box_size + (x - at.dx)];
                for c in 0..3 {
                    data[(c * n + y) * n + x] = if inside { rgb[c] } else { bg };
                }
            }
        }
        Tensor::new(vec![3, n, n], data).expect("image shape")
    }

    /// Rendered image plus clipped Gaussian pixel noise.
    pub fn render_noisy(&self, color: usize, shape: usize, at: &Placement, sigma: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let mut img = self.render(color, shape, at);
        if sigma > 0.0 {
            let noise = Normal::new(0.0, sigma).expect("sigma > 0");
            for v in img.data_mut() {
                *v = (*v + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
        img
    }
}

fn random_shapes(n: usize, b: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<bool>>, DatasetError> {
    let area = (b * b) as f64;
    let min_distance = ((0.15 * area).round() as usize).max(1);
    let mut shapes: Vec<Vec<bool>> = Vec::with_capacity(n);
    let mut tries = 0;
    while shapes.len() < n {
        tries += 1;
        if tries > 100_000 {
            return Err(DatasetError::InvalidSize(format!("cannot draw {n} distinct shapes in a {b}x{b} box")));
        }
        let mut mask = vec![false; b * b];
        let parts = rng.random_range(1..=3);
        for _ in 0..parts {
            let cy = rng.random_range(0.0..b as f64);
            let cx = rng.random_range(0.0..b as f64);
            let ry = rng.random_range(1.5..(b as f64 / 2.0).max(1.6));
            let rx = rng.random_range(1.5..(b as f64 / 2.0).max(1.6));
            let ellipse = rng.random::<bool>();
            for y in 0..b {
                for x in 0..b {
                    let u = (y as f64 + 0.5 - cy) / ry;
                    let v = (x as f64 + 0.5 - cx) / rx;
                    let hit = if ellipse { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                    mask[y * b + x] |= hit;
                }
            }
        }
        let filled = mask.iter().filter(|&&m| m).count() as f64 / area;
        if !(0.25..=0.65).contains(&filled) {
            continue;
        }
        let distinct = shapes
            .iter()
            .all(|s| s.iter().zip(&mask).filter(|(a, b)| a != b).count() >= min_distance);
        if distinct {
            shapes.push(mask);
        }
    }
    Ok(shapes)
}

/// Three-split synthetic benchmark. Primitive `k` of each kind goes to split
/// `k mod 3`, so every split spans the whole hue circle and shape family.
#[derive(Clone, Debug, PartialEq)]
pub struct BenchmarkConfig {
    pub n_type1_per_split: usize,
    pub n_type2_per_split: usize,
    pub samples_per_composition: usize,
    pub image_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n_type1_per_split: 12,
            n_type2_per_split: 12,
            samples_per_composition: 20,
            image_size: 16,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

fn check_sizes(n1: usize, n2: usize, spc: usize, sigma: f64) -> Result<(), DatasetError> {
    if n1 < 2 || n2 < 2 {
        return Err(DatasetError::InvalidSize(format!("need at least 2 primitives per kind, got {n1} and {n2}")));
    }
    if spc < 10 {
        return Err(DatasetError::InvalidSize(format!("samples_per_composition must be at least 10, got {spc}")));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(DatasetError::InvalidSize(format!("noise_sigma must be non-negative, got {sigma}")));
    }
    Ok(())
}

fn build(
    n1: usize,
    n2: usize,
    spc: usize,
    image_size: usize,
    sigma: f64,
    seed: u64,
    split_of: impl Fn(usize) -> Split,
) -> Result<Dataset, DatasetError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let world = SyntheticWorld::new(n1, n2, image_size, &mut rng)?;
    let mut prims = Vec::with_capacity(n1 + n2);
    for i in 0..n1 {
        prims.push(PrimitiveDecl { name: format!("color{i:02}"), kind: Kind::Type1, split: split_of(i), embedding: None });
    }
    for j in 0..n2 {
        prims.push(PrimitiveDecl { name: format!("shape{j:02}"), kind: Kind::Type2, split: split_of(j), embedding: None });
    }
    let mut samples = Vec::new();
    for i in 0..n1 {
        for j in 0..n2 {
            if split_of(i) != split_of(j) {
                continue;
            }
            for _ in 0..spc {
                let at = world.random_placement(&mut rng);
                let image = world.render_noisy(i, j, &at, sigma, &mut rng);
                samples.push(Sample { id: samples.len() as u64, image, label: Composition::new(i, n1 + j) });
            }
        }
    }
    Dataset::new([3, image_size, image_size], prims, samples, DatasetRules::default())
}

/// Single-split (TRAIN) color–shape dataset realizing every pair.
pub fn generate_synthetic(
    n_type1: usize,
    n_type2: usize,
    samples_per_composition: usize,
    image_size: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset, DatasetError> {
    check_sizes(n_type1, n_type2, samples_per_composition, noise_sigma)?;
    build(n_type1, n_type2, samples_per_composition, image_size, noise_sigma, seed, |_| Split::Train)
}

pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Result<Dataset, DatasetError> {
    check_sizes(cfg.n_type1_per_split, cfg.n_type2_per_split, cfg.samples_per_composition, cfg.noise_sigma)?;
    build(
        3 * cfg.n_type1_per_split,
        3 * cfg.n_type2_per_split,
        cfg.samples_per_composition,
        cfg.image_size,
        cfg.noise_sigma,
        cfg.seed,
        |k| Split::ALL[k % 3],
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn differing_pixels(a: &Tensor, b: &Tensor) -> usize {
        let hw = a.shape()[1] * a.shape()[2];
        (0..hw).filter(|&p| (0..3).any(|c| a.data()[c * hw + p] != b.data()[c * hw + p])).count()
    }

    #[test]
    fn counts_for_small_world() {
        let ds = generate_synthetic(2, 2, 10, 16, 0.0, 1).unwrap();
        assert_eq!(ds.samples().len(), 40);
        assert_eq!(ds.compositions().count(), 4);
        assert_eq!(ds.image_shape(), [3, 16, 16]);
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        assert!(matches!(generate_synthetic(1, 2, 10, 16, 0.0, 1), Err(DatasetError::InvalidSize(_))));
        assert!(matches!(generate_synthetic(2, 2, 9, 16, 0.0, 1), Err(DatasetError::InvalidSize(_))));
        assert!(matches!(generate_synthetic(2, 2, 10, 4, 0.0, 1), Err(DatasetError::InvalidSize(_))));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic(3, 2, 10, 16, 0.05, 9).unwrap();
        let b = generate_synthetic(3, 2, 10, 16, 0.05, 9).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(3, 2, 10, 16, 0.05, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn same_composition_differs_only_by_placement() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let world = SyntheticWorld::new(4, 4, 16, &mut rng).unwrap();
        let at = world.random_placement(&mut rng);
        let a = world.render_noisy(1, 2, &at, 0.0, &mut rng);
        let b = world.render_noisy(1, 2, &at, 0.0, &mut rng);
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_compositions_differ_in_enough_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let world = SyntheticWorld::new(6, 6, 16, &mut rng).unwrap();
        let min = (0.01 * 256.0f64).ceil() as usize;
        for _ in 0..50 {
            let at = world.random_placement(&mut rng);
            let (c1, s1) = (rng.random_range(0..6), rng.random_range(0..6));
            let (c2, s2) = (rng.random_range(0..6), rng.random_range(0..6));
            if (c1, s1) == (c2, s2) {
                continue;
            }
            let d = differing_pixels(&world.render(c1, s1, &at), &world.render(c2, s2, &at));
            assert!(d >= min, "({c1},{s1}) vs ({c2},{s2}): {d} pixels");
        }
    }

    #[test]
    fn pixels_are_clipped_to_unit_range() {
        let ds = generate_synthetic(2, 3, 10, 16, 0.5, 2).unwrap();
        assert!(ds.samples().iter().all(|s| s.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn benchmark_splits_are_disjoint_and_complete() {
        let cfg = BenchmarkConfig { n_type1_per_split: 3, n_type2_per_split: 4, samples_per_composition: 10, ..Default::default() };
        let ds = generate_benchmark(&cfg).unwrap();
        ds.validate_splits().unwrap();
        for split in Split::ALL {
            assert_eq!(ds.primitives_in(split, Kind::Type1).len(), 3);
            assert_eq!(ds.primitives_in(split, Kind::Type2).len(), 4);
            assert_eq!(ds.compositions_in(split).len(), 12);
        }
        assert_eq!(ds.samples().len(), 3 * 12 * 10);
    }

    #[test]
    fn palette_colors_are_distinct() {
        let p = palette(36);
        for i in 0..p.len() {
            for j in 0..i {
                let d: f64 = (0..3).map(|c| (p[i][c] - p[j][c]).abs()).sum();
                assert!(d > 0.05);
            }
        }
    }
}
