//! Procedural multi-domain benchmark.
//!
//! Every class id owns a fixed glyph (a union of a few strokes and shapes);
//! a domain renders its classes under its own style: palette, background
//! grating, pixel noise and a gamma contrast curve. Two domains built from the
//! same class ids therefore share semantics and differ only in style.

use std::collections::BTreeSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DatasetRole, DomainDataset, ImageTensor};
use crate::error::{IssError, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    /// Unions of disks, rings, bars and box outlines.
    Glyphs,
    /// A single filled disk whose radius and position encode the class.
    Blobs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StyleParams {
    pub foreground: [f32; 3],
    pub background: [f32; 3],
    pub texture_color: [f32; 3],
    /// Grating cycles across the image width; 0 disables the texture.
    pub texture_frequency: f32,
    pub texture_angle_deg: f32,
    pub texture_amplitude: f32,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f32,
    /// Contrast curve exponent applied last (`v -> v^gamma`).
    pub gamma: f32,
    /// Per-sample uniform perturbation of both palette colours.
    pub palette_jitter: f32,
}

impl StyleParams {
    fn validate(&self) -> Result<()> {
        let colours = self.foreground.iter().chain(&self.background).chain(&self.texture_color);
        if colours.clone().any(|c| !c.is_finite() || !(0.0..=1.0).contains(c)) {
            return Err(IssError::Validation("style colours must lie in [0, 1]".into()));
        }
        let scalars = [self.texture_frequency, self.texture_amplitude, self.noise, self.gamma, self.palette_jitter];
        if scalars.iter().any(|v| !v.is_finite() || *v < 0.0) || self.gamma == 0.0 {
            return Err(IssError::Validation("style scalars must be finite and non-negative, gamma positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub role: DatasetRole,
    pub class_count: usize,
    /// Class ids are `first_class..first_class + class_count`; they are also
    /// the dataset labels, so disjoint ranges give disjoint label spaces.
    pub first_class: usize,
    pub samples_per_class: usize,
    pub image_size: usize,
    pub shape_family: ShapeFamily,
    pub style: StyleParams,
    pub seed: u64,
}

const GLYPH_SEED: u64 = 0x6c79_7068;

#[derive(Debug, Clone, Copy)]
enum Primitive {
    Disk { c: [f32; 2], r: f32 },
    Ring { c: [f32; 2], r: f32, t: f32 },
    Bar { c: [f32; 2], half_len: f32, half_width: f32, angle: f32 },
    BoxOutline { c: [f32; 2], half: f32, t: f32, angle: f32 },
}

fn rotate(p: [f32; 2], angle: f32) -> [f32; 2] {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

fn norm(p: [f32; 2]) -> f32 {
    (p[0] * p[0] + p[1] * p[1]).sqrt()
}

impl Primitive {
    /// Signed distance; negative inside.
    fn sdf(&self, p: [f32; 2]) -> f32 {
        match *self {
            Primitive::Disk { c, r } => norm([p[0] - c[0], p[1] - c[1]]) - r,
            Primitive::Ring { c, r, t } => (norm([p[0] - c[0], p[1] - c[1]]) - r).abs() - t,
            Primitive::Bar { c, half_len, half_width, angle } => {
                let q = rotate([p[0] - c[0], p[1] - c[1]], -angle);
                let along = q[0].clamp(-half_len, half_len);
                norm([q[0] - along, q[1]]) - half_width
            }
            Primitive::BoxOutline { c, half, t, angle } => {
                let q = rotate([p[0] - c[0], p[1] - c[1]], -angle);
                let d = [q[0].abs() - half, q[1].abs() - half];
                let outside = norm([d[0].max(0.0), d[1].max(0.0)]);
                let inside = d[0].max(d[1]).min(0.0);
                (outside + inside).abs() - t
            }
        }
    }
}

fn glyph(family: ShapeFamily, class_id: usize) -> Vec<Primitive> {
    let mut rng = rng_for(GLYPH_SEED, "glyph", class_id as u64);
    let centre =
        |rng: &mut ChaCha8Rng, spread: f32| [rng.random_range(-spread..spread), rng.random_range(-spread..spread)];
    match family {
        ShapeFamily::Blobs => {
            let c = centre(&mut rng, 0.3);
            vec![Primitive::Disk { c, r: rng.random_range(0.2..0.55) }]
        }
        ShapeFamily::Glyphs => {
            let parts = rng.random_range(2..=3);
            (0..parts)
                .map(|_| {
                    let c = centre(&mut rng, 0.35);
                    let angle = rng.random_range(0.0..std::f32::consts::PI);
                    match rng.random_range(0..4) {
                        0 => Primitive::Disk { c, r: rng.random_range(0.12..0.28) },
                        1 => Primitive::Ring { c, r: rng.random_range(0.2..0.4), t: rng.random_range(0.04..0.08) },
                        2 => Primitive::Bar {
                            c,
                            half_len: rng.random_range(0.3..0.6),
                            half_width: rng.random_range(0.04..0.09),
                            angle,
                        },
                        _ => Primitive::BoxOutline {
                            c,
                            half: rng.random_range(0.18..0.35),
                            t: rng.random_range(0.04..0.07),
                            angle,
                        },
                    }
                })
                .collect()
        }
    }
}

fn render(parts: &[Primitive], style: &StyleParams, size: usize, rng: &mut ChaCha8Rng) -> Result<ImageTensor> {
    let scale: f32 = rng.random_range(0.85..1.15);
    let rot: f32 = rng.random_range(-0.35..0.35);
    let shift = [rng.random_range(-0.12..0.12), rng.random_range(-0.12..0.12)];
    let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let jitter = |c: [f32; 3], rng: &mut ChaCha8Rng| {
        c.map(|v| {
            let d = if style.palette_jitter > 0.0 {
                rng.random_range(-style.palette_jitter..=style.palette_jitter)
            } else {
                0.0
            };
            (v + d).clamp(0.0, 1.0)
        })
    };
    let fg = jitter(style.foreground, rng);
    let bg = jitter(style.background, rng);
    let noise = Normal::new(0.0f32, style.noise.max(0.0)).expect("finite noise");
    let (ta_s, ta_c) = style.texture_angle_deg.to_radians().sin_cos();
    let pixel = 2.0 / size as f32;

    let plane = size * size;
    let mut data = vec![0.0f32; 3 * plane];
    for py in 0..size {
        for px in 0..size {
            let u = [(px as f32 + 0.5) * pixel - 1.0, (py as f32 + 0.5) * pixel - 1.0];
            let q = rotate([u[0] - shift[0], u[1] - shift[1]], -rot);
            let q = [q[0] / scale, q[1] / scale];
            let d = parts.iter().map(|p| p.sdf(q)).fold(f32::INFINITY, f32::min) * scale;
            let coverage = (0.5 - d / pixel).clamp(0.0, 1.0);
            let wave = if style.texture_frequency > 0.0 {
                let t = (u[0] * ta_c + u[1] * ta_s) * 0.5;
                style.texture_amplitude * (std::f32::consts::TAU * style.texture_frequency * t + phase).sin()
            } else {
                0.0
            };
            for c in 0..3 {
                let back = bg[c] + wave * style.texture_color[c];
                let mut v = back * (1.0 - coverage) + fg[c] * coverage;
                if style.noise > 0.0 {
                    v += noise.sample(rng);
                }
                let v = v.clamp(0.0, 1.0).powf(style.gamma);
                data[c * plane + py * size + px] = v;
            }
        }
    }
    ImageTensor::from_clamped(3, size, size, data)
}

/// Renders a domain. Pure function of `spec`.
pub fn generate_synthetic_domain(spec: &SyntheticDomainSpec) -> Result<DomainDataset> {
    if spec.class_count < 2 {
        return Err(IssError::Validation(format!(
            "domain `{}` needs at least 2 classes, got {}",
            spec.name, spec.class_count
        )));
    }
    if spec.samples_per_class < 1 {
        return Err(IssError::Validation(format!("domain `{}` needs at least 1 sample per class", spec.name)));
    }
    if spec.image_size < 8 {
        return Err(IssError::Validation(format!("domain `{}`: image size {} below 8", spec.name, spec.image_size)));
    }
    spec.style.validate()?;

    let mut images = Vec::with_capacity(spec.class_count * spec.samples_per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for k in 0..spec.class_count {
        let class_id = spec.first_class + k;
        let parts = glyph(spec.shape_family, class_id);
        let mut rng = rng_for(spec.seed, &spec.name, class_id as u64);
        for _ in 0..spec.samples_per_class {
            let img = render(&parts, &spec.style, spec.image_size, &mut rng)?;
            let spread = (0..3).map(|c| std_of(img.channel(c))).fold(0.0, f64::max);
            if spread < 1e-2 {
                return Err(IssError::Validation(format!("style of domain `{}` renders constant images", spec.name)));
            }
            images.push(img);
            labels.push(class_id);
        }
    }
    let labels = spec.role.is_labeled().then_some(labels);
    DomainDataset::new(spec.name.clone(), spec.role, images, labels)
}

fn std_of(v: &[f32]) -> f64 {
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    (v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Per-channel pixel mean and standard deviation over a whole dataset.
pub fn channel_stats(ds: &DomainDataset) -> (Vec<f64>, Vec<f64>) {
    let channels = ds.image_shape()[0];
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0.0f64;
    for i in 0..ds.len() {
        let img = ds.image(i);
        for c in 0..channels {
            for &v in img.channel(c) {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
        count += (img.height() * img.width()) as f64;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let std = sq.iter().zip(&mean).map(|(s, m)| (s / count - m * m).max(0.0).sqrt()).collect();
    (mean, std)
}

/// Euclidean distance between concatenated per-channel (mean, std) vectors.
pub(crate) fn style_distance(a: &(Vec<f64>, Vec<f64>), b: &(Vec<f64>, Vec<f64>)) -> f64 {
    a.0.iter().chain(&a.1).zip(b.0.iter().chain(&b.1)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSpec {
    pub source: SyntheticDomainSpec,
    pub styles: Vec<SyntheticDomainSpec>,
    pub targets: Vec<SyntheticDomainSpec>,
    /// Minimum pairwise style distance between any two generated domains.
    pub style_margin: f64,
}

#[derive(Debug, Clone)]
pub struct SyntheticBenchmark {
    pub source: DomainDataset,
    pub styles: Vec<DomainDataset>,
    pub targets: Vec<DomainDataset>,
}

fn style(
    foreground: [f32; 3],
    background: [f32; 3],
    texture: ([f32; 3], f32, f32, f32),
    noise: f32,
    gamma: f32,
) -> StyleParams {
    StyleParams {
        foreground,
        background,
        texture_color: texture.0,
        texture_frequency: texture.1,
        texture_angle_deg: texture.2,
        texture_amplitude: texture.3,
        noise,
        gamma,
        palette_jitter: 0.05,
    }
}

impl BenchmarkSpec {
    /// The frozen desk-scale benchmark: one clean labeled source, three
    /// unlabeled style sources and two targets with unseen classes. The first
    /// target carries a style shift the style sources cover; the second is a
    /// milder shift.
    pub fn desk(image_size: usize, seed: u64) -> Self {
        let domain = |name: &str, role, first_class, class_count, samples, style| SyntheticDomainSpec {
            name: name.to_string(),
            role,
            class_count,
            first_class,
            samples_per_class: samples,
            image_size,
            shape_family: ShapeFamily::Glyphs,
            style,
            seed,
        };
        let none = ([0.0; 3], 0.0, 0.0, 0.0);
        BenchmarkSpec {
            source: domain(
                "source",
                DatasetRole::LabeledSource,
                0,
                8,
                24,
                style([0.95, 0.9, 0.8], [0.1, 0.12, 0.16], none, 0.02, 1.0),
            ),
            styles: vec![
                domain(
                    "style_inverted",
                    DatasetRole::UnlabeledSource,
                    300,
                    8,
                    12,
                    style([0.12, 0.2, 0.1], [0.75, 0.85, 0.7], none, 0.03, 1.0),
                ),
                domain(
                    "style_grating",
                    DatasetRole::UnlabeledSource,
                    400,
                    8,
                    12,
                    style([0.8, 0.55, 0.2], [0.35, 0.3, 0.45], ([1.0, 0.9, 0.8], 7.0, 35.0, 0.25), 0.03, 1.0),
                ),
                domain(
                    "style_noisy",
                    DatasetRole::UnlabeledSource,
                    500,
                    8,
                    12,
                    style([0.3, 0.45, 0.9], [0.55, 0.5, 0.35], none, 0.12, 0.8),
                ),
            ],
            targets: vec![
                domain(
                    "target_shifted",
                    DatasetRole::Target,
                    100,
                    10,
                    20,
                    style([0.2, 0.15, 0.35], [0.8, 0.7, 0.55], ([0.9, 0.8, 1.0], 6.0, 120.0, 0.2), 0.08, 1.0),
                ),
                domain(
                    "target_mild",
                    DatasetRole::Target,
                    200,
                    10,
                    20,
                    style([0.85, 0.95, 0.7], [0.2, 0.1, 0.1], none, 0.04, 1.1),
                ),
            ],
            style_margin: 0.1,
        }
    }
}

/// Generates every domain and checks the benchmark's structural guarantees:
/// target label spaces are disjoint from the source's, and all domains are at
/// least `style_margin` apart in channel statistics.
pub fn generate_benchmark(spec: &BenchmarkSpec) -> Result<SyntheticBenchmark> {
    if spec.source.role != DatasetRole::LabeledSource {
        return Err(IssError::Validation("benchmark source must be labeled_source".into()));
    }
    if spec.styles.iter().any(|s| s.role != DatasetRole::UnlabeledSource) {
        return Err(IssError::Validation("benchmark styles must be unlabeled_source".into()));
    }
    if spec.targets.iter().any(|s| s.role != DatasetRole::Target) {
        return Err(IssError::Validation("benchmark targets must have role target".into()));
    }
    let source = generate_synthetic_domain(&spec.source)?;
    let styles = spec.styles.iter().map(generate_synthetic_domain).collect::<Result<Vec<_>>>()?;
    let targets = spec.targets.iter().map(generate_synthetic_domain).collect::<Result<Vec<_>>>()?;

    let source_labels: BTreeSet<usize> = source.label_space().into_iter().collect();
    for t in &targets {
        if let Some(shared) = t.label_space().into_iter().find(|y| source_labels.contains(y)) {
            return Err(IssError::Validation(format!(
                "target `{}` shares class {shared} with the labeled source",
                t.name()
            )));
        }
    }

    let all: Vec<&DomainDataset> = std::iter::once(&source).chain(&styles).chain(&targets).collect();
    let stats: Vec<_> = all.iter().map(|d| channel_stats(d)).collect();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            let d = style_distance(&stats[i], &stats[j]);
            if d < spec.style_margin {
                return Err(IssError::Validation(format!(
                    "domains `{}` and `{}` differ by style distance {d:.4} < margin {}",
                    all[i].name(),
                    all[j].name(),
                    spec.style_margin
                )));
            }
        }
    }
    Ok(SyntheticBenchmark { source, styles, targets })
}
