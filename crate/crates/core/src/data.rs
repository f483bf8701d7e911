//! Procedural image datasets and per-channel normalization.
//!
//! Images are small renderings of one colored primitive over a noisy
//! background. Every image draws the same latent factors (shape, position,
//! scale, hue, orientation, background), so an unlabeled source set and the
//! two labeled target tasks share structure while labelling different
//! factors: task A labels the shape, task B the orientation of a bar.

use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bundle::{load_bundle, read_manifest, save_bundle, save_bundle_with_meta};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageShape {
    pub fn square(channels: usize, size: usize) -> Self {
        Self {
            channels,
            height: size,
            width: size,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Per-channel affine normalization `(x - mean) / std` on CHW rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub shape: ImageShape,
}

impl Normalization {
    pub fn identity(shape: ImageShape) -> Self {
        Self {
            mean: vec![0.0; shape.channels],
            std: vec![1.0; shape.channels],
            shape,
        }
    }

    /// Channel statistics of raw rows (population standard deviation).
    pub fn fit<T: Real>(x: &Tensor<T>, shape: ImageShape) -> Result<Self> {
        let (n, d) = x.dims2()?;
        if d != shape.len() || n == 0 {
            return Err(Error::Dimension {
                op: "normalization_fit",
                lhs: vec![n, d],
                rhs: vec![n.max(1), shape.len()],
            });
        }
        let plane = shape.plane();
        let count = (n * plane) as f64;
        let mut mean = vec![0.0; shape.channels];
        let mut sq = vec![0.0; shape.channels];
        for row in x.data().chunks(d) {
            for c in 0..shape.channels {
                for &v in &row[c * plane..(c + 1) * plane] {
                    let v = v.to_f64();
                    mean[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, &s)| {
                *m /= count;
                (s / count - *m * *m).max(1e-12).sqrt()
            })
            .collect();
        Ok(Self { mean, std, shape })
    }

    fn check<T: Real>(&self, x: &Tensor<T>) -> Result<usize> {
        let (_, d) = x.dims2()?;
        if d != self.shape.len() || self.mean.len() != self.shape.channels || self.std.len() != self.shape.channels {
            return Err(Error::Dimension {
                op: "normalize",
                lhs: x.shape().to_vec(),
                rhs: vec![x.rows(), self.shape.len()],
            });
        }
        Ok(d)
    }

    pub fn apply<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.check(x)?;
        let plane = self.shape.plane();
        Ok(Tensor::from_fn(x.shape().to_vec(), |i| {
            let c = (i % d) / plane;
            T::from_f64((x.data()[i].to_f64() - self.mean[c]) / self.std[c])
        }))
    }

    pub fn invert<T: Real>(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.check(x)?;
        let plane = self.shape.plane();
        Ok(Tensor::from_fn(x.shape().to_vec(), |i| {
            let c = (i % d) / plane;
            T::from_f64(x.data()[i].to_f64() * self.std[c] + self.mean[c])
        }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

impl Primitive {
    pub const ALL: [Primitive; 6] = [
        Primitive::Disk,
        Primitive::Square,
        Primitive::Triangle,
        Primitive::Cross,
        Primitive::Ring,
        Primitive::Bar,
    ];

    /// Membership in local coordinates where the shape spans roughly `[-1, 1]²`.
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Primitive::Disk => r2 <= 0.85,
            Primitive::Square => u.abs() <= 0.75 && v.abs() <= 0.75,
            Primitive::Triangle => {
                // Apex up, base at v = -0.6.
                v >= -0.6 && v <= 1.0 && u.abs() <= (1.0 - v) * 0.62
            }
            Primitive::Cross => (u.abs() <= 0.28 && v.abs() <= 1.0) || (v.abs() <= 0.28 && u.abs() <= 1.0),
            Primitive::Ring => (0.4..=1.0).contains(&r2),
            Primitive::Bar => u.abs() <= 1.0 && v.abs() <= 0.24,
        }
    }
}

/// Latent factors of one rendered image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Factors {
    pub shape: Primitive,
    pub cx: f64,
    pub cy: f64,
    pub scale: f64,
    pub hue: f64,
    pub angle: f64,
    pub background: [f64; 3],
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor() as i32;
    let f = h6 - i as f64;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Renders CHW pixels in `[0, 1]`. Each pixel averages a 2×2 supersample.
pub fn render(f: &Factors, shape: ImageShape, rng: &mut RngState, noise: f64) -> Vec<f64> {
    let (h, w) = (shape.height, shape.width);
    let color = hsv_to_rgb(f.hue, 0.85, 0.95);
    let (sin, cos) = f.angle.sin_cos();
    let mut out = vec![0.0; shape.len()];
    for y in 0..h {
        for x in 0..w {
            let mut cover = 0.0;
            for (sy, sx) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                let px = (x as f64 + sx) / w as f64 - f.cx;
                let py = (y as f64 + sy) / h as f64 - f.cy;
                let u = (cos * px + sin * py) / f.scale;
                let v = (-sin * px + cos * py) / f.scale;
                if f.shape.contains(u, -v) {
                    cover += 0.25;
                }
            }
            for c in 0..shape.channels {
                let fg = color[c % 3];
                let bg = f.background[c % 3];
                let val = cover * fg + (1.0 - cover) * bg + noise * rng.normal();
                out[c * h * w + y * w + x] = val.clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Parameters of the procedural source set and the two labeled target tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSourceSpec {
    pub source_count: usize,
    pub target_train_count: usize,
    pub target_test_count: usize,
    pub image_size: usize,
    pub channels: usize,
    /// How many nuisance factors vary, in the order position, scale, hue,
    /// background (0..=4). Shape and orientation always vary.
    pub latent_factors: usize,
    pub classes_a: usize,
    pub classes_b: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSourceSpec {
    fn default() -> Self {
        Self {
            source_count: 2048,
            target_train_count: 50,
            target_test_count: 600,
            image_size: 16,
            channels: 3,
            latent_factors: 1,
            classes_a: 4,
            classes_b: 8,
            noise: 0.04,
            seed: 0,
        }
    }
}

impl SyntheticSourceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_power_of_two() {
            return Err(Error::config(format!(
                "image size must be a power of two >= 8, got {}",
                self.image_size
            )));
        }
        if self.source_count == 0 || self.target_train_count == 0 || self.target_test_count == 0 {
            return Err(Error::config("sample counts must be positive"));
        }
        if !(self.channels == 1 || self.channels == 3) {
            return Err(Error::config("channels must be 1 or 3"));
        }
        if self.latent_factors > 4 {
            return Err(Error::config("at most 4 nuisance factors"));
        }
        if self.classes_a < 2 || self.classes_a > 5 {
            return Err(Error::config("task A needs 2..=5 classes (one per non-bar primitive)"));
        }
        if self.classes_b < 2 {
            return Err(Error::config("task B needs at least 2 classes"));
        }
        if self.target_train_count < self.classes_a.max(self.classes_b)
            || self.target_test_count < self.classes_a.max(self.classes_b)
        {
            return Err(Error::config("each target split needs at least one sample per class"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::config("noise must be non-negative"));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> ImageShape {
        ImageShape::square(self.channels, self.image_size)
    }

    fn nuisance(&self, rng: &mut RngState, shape: Primitive, angle: f64) -> Factors {
        let k = self.latent_factors;
        let (cx, cy) = if k >= 1 {
            (0.35 + 0.3 * rng.uniform(), 0.35 + 0.3 * rng.uniform())
        } else {
            (0.5, 0.5)
        };
        let scale = if k >= 2 { 0.22 + 0.12 * rng.uniform() } else { 0.3 };
        let hue = if k >= 3 { rng.uniform() } else { 0.0 };
        let background = if k >= 4 {
            let base = 0.1 + 0.15 * rng.uniform();
            [0, 1, 2].map(|_| base + 0.05 * rng.uniform())
        } else {
            [0.15; 3]
        };
        Factors {
            shape,
            cx,
            cy,
            scale,
            hue,
            angle,
            background,
        }
    }
}

/// Raw `[0, 1]` images with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSplit {
    pub x: Tensor<f32>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetTask {
    pub classes: usize,
    pub train: LabeledSplit,
    pub test: LabeledSplit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSuite {
    pub spec: SyntheticSourceSpec,
    pub source: Tensor<f32>,
    pub normalization: Normalization,
    pub task_a: TargetTask,
    pub task_b: TargetTask,
}

/// Balanced labels `i mod classes` in a random order.
fn balanced_labels(rng: &mut RngState, n: usize, classes: usize) -> Vec<usize> {
    let order = rng.permutation(n);
    order.into_iter().map(|i| i % classes).collect()
}

fn render_rows(spec: &SyntheticSourceSpec, rng: &mut RngState, factors: &[Factors]) -> Result<Tensor<f32>> {
    let shape = spec.image_shape();
    let mut data = Vec::with_capacity(factors.len() * shape.len());
    for f in factors {
        data.extend(render(f, shape, rng, spec.noise).into_iter().map(|v| v as f32));
    }
    Tensor::new(vec![factors.len(), shape.len()], data)
}

fn task_a_split(spec: &SyntheticSourceSpec, rng: &mut RngState, n: usize) -> Result<LabeledSplit> {
    let labels = balanced_labels(rng, n, spec.classes_a);
    let factors: Vec<Factors> = labels
        .iter()
        .map(|&l| {
            let angle = rng.uniform() * 2.0 * PI;
            spec.nuisance(rng, Primitive::ALL[l], angle)
        })
        .collect();
    Ok(LabeledSplit {
        x: render_rows(spec, rng, &factors)?,
        labels,
    })
}

/// Orientation bins of width `π / classes`; angles are drawn from the
/// central 60% of a bin so neighbouring classes are separated.
fn task_b_split(spec: &SyntheticSourceSpec, rng: &mut RngState, n: usize) -> Result<LabeledSplit> {
    let labels = balanced_labels(rng, n, spec.classes_b);
    let bin = PI / spec.classes_b as f64;
    let factors: Vec<Factors> = labels
        .iter()
        .map(|&l| {
            let angle = (l as f64 + 0.2 + 0.6 * rng.uniform()) * bin;
            spec.nuisance(rng, Primitive::Bar, angle)
        })
        .collect();
    Ok(LabeledSplit {
        x: render_rows(spec, rng, &factors)?,
        labels,
    })
}

/// Renders the unlabeled source set and both target tasks.
pub fn gen_data(spec: &SyntheticSourceSpec) -> Result<SyntheticSuite> {
    spec.validate()?;
    let root = RngState::new(spec.seed);
    let mut rng = root.derive(1);
    let factors: Vec<Factors> = (0..spec.source_count)
        .map(|_| {
            let shape = Primitive::ALL[rng.index(Primitive::ALL.len())];
            let angle = rng.uniform() * 2.0 * PI;
            spec.nuisance(&mut rng, shape, angle)
        })
        .collect();
    let source = render_rows(spec, &mut rng, &factors)?;
    let normalization = Normalization::fit(&source, spec.image_shape())?;

    let mut ra = root.derive(2);
    let task_a = TargetTask {
        classes: spec.classes_a,
        train: task_a_split(spec, &mut ra, spec.target_train_count)?,
        test: task_a_split(spec, &mut ra, spec.target_test_count)?,
    };
    let mut rb = root.derive(3);
    let task_b = TargetTask {
        classes: spec.classes_b,
        train: task_b_split(spec, &mut rb, spec.target_train_count)?,
        test: task_b_split(spec, &mut rb, spec.target_test_count)?,
    };
    Ok(SyntheticSuite {
        spec: spec.clone(),
        source,
        normalization,
        task_a,
        task_b,
    })
}

pub fn labels_to_tensor(labels: &[usize]) -> Tensor<f64> {
    Tensor::from_fn([labels.len()], |i| labels[i] as f64)
}

pub fn tensor_to_labels(t: &Tensor<f64>) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v < usize::MAX as f64 {
                Ok(v as usize)
            } else {
                Err(Error::format("labels", format!("label {v} is not a non-negative integer")))
            }
        })
        .collect()
}

/// Metadata stored in the source bundle manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMeta {
    pub normalization: Normalization,
    pub spec: SyntheticSourceSpec,
}

impl SyntheticSuite {
    /// Layout: `source/`, `task_a/{train_x,train_y,test_x,test_y}/`, `task_b/...`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let meta = SourceMeta {
            normalization: self.normalization.clone(),
            spec: self.spec.clone(),
        };
        let meta = serde_json::to_value(&meta).map_err(|e| Error::json(dir, e))?;
        save_bundle_with_meta(&self.source, &dir.join("source"), "source", Some(meta))?;
        for (name, task) in [("task_a", &self.task_a), ("task_b", &self.task_b)] {
            save_task(task, &dir.join(name))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (source, meta) = load_source(&dir.join("source"))?;
        Ok(Self {
            source,
            normalization: meta.normalization,
            task_a: load_task(&dir.join("task_a"), meta.spec.classes_a)?,
            task_b: load_task(&dir.join("task_b"), meta.spec.classes_b)?,
            spec: meta.spec,
        })
    }
}

pub fn save_task(task: &TargetTask, dir: &Path) -> Result<()> {
    save_bundle(&task.train.x, &dir.join("train_x"), "train_x")?;
    save_bundle(&labels_to_tensor(&task.train.labels), &dir.join("train_y"), "train_y")?;
    save_bundle(&task.test.x, &dir.join("test_x"), "test_x")?;
    save_bundle(&labels_to_tensor(&task.test.labels), &dir.join("test_y"), "test_y")
}

pub fn load_task(dir: &Path, classes: usize) -> Result<TargetTask> {
    let split = |x: &str, y: &str| -> Result<LabeledSplit> {
        let split = LabeledSplit {
            x: load_bundle(&dir.join(x))?,
            labels: tensor_to_labels(&load_bundle(&dir.join(y))?)?,
        };
        if split.x.rows() != split.labels.len() {
            return Err(Error::format("labels", "label count differs from image count"));
        }
        if let Some(&bad) = split.labels.iter().find(|&&l| l >= classes) {
            return Err(Error::format("labels", format!("label {bad} outside {classes} classes")));
        }
        Ok(split)
    };
    Ok(TargetTask {
        classes,
        train: split("train_x", "train_y")?,
        test: split("test_x", "test_y")?,
    })
}

/// Source pixels plus the metadata recorded at generation time.
pub fn load_source(dir: &Path) -> Result<(Tensor<f32>, SourceMeta)> {
    let manifest = read_manifest(dir)?;
    let meta = manifest
        .meta
        .ok_or_else(|| Error::format("meta", "source bundle lacks normalization metadata"))?;
    let meta: SourceMeta =
        serde_json::from_value(meta).map_err(|e| Error::format("meta", e.to_string()))?;
    Ok((load_bundle(dir)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSourceSpec {
        SyntheticSourceSpec {
            source_count: 64,
            target_train_count: 21,
            target_test_count: 10,
            ..SyntheticSourceSpec::default()
        }
    }

    #[test]
    fn deterministic_by_seed() {
        let a = gen_data(&tiny_spec()).unwrap();
        let b = gen_data(&tiny_spec()).unwrap();
        assert_eq!(a, b);
        let c = gen_data(&SyntheticSourceSpec {
            seed: 1,
            ..tiny_spec()
        })
        .unwrap();
        assert_ne!(a.source, c.source);
    }

    #[test]
    fn saved_bundles_are_byte_identical() {
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        gen_data(&tiny_spec()).unwrap().save(d1.path()).unwrap();
        gen_data(&tiny_spec()).unwrap().save(d2.path()).unwrap();
        for rel in ["source/source.bin", "source/manifest.json", "task_b/test_y/test_y.bin"] {
            let a = std::fs::read(d1.path().join(rel)).unwrap();
            let b = std::fs::read(d2.path().join(rel)).unwrap();
            assert_eq!(a, b, "{rel}");
        }
        let back = SyntheticSuite::load(d1.path()).unwrap();
        assert_eq!(back, gen_data(&tiny_spec()).unwrap());
    }

    #[test]
    fn labels_are_balanced() {
        let s = gen_data(&tiny_spec()).unwrap();
        for task in [&s.task_a, &s.task_b] {
            for split in [&task.train, &task.test] {
                let mut counts = vec![0usize; task.classes];
                for &l in &split.labels {
                    counts[l] += 1;
                }
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "{counts:?}");
            }
        }
    }

    #[test]
    fn pixels_in_unit_range_and_normalization_inverts() {
        let s = gen_data(&tiny_spec()).unwrap();
        assert!(s.source.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let z = s.normalization.apply(&s.source).unwrap();
        let fit = Normalization::fit(&z, s.normalization.shape).unwrap();
        for c in 0..3 {
            assert!(fit.mean[c].abs() < 1e-5);
            assert!((fit.std[c] - 1.0).abs() < 1e-4);
        }
        let back = s.normalization.invert(&z).unwrap();
        assert!(back.max_abs_diff(&s.source).unwrap() < 1e-5);
    }

    #[test]
    fn invalid_specs_rejected() {
        for spec in [
            SyntheticSourceSpec {
                image_size: 12,
                ..tiny_spec()
            },
            SyntheticSourceSpec {
                source_count: 0,
                ..tiny_spec()
            },
            SyntheticSourceSpec {
                classes_a: 6,
                ..tiny_spec()
            },
        ] {
            assert!(matches!(gen_data(&spec), Err(Error::Config(_))));
        }
    }

    #[test]
    fn bar_orientation_is_visible() {
        // A horizontal and a vertical bar differ in row versus column mass.
        let shape = ImageShape::square(1, 16);
        let mut rng = RngState::new(0);
        let base = Factors {
            shape: Primitive::Bar,
            cx: 0.5,
            cy: 0.5,
            scale: 0.35,
            hue: 0.0,
            angle: 0.0,
            background: [0.0; 3],
        };
        let horiz = render(&base, shape, &mut rng, 0.0);
        let vert = render(&Factors { angle: PI / 2.0, ..base }, shape, &mut rng, 0.0);
        let row8: f64 = (0..16).map(|x| horiz[8 * 16 + x]).sum();
        let col8: f64 = (0..16).map(|y| vert[y * 16 + 8]).sum();
        let row8_vert: f64 = (0..16).map(|x| vert[8 * 16 + x]).sum();
        assert!(row8 > 2.0 * row8_vert);
        assert!((row8 - col8).abs() < 0.5);
    }
}
