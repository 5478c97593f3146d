use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Task};

/// Geometry of generated scenes. Class 0 is background; every other class
/// owns one shape kind and one hue.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
}

impl SceneConfig {
    pub fn for_model(cfg: &ModelConfig) -> Self {
        SceneConfig {
            image_size: cfg.image_size,
            patch_size: cfg.patch_size,
            num_classes: cfg.num_classes,
            min_objects: 2,
            max_objects: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
            || self.image_size == 0
        {
            return Err(Error::InvalidArgument(format!(
                "scene size {} not a positive multiple of patch {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_classes < 2 || self.min_objects > self.max_objects {
            return Err(Error::InvalidArgument(
                "scene needs >= 2 classes and min_objects <= max_objects".into(),
            ));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
    Triangle,
    Diamond,
}

impl ShapeKind {
    fn for_class(class: usize) -> Self {
        match (class - 1) % 4 {
            0 => ShapeKind::Disk,
            1 => ShapeKind::Square,
            2 => ShapeKind::Triangle,
            _ => ShapeKind::Diamond,
        }
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
            ShapeKind::Triangle => {
                // apex up, base at dy = r
                dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0
            }
            ShapeKind::Diamond => dx.abs() + dy.abs() <= r,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub class: usize,
    pub kind: ShapeKind,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
}

/// Rendered scene with exact labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Tensor,
    /// Majority class per patch, row-major over the patch grid.
    pub labels: Vec<usize>,
    pub pixel_labels: Vec<usize>,
    pub seed: u64,
    pub layout: Vec<SceneObject>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Base colour of an object class.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    let h = (class - 1) as f64 / (num_classes - 1) as f64;
    hsv_to_rgb(h, 0.75, 0.85)
}

impl Scene {
    /// Class covering the most object pixels; background when there are none.
    pub fn class_label(&self, num_classes: usize) -> usize {
        let mut counts = vec![0usize; num_classes];
        for &c in &self.pixel_labels {
            counts[c] += 1;
        }
        let mut best = 0;
        for c in 1..num_classes {
            if counts[c] > 0 && (best == 0 || counts[c] > counts[best]) {
                best = c;
            }
        }
        best
    }

    pub fn labels_for(&self, task: Task, num_classes: usize) -> Vec<usize> {
        match task {
            Task::Segmentation => self.labels.clone(),
            Task::Classification => vec![self.class_label(num_classes)],
        }
    }
}

/// Majority class per patch; ties go to the lower class.
pub fn patch_majority(pixel_labels: &[usize], cfg: &SceneConfig) -> Vec<usize> {
    let (s, p, g) = (cfg.image_size, cfg.patch_size, cfg.grid());
    let mut out = Vec::with_capacity(g * g);
    for gy in 0..g {
        for gx in 0..g {
            let mut counts = vec![0usize; cfg.num_classes];
            for y in gy * p..(gy + 1) * p {
                for x in gx * p..(gx + 1) * p {
                    counts[pixel_labels[y * s + x]] += 1;
                }
            }
            let mut best = 0;
            for c in 1..cfg.num_classes {
                if counts[c] > counts[best] {
                    best = c;
                }
            }
            out.push(best);
        }
    }
    out
}

/// Textured background plus 2-5 shapes of distinct classes (capped by the
/// number of object classes), drawn in order so later shapes occlude earlier ones.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = cfg.image_size;
    let sf = s as f64;

    let base: f64 = rng.random_range(0.35..0.55);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.05..0.05));
    let (gx, gy): (f64, f64) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let mut image = vec![0.0; 3 * s * s];
    for y in 0..s {
        for x in 0..s {
            let ramp = gx * (x as f64 / sf - 0.5) + gy * (y as f64 / sf - 0.5);
            let grain: f64 = rng.random_range(-0.04..0.04);
            for c in 0..3 {
                image[(c * s + y) * s + x] = base + tint[c] + ramp + grain;
            }
        }
    }

    let object_classes = cfg.num_classes - 1;
    let lo = cfg.min_objects.min(object_classes);
    let hi = cfg.max_objects.min(object_classes);
    let count = if hi == 0 {
        0
    } else {
        rng.random_range(lo..=hi)
    };
    let classes = index::sample(&mut rng, object_classes, count);

    let mut pixel_labels = vec![0usize; s * s];
    let mut layout = Vec::with_capacity(count);
    for class in classes.into_iter().map(|c| c + 1) {
        let size = rng.random_range(0.12 * sf..0.22 * sf);
        let cx = rng.random_range(size * 0.5..sf - size * 0.5);
        let cy = rng.random_range(size * 0.5..sf - size * 0.5);
        let kind = ShapeKind::for_class(class);
        let color = class_color(class, cfg.num_classes);
        let jitter: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.06..0.06));
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
                if !kind.contains(dx, dy, size) {
                    continue;
                }
                pixel_labels[y * s + x] = class;
                let grain: f64 = rng.random_range(-0.03..0.03);
                for c in 0..3 {
                    image[(c * s + y) * s + x] = color[c] + jitter[c] + grain;
                }
            }
        }
        layout.push(SceneObject {
            class,
            kind,
            cx,
            cy,
            size,
        });
    }

    image.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let labels = patch_majority(&pixel_labels, cfg);
    Ok(Scene {
        image: Tensor::new(&[3, s, s], image)?,
        labels,
        pixel_labels,
        seed,
        layout,
    })
}
