use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Classification,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Segmentation => "segmentation",
            Task::Classification => "classification",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segmentation" => Ok(Task::Segmentation),
            "classification" => Ok(Task::Classification),
            other => Err(Error::InvalidArgument(format!("unknown task '{other}'"))),
        }
    }
}

/// Geometry and capacity of the vision transformer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub adapter_dim: usize,
    pub adapter_scale: f64,
    pub mask_ratio: f64,
    pub task: Task,
}

impl Default for ModelConfig {
    /// 32x32 images, 4x4 patches, width 64, 4 blocks. The adapter width puts
    /// the adapter group at roughly a tenth of all parameters.
    fn default() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            num_classes: 5,
            adapter_dim: 45,
            adapter_scale: 1.0,
            mask_ratio: 0.3,
            task: Task::Segmentation,
        }
    }
}

impl ModelConfig {
    /// 8x8 images, width 16, 2 blocks; used for gradient checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            embed_dim: 16,
            depth: 2,
            heads: 2,
            num_classes: 3,
            adapter_dim: 4,
            adapter_scale: 1.0,
            mask_ratio: 0.5,
            task: Task::Segmentation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidArgument(msg));
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return fail(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return fail(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.channels == 0 || self.depth == 0 {
            return fail("channels and depth must be positive".into());
        }
        if self.num_classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.adapter_dim == 0 {
            return fail("adapter_dim must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return fail(format!("mask_ratio {} outside [0, 1)", self.mask_ratio));
        }
        if !self.adapter_scale.is_finite() {
            return fail("adapter_scale must be finite".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per flattened patch: `channels * patch_size^2`.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    /// Number of labels the task head emits per image.
    pub fn label_count(&self) -> usize {
        match self.task {
            Task::Segmentation => self.num_patches(),
            Task::Classification => 1,
        }
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("image_size", self.image_size.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("channels", self.channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("adapter_dim", self.adapter_dim.to_string()),
            ("adapter_scale", self.adapter_scale.to_string()),
            ("mask_ratio", self.mask_ratio.to_string()),
            ("task", self.task.to_string()),
        ]
    }

    /// Flat `key=value` lines, one per field.
    pub fn to_kv_string(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Applies one key; returns `Ok(false)` if the key is not a model field.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value '{value}' for {key}")))
        }
        match key {
            "image_size" => self.image_size = num(key, value)?,
            "patch_size" => self.patch_size = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "embed_dim" => self.embed_dim = num(key, value)?,
            "depth" => self.depth = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "num_classes" => self.num_classes = num(key, value)?,
            "adapter_dim" => self.adapter_dim = num(key, value)?,
            "adapter_scale" => self.adapter_scale = num(key, value)?,
            "mask_ratio" => self.mask_ratio = num(key, value)?,
            "task" => self.task = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn from_kv_string(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: i + 1,
                msg: format!("expected key=value, got '{line}'"),
            })?;
            let known = cfg.set(k.trim(), v.trim()).map_err(|e| Error::Config {
                line: i + 1,
                msg: e.to_string(),
            })?;
            if !known {
                return Err(Error::Config {
                    line: i + 1,
                    msg: format!("unknown model key '{}'", k.trim()),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
