use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::ctta::{AdaptConfig, Policy};
use crate::error::{Error, Result};
use crate::model::{Group, GroupSet, ModelConfig};
use crate::source_trainer::SourceConfig;
use crate::streams::{derive_seed, Domain, SceneConfig, StreamSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Hybrid,
    FtOnly,
    EtOnly,
    NoAdapt,
    /// Every mode above on the same stream, reported side by side.
    All,
}

impl Mode {
    pub const SINGLE: [Mode; 4] = [Mode::NoAdapt, Mode::Hybrid, Mode::FtOnly, Mode::EtOnly];

    pub fn policy(self) -> Option<Policy> {
        match self {
            Mode::Hybrid => Some(Policy::Hybrid),
            Mode::FtOnly => Some(Policy::AlwaysFt),
            Mode::EtOnly => Some(Policy::AlwaysEt),
            Mode::NoAdapt | Mode::All => None,
        }
    }

    /// Model forwards spent per instance.
    pub fn forwards_per_instance(self) -> usize {
        if self.policy().is_some() {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Hybrid => "hybrid",
            Mode::FtOnly => "ft-only",
            Mode::EtOnly => "et-only",
            Mode::NoAdapt => "no-adapt",
            Mode::All => "all",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Mode::Hybrid),
            "ft-only" => Ok(Mode::FtOnly),
            "et-only" => Ok(Mode::EtOnly),
            "no-adapt" => Ok(Mode::NoAdapt),
            "all" => Ok(Mode::All),
            other => Err(Error::InvalidArgument(format!("unknown mode '{other}'"))),
        }
    }
}

/// Everything one experiment needs, loaded from a flat `key=value` file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub alpha: f64,
    pub alpha_l: f64,
    pub lr_source: f64,
    pub lr_tta: f64,
    pub et_lr_scale: f64,
    pub et_groups: GroupSet,
    pub mode: Mode,
    pub domains: Vec<Domain>,
    pub per_domain: usize,
    pub rounds: usize,
    pub severity: f64,
    pub seed: u64,
    pub source_scenes: usize,
    pub epochs: usize,
    pub batch_size: usize,
    /// When false, wall-clock columns are written as 0 so outputs are byte-stable.
    pub record_timing: bool,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            alpha: 0.999,
            alpha_l: 0.9,
            lr_source: 1e-3,
            lr_tta: 1e-4,
            et_lr_scale: 1.0,
            et_groups: GroupSet::only(Group::Adapter),
            mode: Mode::Hybrid,
            domains: Domain::TARGETS.to_vec(),
            per_domain: 40,
            rounds: 3,
            severity: 0.8,
            seed: 0,
            source_scenes: 200,
            epochs: 30,
            batch_size: 8,
            record_timing: true,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value '{value}' for {key}")))
}

impl RunConfig {
    /// Applies one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if self.model.set(key, value)? {
            return Ok(());
        }
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "alpha_l" => self.alpha_l = parse(key, value)?,
            "lr_source" => self.lr_source = parse(key, value)?,
            "lr_tta" => self.lr_tta = parse(key, value)?,
            "et_lr_scale" => self.et_lr_scale = parse(key, value)?,
            "et_groups" => self.et_groups = value.parse()?,
            "mode" => self.mode = value.parse()?,
            "domains" => {
                self.domains = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(str::parse)
                    .collect::<Result<_>>()?
            }
            "per_domain" => self.per_domain = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "severity" => self.severity = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "source_scenes" => self.source_scenes = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "record_timing" => self.record_timing = parse(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::InvalidArgument(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key=value` lines over the defaults. `#` starts a comment.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| at(format!("expected key=value, got '{line}'")))?;
            cfg.set(k.trim(), v.trim()).map_err(|e| at(e.to_string()))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.adapt_config(Policy::Hybrid).validate()?;
        self.stream_spec().validate()?;
        if self.batch_size == 0 || self.source_scenes == 0 {
            return Err(Error::InvalidArgument(
                "batch_size and source_scenes must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let domains: Vec<_> = self.domains.iter().map(Domain::to_string).collect();
        let mut pairs = self.model.to_pairs();
        pairs.extend([
            ("alpha", self.alpha.to_string()),
            ("alpha_l", self.alpha_l.to_string()),
            ("lr_source", self.lr_source.to_string()),
            ("lr_tta", self.lr_tta.to_string()),
            ("et_lr_scale", self.et_lr_scale.to_string()),
            ("et_groups", self.et_groups.to_string()),
            ("mode", self.mode.to_string()),
            ("domains", domains.join(",")),
            ("per_domain", self.per_domain.to_string()),
            ("rounds", self.rounds.to_string()),
            ("severity", self.severity.to_string()),
            ("seed", self.seed.to_string()),
            ("source_scenes", self.source_scenes.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("record_timing", self.record_timing.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ]);
        pairs
    }

    pub fn to_kv_string(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Writes `config.txt` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("config.txt");
        fs::write(&path, self.to_kv_string()).map_err(|e| Error::io(&path, e))
    }

    pub fn source_config(&self) -> SourceConfig {
        SourceConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr_source,
            seed: self.seed,
        }
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig::for_model(&self.model)
    }

    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            domains: self.domains.clone(),
            per_domain: self.per_domain,
            rounds: self.rounds,
            severity: self.severity,
            seed: derive_seed(self.seed, 0x57AE),
            scene: self.scene_config(),
            task: self.model.task,
        }
    }

    pub fn adapt_config(&self, policy: Policy) -> AdaptConfig {
        AdaptConfig {
            alpha: self.alpha,
            alpha_l: self.alpha_l,
            lr: self.lr_tta,
            et_lr_scale: self.et_lr_scale,
            ft_groups: GroupSet::all(),
            et_groups: self.et_groups,
            mask_ratio: self.model.mask_ratio,
            mask_seed: derive_seed(self.seed, 0x3A5C),
            policy,
        }
    }
}
