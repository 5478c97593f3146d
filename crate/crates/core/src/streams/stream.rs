use std::iter::FusedIterator;
use std::path::Path;

use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::Task;

use super::corruption::{apply_corruption, CorruptionSpec, Domain};
use super::scene::{generate_scene, Scene, SceneConfig};

/// splitmix64 mix of a seed and an index.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SOURCE_SALT: u64 = 0x5EED_50C3;
const CORRUPTION_SALT: u64 = 0xC0AA;

/// Clean labelled scenes for source training.
pub fn source_scenes(count: usize, seed: u64, cfg: &SceneConfig) -> Result<Vec<Scene>> {
    let base = derive_seed(seed, SOURCE_SALT);
    (0..count as u64)
        .map(|i| generate_scene(derive_seed(base, i), cfg))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub domains: Vec<Domain>,
    pub per_domain: usize,
    pub rounds: usize,
    pub severity: f64,
    pub seed: u64,
    pub scene: SceneConfig,
    pub task: Task,
}

impl StreamSpec {
    pub fn len(&self) -> usize {
        self.rounds * self.domains.len() * self.per_domain
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() || self.per_domain == 0 || self.rounds == 0 {
            return Err(Error::InvalidArgument(
                "stream needs at least one domain, per_domain >= 1 and rounds >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::InvalidArgument(format!(
                "severity {} outside [0, 1]",
                self.severity
            )));
        }
        self.scene.validate()
    }

    pub fn domain_at(&self, t: usize) -> Domain {
        self.domains[(t / self.per_domain) % self.domains.len()]
    }

    pub fn round_at(&self, t: usize) -> usize {
        t / (self.per_domain * self.domains.len())
    }

    pub fn scene_seed(&self, t: usize) -> u64 {
        derive_seed(self.seed, t as u64)
    }

    pub fn manifest(&self) -> Vec<ManifestRow> {
        (0..self.len())
            .map(|t| ManifestRow {
                t,
                domain: self.domain_at(t),
                round: self.round_at(t),
                scene_seed: self.scene_seed(t),
            })
            .collect()
    }

    pub fn instance(&self, t: usize) -> Result<StreamInstance> {
        let scene_seed = self.scene_seed(t);
        let scene = generate_scene(scene_seed, &self.scene)?;
        let domain = self.domain_at(t);
        let spec = CorruptionSpec {
            kind: domain,
            severity: self.severity,
            seed: derive_seed(scene_seed, CORRUPTION_SALT),
        };
        let image = apply_corruption(&scene.image, &spec)?;
        let ground_truth = scene.labels_for(self.task, self.scene.num_classes);
        Ok(StreamInstance {
            input: TargetInput { t, domain, image },
            round: self.round_at(t),
            scene_seed,
            ground_truth,
        })
    }
}

/// What the adaptation engine sees: no label field by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetInput {
    pub t: usize,
    /// Metadata for logging only.
    pub domain: Domain,
    pub image: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamInstance {
    input: TargetInput,
    round: usize,
    scene_seed: u64,
    ground_truth: Vec<usize>,
}

impl StreamInstance {
    pub fn t(&self) -> usize {
        self.input.t
    }

    pub fn domain(&self) -> Domain {
        self.input.domain
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn scene_seed(&self) -> u64 {
        self.scene_seed
    }

    pub fn input(&self) -> &TargetInput {
        &self.input
    }

    /// Evaluation labels; never pass these to the engine.
    pub fn ground_truth(&self) -> &[usize] {
        &self.ground_truth
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub t: usize,
    pub domain: Domain,
    pub round: usize,
    pub scene_seed: u64,
}

pub fn write_manifest(rows: &[ManifestRow], path: &Path) -> Result<()> {
    let csv_err = |e| Error::Csv {
        path: path.to_path_buf(),
        source: e,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["t", "domain", "round", "scene_seed"])
        .map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.t.to_string(),
            r.domain.to_string(),
            r.round.to_string(),
            r.scene_seed.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Single-pass stream: consumes instances in order and cannot be rewound.
#[derive(Debug)]
pub struct TargetStream {
    spec: StreamSpec,
    next: usize,
}

pub fn build_stream(spec: StreamSpec) -> Result<TargetStream> {
    spec.validate()?;
    Ok(TargetStream { spec, next: 0 })
}

impl TargetStream {
    pub fn spec(&self) -> &StreamSpec {
        &self.spec
    }
}

impl Iterator for TargetStream {
    type Item = Result<StreamInstance>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.spec.len() {
            return None;
        }
        let t = self.next;
        self.next += 1;
        Some(self.spec.instance(t))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.spec.len() - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for TargetStream {}
impl FusedIterator for TargetStream {}
