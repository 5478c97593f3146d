use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffmath::Tensor;
use crate::error::{Error, Result};

/// Domain tag of a stream instance. `Clean` is the source domain.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Clean,
    Fog,
    Night,
    Rain,
    Snow,
}

impl Domain {
    pub const TARGETS: [Domain; 4] = [Domain::Fog, Domain::Night, Domain::Rain, Domain::Snow];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Clean => "clean",
            Domain::Fog => "fog",
            Domain::Night => "night",
            Domain::Rain => "rain",
            Domain::Snow => "snow",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "clean" => Ok(Domain::Clean),
            "fog" => Ok(Domain::Fog),
            "night" => Ok(Domain::Night),
            "rain" => Ok(Domain::Rain),
            "snow" => Ok(Domain::Snow),
            other => Err(Error::InvalidArgument(format!(
                "unknown corruption kind '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorruptionSpec {
    pub kind: Domain,
    pub severity: f64,
    pub seed: u64,
}

/// Streak and speckle counts drawn for one corruption, for inspection.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CorruptionTrace {
    pub streaks: usize,
    pub speckles: usize,
    pub blur_passes: usize,
}

const STREAK_DENSITY: f64 = 24.0;
const STREAK_VALUE: f64 = 0.85;
const STREAK_ALPHA: f64 = 0.6;

pub fn apply_corruption(image: &Tensor, spec: &CorruptionSpec) -> Result<Tensor> {
    corrupt_traced(image, spec).map(|(t, _)| t)
}

pub fn corrupt_traced(image: &Tensor, spec: &CorruptionSpec) -> Result<(Tensor, CorruptionTrace)> {
    let s = spec.severity;
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::InvalidArgument(format!(
            "severity {s} outside [0, 1]"
        )));
    }
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape(
            "apply_corruption",
            format!("expected [C,H,W], got {:?}", image.shape()),
        ));
    };
    let mut x = image.data().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut trace = CorruptionTrace::default();
    match spec.kind {
        Domain::Clean => {}
        Domain::Fog => {
            for v in &mut x {
                *v = (1.0 - 0.6 * s) * *v + 0.6 * s;
            }
        }
        Domain::Night => {
            let scale = 1.0 - 0.8 * s;
            let sigma = 0.05 * s;
            let noise =
                Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            for v in &mut x {
                *v *= scale;
                if sigma > 0.0 {
                    *v += noise.sample(&mut rng);
                }
            }
        }
        Domain::Rain => {
            trace.streaks = (STREAK_DENSITY * s).round() as usize;
            for _ in 0..trace.streaks {
                let len = rng.random_range(4..=9usize);
                let x0 = rng.random_range(0..w) as i64;
                let y0 = rng.random_range(0..h) as i64;
                for k in 0..len as i64 {
                    // one pixel left every third row
                    let (px, py) = (x0 - k / 3, y0 + k);
                    if px < 0 || py >= h as i64 {
                        break;
                    }
                    for ch in 0..c {
                        let i = (ch * h + py as usize) * w + px as usize;
                        x[i] = (1.0 - STREAK_ALPHA) * x[i] + STREAK_ALPHA * STREAK_VALUE;
                    }
                }
            }
            trace.blur_passes = (3.0 * s).ceil() as usize;
            for _ in 0..trace.blur_passes {
                x = box_blur(&x, c, h, w);
            }
        }
        Domain::Snow => {
            let contrast = 1.0 - 0.5 * s;
            for ch in 0..c {
                let plane = &mut x[ch * h * w..(ch + 1) * h * w];
                let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                for v in plane.iter_mut() {
                    *v = mean + contrast * (*v - mean);
                }
            }
            let density = 0.1 * s;
            for i in 0..h * w {
                if rng.random::<f64>() < density {
                    trace.speckles += 1;
                    for ch in 0..c {
                        x[ch * h * w + i] = 1.0;
                    }
                }
            }
        }
    }
    for v in &mut x {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((Tensor::new(image.shape(), x)?, trace))
}

/// 3x3 mean filter with edge replication.
fn box_blur(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                    for dx in -1i64..=1 {
                        let xs = (xx as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += x[base + yy * w + xs];
                    }
                }
                out[base + y * w + xx] = acc / 9.0;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::streams::scene::{generate_scene, SceneConfig};
    use proptest::prelude::*;

    fn image() -> Tensor {
        generate_scene(11, &SceneConfig::for_model(&ModelConfig::default()))
            .unwrap()
            .image
    }

    fn spec(kind: Domain, severity: f64) -> CorruptionSpec {
        CorruptionSpec {
            kind,
            severity,
            seed: 4,
        }
    }

    #[test]
    fn zero_severity_is_identity() {
        let img = image();
        for kind in [Domain::Fog, Domain::Night] {
            let out = apply_corruption(&img, &spec(kind, 0.0)).unwrap();
            assert_eq!(out.to_le_bytes(), img.to_le_bytes(), "{kind}");
        }
        for kind in [Domain::Rain, Domain::Snow] {
            let (_, tr) = corrupt_traced(&img, &spec(kind, 0.0)).unwrap();
            assert_eq!((tr.streaks, tr.speckles), (0, 0));
        }
    }

    #[test]
    fn full_fog_on_mid_gray() {
        let img = Tensor::full(&[3, 2, 2], 0.5);
        let out = apply_corruption(&img, &spec(Domain::Fog, 1.0)).unwrap();
        assert!(out.data().iter().all(|v| (*v - 0.8).abs() < 1e-15));
    }

    #[test]
    fn night_darkens_without_noise_mean_shift() {
        let img = Tensor::full(&[3, 32, 32], 0.5);
        let out = apply_corruption(&img, &spec(Domain::Night, 1.0)).unwrap();
        let mean = out.data().iter().sum::<f64>() / out.numel() as f64;
        assert!((mean - 0.1).abs() < 0.01, "{mean}");
    }

    #[test]
    fn rain_blurs_ceil_three_s_times() {
        let (_, tr) = corrupt_traced(&image(), &spec(Domain::Rain, 0.8)).unwrap();
        assert_eq!(tr.blur_passes, 3);
        assert_eq!(tr.streaks, 19);
    }

    #[test]
    fn deterministic_and_in_range() {
        let img = image();
        for kind in Domain::TARGETS {
            let a = apply_corruption(&img, &spec(kind, 0.8)).unwrap();
            let b = apply_corruption(&img, &spec(kind, 0.8)).unwrap();
            assert_eq!(a.to_le_bytes(), b.to_le_bytes());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_ne!(a, img);
        }
    }

    #[test]
    fn rejects_bad_severity_and_kind() {
        assert!(apply_corruption(&image(), &spec(Domain::Fog, 1.5)).is_err());
        assert!("hail".parse::<Domain>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn output_stays_in_pixel_range(kind in 0usize..5, severity in 0.0f64..=1.0, seed: u64) {
            let kinds = [Domain::Clean, Domain::Fog, Domain::Night, Domain::Rain, Domain::Snow];
            let spec = CorruptionSpec { kind: kinds[kind], severity, seed };
            let out = apply_corruption(&image(), &spec).unwrap();
            prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
