//! Online adaptation: EMA teacher, pseudo-labels, loss-threshold dispatch
//! between full and adapter-only updates, and the per-instance step.

mod ddsd;
mod teacher;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

pub use ddsd::{ddsd_decide, update_threshold, Ddsd, Decision};
pub use teacher::{ema_update, pseudo_label, teacher_from, teacher_groups};

use crate::diffmath::{Optimizer, Tape};
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Group, GroupSet, Model, ParamStore, PatchMask};
use crate::source_trainer::{multitask_loss, Checkpoint, Losses};
use crate::streams::{Domain, TargetInput};

/// How the per-instance decision is made. The fixed policies replace only the
/// decision; every other step is shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Policy {
    Hybrid,
    AlwaysFt,
    AlwaysEt,
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Policy::Hybrid => "hybrid",
            Policy::AlwaysFt => "ft-only",
            Policy::AlwaysEt => "et-only",
        })
    }
}

impl FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Policy::Hybrid),
            "ft-only" => Ok(Policy::AlwaysFt),
            "et-only" => Ok(Policy::AlwaysEt),
            other => Err(Error::InvalidArgument(format!(
                "unknown adaptation policy '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub alpha_l: f64,
    pub lr: f64,
    /// Multiplier on `lr` for adapter-only steps.
    pub et_lr_scale: f64,
    pub ft_groups: GroupSet,
    pub et_groups: GroupSet,
    pub mask_ratio: f64,
    pub mask_seed: u64,
    pub policy: Policy,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: 0.999,
            alpha_l: 0.9,
            lr: 1e-4,
            et_lr_scale: 1.0,
            ft_groups: GroupSet::all(),
            et_groups: GroupSet::only(Group::Adapter),
            mask_ratio: 0.3,
            mask_seed: 0,
            policy: Policy::Hybrid,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("alpha_l", self.alpha_l),
            ("mask_ratio", self.mask_ratio),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!(
                    "{name} = {v} outside [0, 1]"
                )));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(self.et_lr_scale >= 0.0 && self.et_lr_scale.is_finite())
        {
            return Err(Error::InvalidArgument(
                "learning rates must be finite and >= 0".into(),
            ));
        }
        if self.ft_groups.is_empty() || self.et_groups.is_empty() {
            return Err(Error::InvalidArgument(
                "FT and ET group filters must be non-empty".into(),
            ));
        }
        Ok(())
    }
}

/// Outcome of one target instance.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub t: usize,
    pub domain: Domain,
    /// `None` when the instance was quarantined for a non-finite value.
    pub decision: Option<Decision>,
    pub loss_seg: f64,
    pub loss_rec: f64,
    pub tau_before: f64,
    pub tau_after: f64,
    pub wall_ms: f64,
    /// Teacher argmax on the unmasked image; this is the evaluated prediction.
    pub prediction: Vec<usize>,
    /// Student argmax on the masked image, for diagnostics.
    pub student_prediction: Vec<usize>,
}

impl StepReport {
    pub fn quarantined(&self) -> bool {
        self.decision.is_none()
    }
}

#[derive(Clone, Debug)]
pub struct AdaptationState {
    model: Model,
    pub student: ParamStore,
    pub teacher: ParamStore,
    pub tau: f64,
    pub t: usize,
    pub ft_count: usize,
    pub et_count: usize,
    pub forward_count: usize,
    pub skipped: usize,
    pub optimizer: Optimizer,
    cfg: AdaptConfig,
}

pub fn init_adaptation(
    checkpoint: &Checkpoint,
    alpha: f64,
    alpha_l: f64,
) -> Result<AdaptationState> {
    let cfg = AdaptConfig {
        alpha,
        alpha_l,
        mask_ratio: checkpoint.config.mask_ratio,
        ..AdaptConfig::default()
    };
    AdaptationState::new(checkpoint, cfg)
}

impl AdaptationState {
    pub fn new(checkpoint: &Checkpoint, cfg: AdaptConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(checkpoint.config.clone())?;
        let expected = model.init_params(0);
        let mut missing = expected.missing_from(&checkpoint.params);
        missing.extend(
            expected
                .iter()
                .filter(|(n, p)| {
                    checkpoint
                        .params
                        .get(n)
                        .is_some_and(|t| t.shape() != p.tensor.shape())
                })
                .map(|(n, _)| format!("{n} (shape)")),
        );
        if !missing.is_empty() {
            return Err(Error::MissingParams(missing));
        }
        let mut student = checkpoint.params.clone();
        student.set_requires_grad(true);
        student.zero_grad();
        let teacher = teacher_from(&student);
        Ok(AdaptationState {
            model,
            student,
            teacher,
            tau: 0.0,
            t: 0,
            ft_count: 0,
            et_count: 0,
            forward_count: 0,
            skipped: 0,
            optimizer: Optimizer::adam(),
            cfg,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn config(&self) -> &AdaptConfig {
        &self.cfg
    }

    pub fn alpha(&self) -> f64 {
        self.cfg.alpha
    }

    pub fn alpha_l(&self) -> f64 {
        self.cfg.alpha_l
    }

    /// Teacher pseudo-labels on the unmasked image (one forward).
    pub fn pseudo_label(&mut self, input: &TargetInput) -> Result<Vec<usize>> {
        self.forward_count += 1;
        Ok(pseudo_label(&self.model, &self.teacher, &input.image)?.1)
    }

    /// Frozen prediction without any update (one forward).
    pub fn predict_frozen(&mut self, input: &TargetInput) -> Result<Vec<usize>> {
        self.pseudo_label(input)
    }

    fn decide(&self, loss_seg: f64) -> Result<Decision> {
        match self.cfg.policy {
            Policy::Hybrid => ddsd_decide(loss_seg, self.tau),
            Policy::AlwaysFt => Ok(Decision::Ft),
            Policy::AlwaysEt => Ok(Decision::Et),
        }
    }

    fn quarantine(
        &mut self,
        input: &TargetInput,
        losses: Option<Losses>,
        start: Instant,
    ) -> StepReport {
        self.skipped += 1;
        self.student.zero_grad();
        StepReport {
            t: input.t,
            domain: input.domain,
            decision: None,
            loss_seg: losses.map_or(f64::NAN, |l| l.seg),
            loss_rec: losses.map_or(f64::NAN, |l| l.rec),
            tau_before: self.tau,
            tau_after: self.tau,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            prediction: Vec::new(),
            student_prediction: Vec::new(),
        }
    }

    /// One instance: teacher labels, masked student pass, decision on the
    /// current threshold, update, threshold update, teacher EMA.
    pub fn tta_step(&mut self, input: &TargetInput) -> Result<StepReport> {
        let start = Instant::now();
        let tau_before = self.tau;

        let pseudo = match self.pseudo_label(input) {
            Ok(p) => p,
            Err(e) if e.is_non_finite() => return Ok(self.quarantine(input, None, start)),
            Err(e) => return Err(e),
        };

        let cfg = self.model.config();
        let mask = PatchMask::sample(
            cfg.num_patches(),
            self.cfg.mask_ratio,
            self.cfg.mask_seed,
            input.t as u64,
        )?;

        self.forward_count += 1;
        let mut tape = Tape::new();
        let bound = self.student.bind(&mut tape);
        let vars =
            match multitask_loss(&self.model, &mut tape, &bound, &input.image, &pseudo, &mask) {
                Ok(v) => v,
                Err(e) if e.is_non_finite() => return Ok(self.quarantine(input, None, start)),
                Err(e) => return Err(e),
            };
        let losses = Losses::read(&tape, &vars)?;
        if !losses.total.is_finite() {
            return Ok(self.quarantine(input, Some(losses), start));
        }
        let student_prediction = argmax_rows(tape.value(vars.logits));

        let decision = self.decide(losses.seg)?;

        match tape.backward(vars.total) {
            Ok(()) => {}
            Err(e) if e.is_non_finite() => return Ok(self.quarantine(input, Some(losses), start)),
            Err(e) => return Err(e),
        }
        self.student.collect_grads(&tape, &bound)?;
        let (groups, lr) = match decision {
            Decision::Ft => (self.cfg.ft_groups, self.cfg.lr),
            Decision::Et => (self.cfg.et_groups, self.cfg.lr * self.cfg.et_lr_scale),
        };
        self.optimizer.step(&mut self.student, groups, lr)?;

        self.tau = update_threshold(tau_before, losses.seg, self.cfg.alpha_l);
        ema_update(&mut self.teacher, &self.student, self.cfg.alpha)?;
        self.t += 1;
        match decision {
            Decision::Ft => self.ft_count += 1,
            Decision::Et => self.et_count += 1,
        }

        Ok(StepReport {
            t: input.t,
            domain: input.domain,
            decision: Some(decision),
            loss_seg: losses.seg,
            loss_rec: losses.rec,
            tau_before,
            tau_after: self.tau,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            prediction: pseudo,
            student_prediction,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::Tensor;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn checkpoint() -> Checkpoint {
        let cfg = ModelConfig::tiny();
        let model = Model::new(cfg.clone()).unwrap();
        let mut params = model.init_params(4);
        // non-zero adapter up-projection so adapters carry gradient to every group
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (name, p) in params.iter_mut() {
            if name.contains("adapter.up") || name == "mask_token" {
                for v in p.tensor.data_mut() {
                    *v = rng.random_range(-0.1..0.1);
                }
            }
        }
        Checkpoint::new(cfg, params)
    }

    fn input(t: usize, seed: u64) -> TargetInput {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..3 * 8 * 8).map(|_| rng.random()).collect();
        TargetInput {
            t,
            domain: Domain::Fog,
            image: Tensor::new(&[3, 8, 8], data).unwrap(),
        }
    }

    fn state(policy: Policy) -> AdaptationState {
        let cfg = AdaptConfig {
            policy,
            lr: 1e-2,
            ..AdaptConfig::default()
        };
        AdaptationState::new(&checkpoint(), cfg).unwrap()
    }

    #[test]
    fn fresh_state() {
        let mut s = init_adaptation(&checkpoint(), 0.999, 0.9).unwrap();
        assert_eq!(
            (s.tau, s.ft_count, s.et_count, s.t, s.forward_count),
            (0.0, 0, 0, 0, 0)
        );
        let x = input(0, 2);
        let student_view = s.model().predict_labels(&s.student, &x.image).unwrap();
        assert_eq!(s.pseudo_label(&x).unwrap(), student_view);
        assert_eq!(s.forward_count, 1);
    }

    #[test]
    fn missing_names_listed() {
        let mut ck = checkpoint();
        let mut params = ParamStore::new();
        for (name, p) in ck.params.iter() {
            if name != "norm.gamma" && name != "mask_token" {
                params.insert(name, p.tensor.clone(), p.group).unwrap();
            }
        }
        ck.params = params;
        match init_adaptation(&ck, 0.999, 0.9) {
            Err(Error::MissingParams(names)) => {
                assert_eq!(
                    names,
                    vec!["mask_token".to_string(), "norm.gamma".to_string()]
                )
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn two_forwards_per_step_and_decision_invariant() {
        let mut s = state(Policy::Hybrid);
        for t in 0..6 {
            let r = s.tta_step(&input(t, t as u64)).unwrap();
            let d = r.decision.unwrap();
            assert_eq!(d == Decision::Ft, r.loss_seg > r.tau_before);
            assert_eq!(r.tau_after, update_threshold(r.tau_before, r.loss_seg, 0.9));
            if t == 0 {
                assert_eq!(d, Decision::Ft);
            }
        }
        assert_eq!(s.forward_count, 12);
        assert_eq!(s.ft_count + s.et_count, s.t);
        assert_eq!(s.t, 6);
    }

    #[test]
    fn et_touches_adapters_only() {
        let mut s = state(Policy::AlwaysEt);
        let frozen = GroupSet::all()
            .iter()
            .filter(|g| *g != Group::Adapter)
            .collect::<GroupSet>();
        let before = s.student.group_bytes(frozen);
        let adapters = s.student.group_bytes(GroupSet::only(Group::Adapter));
        let r = s.tta_step(&input(0, 9)).unwrap();
        assert_eq!(r.decision, Some(Decision::Et));
        assert_eq!(s.student.group_bytes(frozen), before);
        assert_ne!(
            s.student.group_bytes(GroupSet::only(Group::Adapter)),
            adapters
        );
    }

    #[test]
    fn ft_moves_every_group() {
        let mut s = state(Policy::AlwaysFt);
        let before: Vec<_> = Group::ALL
            .iter()
            .map(|g| s.student.group_bytes(GroupSet::only(*g)))
            .collect();
        s.tta_step(&input(0, 9)).unwrap();
        for (g, b) in Group::ALL.iter().zip(before) {
            assert_ne!(s.student.group_bytes(GroupSet::only(*g)), b, "{g}");
        }
    }

    #[test]
    fn teacher_follows_ema_of_student() {
        let mut s = state(Policy::AlwaysFt);
        let t0 = s.teacher.clone();
        s.tta_step(&input(0, 3)).unwrap();
        let mut expected = t0;
        ema_update(&mut expected, &s.student, 0.999).unwrap();
        assert_eq!(
            expected.group_bytes(GroupSet::all()),
            s.teacher.group_bytes(GroupSet::all())
        );
    }

    #[test]
    fn fixed_policies_share_the_step() {
        // identical first decision (FT from tau = 0) -> identical losses and weights
        let mut h = state(Policy::Hybrid);
        let mut f = state(Policy::AlwaysFt);
        let x = input(0, 5);
        let (a, b) = (h.tta_step(&x).unwrap(), f.tta_step(&x).unwrap());
        assert_eq!((a.loss_seg, a.loss_rec), (b.loss_seg, b.loss_rec));
        assert_eq!(
            h.student.group_bytes(GroupSet::all()),
            f.student.group_bytes(GroupSet::all())
        );
    }

    #[test]
    fn non_finite_instance_is_quarantined() {
        let mut ck = checkpoint();
        for v in ck.params.get_mut("patch_embed.weight").unwrap().data_mut() {
            *v = f64::MAX / 4.0;
        }
        let mut s = AdaptationState::new(&ck, AdaptConfig::default()).unwrap();
        let teacher = s.teacher.group_bytes(GroupSet::all());
        let r = s.tta_step(&input(0, 1)).unwrap();
        assert!(r.quarantined());
        assert_eq!((s.tau, s.t, s.skipped), (0.0, 0, 1));
        assert_eq!(s.teacher.group_bytes(GroupSet::all()), teacher);
    }

    #[test]
    fn policy_names_roundtrip() {
        for p in [Policy::Hybrid, Policy::AlwaysFt, Policy::AlwaysEt] {
            assert_eq!(p.to_string().parse::<Policy>().unwrap(), p);
        }
        assert!("sometimes".parse::<Policy>().is_err());
    }
}
