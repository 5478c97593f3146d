use crate::diffmath::Tensor;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Group, GroupSet, Model, ParamStore};

/// Groups mirrored by the teacher: encoder (backbone and adapters) and task head.
pub fn teacher_groups() -> GroupSet {
    GroupSet::only(Group::Backbone)
        .with(Group::Adapter)
        .with(Group::SegHead)
}

/// Frozen copy of the student's encoder and task head.
pub fn teacher_from(student: &ParamStore) -> ParamStore {
    let mut t = student.subset(teacher_groups());
    t.set_requires_grad(false);
    t
}

/// `teacher <- alpha * teacher + (1 - alpha) * student`, clamped to the segment
/// between the two values so rounding never leaves it.
pub fn ema_update(teacher: &mut ParamStore, student: &ParamStore, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "ema factor {alpha} outside [0, 1]"
        )));
    }
    let missing = teacher.missing_from(student);
    if !missing.is_empty() {
        return Err(Error::MissingParams(missing));
    }
    for (name, p) in teacher.iter() {
        let s = student.get(name).expect("checked above");
        if s.shape() != p.tensor.shape() {
            return Err(Error::shape(
                "ema_update",
                format!(
                    "{name}: teacher {:?} vs student {:?}",
                    p.tensor.shape(),
                    s.shape()
                ),
            ));
        }
    }
    for (name, p) in teacher.iter_mut() {
        let s = student.get(name).expect("checked above").data();
        for (t, &sv) in p.tensor.data_mut().iter_mut().zip(s) {
            let v = alpha * *t + (1.0 - alpha) * sv;
            *t = v.clamp(t.min(sv), t.max(sv));
        }
    }
    Ok(())
}

/// Teacher logits and hard labels on the unmasked image.
pub fn pseudo_label(
    model: &Model,
    teacher: &ParamStore,
    image: &Tensor,
) -> Result<(Tensor, Vec<usize>)> {
    let logits = model.predict(teacher, image)?;
    let labels = argmax_rows(&logits);
    Ok((logits, labels))
}
