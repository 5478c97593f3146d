use crate::error::{Error, Result};

fn check_pair(preds: &[usize], gts: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidArgument("metric over empty input".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::shape(
            "metric",
            format!("{} predictions vs {} labels", preds.len(), gts.len()),
        ));
    }
    Ok(())
}

/// Per-class intersection and union counts, accumulated over any number of
/// label vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Confusion {
    inter: Vec<usize>,
    union: Vec<usize>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            inter: vec![0; num_classes],
            union: vec![0; num_classes],
        }
    }

    pub fn add(&mut self, preds: &[usize], gts: &[usize]) -> Result<()> {
        check_pair(preds, gts)?;
        let classes = self.inter.len();
        if let Some(&bad) = preds.iter().chain(gts).find(|c| **c >= classes) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes,
            });
        }
        for (&p, &g) in preds.iter().zip(gts) {
            if p == g {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    /// Mean IoU over classes that occur in either the predictions or the labels.
    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = (0..self.inter.len())
            .filter(|&c| self.union[c] > 0)
            .map(|c| self.inter[c] as f64 / self.union[c] as f64)
            .collect();
        if present.is_empty() {
            return Err(Error::InvalidArgument("metric over empty input".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn compute_miou(preds: &[usize], gts: &[usize], num_classes: usize) -> Result<f64> {
    let mut c = Confusion::new(num_classes);
    c.add(preds, gts)?;
    c.miou()
}

pub fn compute_error_rate(preds: &[usize], gts: &[usize]) -> Result<f64> {
    check_pair(preds, gts)?;
    let wrong = preds.iter().zip(gts).filter(|(p, g)| p != g).count();
    Ok(wrong as f64 / preds.len() as f64)
}
