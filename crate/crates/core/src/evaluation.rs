//! Overlap metrics and test-set evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use semimoe_autograd::Tensor;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::labels::BinaryMask;
use crate::model::SemiMoe;
use crate::task::Task;

/// Confusion counts of a predicted mask against the truth.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub truth: usize,
}

impl Overlap {
    pub fn of(pred: &BinaryMask, truth: &BinaryMask) -> Result<Self> {
        if (pred.height(), pred.width()) != (truth.height(), truth.width()) {
            return Err(Error::Shape(format!(
                "prediction is {}x{}, truth is {}x{}",
                pred.height(),
                pred.width(),
                truth.height(),
                truth.width()
            )));
        }
        let intersection = pred.data().iter().zip(truth.data()).filter(|(p, t)| **p == 1 && **t == 1).count();
        Ok(Self {
            intersection,
            predicted: pred.count(),
            truth: truth.count(),
        })
    }

    /// `2|P∩T| / (|P| + |T|)`, 1 when both are empty.
    pub fn dice(&self) -> f64 {
        let denom = self.predicted + self.truth;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    /// `|P∩T| / |P∪T|`, 1 when both are empty.
    pub fn jaccard(&self) -> f64 {
        let union = self.predicted + self.truth - self.intersection;
        if union == 0 {
            1.0
        } else {
            self.intersection as f64 / union as f64
        }
    }
}

pub fn dice_score(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    Ok(Overlap::of(pred, truth)?.dice())
}

pub fn jaccard_score(pred: &BinaryMask, truth: &BinaryMask) -> Result<f64> {
    Ok(Overlap::of(pred, truth)?.jaccard())
}

/// Argmax masks of `[B, 2, H, W]` logits.
pub fn argmax_masks(logits: &Tensor) -> Vec<BinaryMask> {
    let s = logits.shape();
    let (h, w) = (s[2], s[3]);
    let plane = h * w;
    logits
        .data()
        .chunks(2 * plane)
        .map(|c| {
            let data = (0..plane).map(|i| u8::from(c[plane + i] > c[i])).collect();
            BinaryMask::new(h, w, data).expect("sized by construction")
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub dice: f64,
    pub jaccard: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_dice: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_jaccard: Option<f64>,
}

/// Test-set scores. The headline numbers come from the seg expert; the seg
/// gate's scores are reported beside them when a seg gate exists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub dice: f64,
    pub jaccard: f64,
    pub gate_dice: Option<f64>,
    pub gate_jaccard: Option<f64>,
    /// Mean expert weights per gated task over the test set.
    pub gate_weights: BTreeMap<Task, Vec<f64>>,
    pub images: Vec<ImageScore>,
}

pub const EVAL_CHUNK: usize = 8;

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// Column means of a `[B, M]` tensor.
pub fn column_means(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let (b, m) = (s[0], s[1]);
    (0..m).map(|j| (0..b).map(|i| t.data()[i * m + j]).sum::<f64>() / b as f64).collect()
}

/// Scores the argmax of the seg expert (and seg gate) on every test image.
pub fn evaluate(model: &SemiMoe, test: &[Sample]) -> Result<EvalResult> {
    if test.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let batch = crate::data::make_batch(test)?;
    let pred = model.predict(&batch.images, EVAL_CHUNK)?;
    let expert = argmax_masks(&pred.expert_seg);
    let gate = pred.gate_seg.as_ref().map(argmax_masks);
    let mut images = Vec::with_capacity(test.len());
    for (i, s) in test.iter().enumerate() {
        let truth = s.mask().ok_or_else(|| Error::Data(format!("test sample {} has no mask", s.id)))?;
        let e = Overlap::of(&expert[i], truth)?;
        let g = gate.as_ref().map(|g| Overlap::of(&g[i], truth)).transpose()?;
        images.push(ImageScore {
            id: s.id.clone(),
            dice: e.dice(),
            jaccard: e.jaccard(),
            gate_dice: g.map(|o| o.dice()),
            gate_jaccard: g.map(|o| o.jaccard()),
        });
    }
    let has_gate = gate.is_some();
    Ok(EvalResult {
        dice: mean(images.iter().map(|s| s.dice)),
        jaccard: mean(images.iter().map(|s| s.jaccard)),
        gate_dice: has_gate.then(|| mean(images.iter().filter_map(|s| s.gate_dice))),
        gate_jaccard: has_gate.then(|| mean(images.iter().filter_map(|s| s.gate_jaccard))),
        gate_weights: pred.gate_weights.iter().map(|(t, w)| (*t, column_means(w))).collect(),
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(bits: &[u8], w: usize) -> BinaryMask {
        BinaryMask::new(bits.len() / w, w, bits.to_vec()).unwrap()
    }

    #[test]
    fn hand_computed_cases() {
        let p = mask(&[1, 1, 1, 1, 0, 0, 0, 0], 4);
        let t = mask(&[0, 0, 1, 1, 1, 1, 0, 0], 4);
        assert_eq!(dice_score(&p, &t).unwrap(), 0.5);
        assert!((jaccard_score(&p, &t).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(dice_score(&p, &p).unwrap(), 1.0);
        assert_eq!(jaccard_score(&p, &p).unwrap(), 1.0);
        assert_eq!(dice_score(&p, &p.complement()).unwrap(), 0.0);
        let z = mask(&[0; 8], 4);
        assert_eq!(dice_score(&z, &z).unwrap(), 1.0);
        assert_eq!(jaccard_score(&z, &z).unwrap(), 1.0);
        assert!(dice_score(&p, &mask(&[0; 8], 2)).is_err());
    }

    #[test]
    fn argmax_picks_foreground_on_strict_win() {
        let logits = Tensor::new(&[1, 2, 1, 3], vec![0.0, 1.0, 0.5, 1.0, 1.0, 0.0]);
        assert_eq!(argmax_masks(&logits)[0].data(), &[1, 0, 0]);
    }
}
