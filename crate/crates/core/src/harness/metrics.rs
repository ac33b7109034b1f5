use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::IGNORE_LABEL;

/// One line of `metrics.jsonl`.
///
/// Wall-clock time is kept out of this record so that reruns with the same
/// seed produce byte-identical files; it goes to `timing.jsonl` instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: usize,
    pub variant: String,
    /// Mean supervised loss over the steps since the previous record.
    pub supervised_loss: f64,
    pub consistency_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
    /// IoU of classes 1..=C; `null` for classes absent from both maps.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_class_iou: Option<Vec<Option<f64>>>,
    /// Mean share of perturbed-branch pixels agreeing with their majority
    /// argmax class over the steps since the previous record.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub perturbed_argmax_share: Option<f64>,
    /// Steps whose consistency mask was empty.
    #[serde(default)]
    pub empty_mask_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub step: usize,
    pub seconds: f64,
}

/// Appends records as JSON Lines, flushing after each one.
pub struct JsonLines {
    out: BufWriter<File>,
}

impl JsonLines {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        Ok(JsonLines {
            out: BufWriter::new(File::create(path)?),
        })
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRecord>> {
    std::fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    /// Entry `c - 1` holds the IoU of class `c`.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in either map.
    pub miou: f64,
}

/// Mean intersection over union of label maps with classes `1..=classes`.
///
/// Pixels whose truth is the ignore label are skipped. A class absent from
/// both maps has no IoU and does not enter the mean.
pub fn compute_miou(pred: &[u8], truth: &[u8], classes: usize) -> Result<MiouResult> {
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "prediction has {} pixels but truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if t == IGNORE_LABEL {
            continue;
        }
        for v in [p, t] {
            if v == IGNORE_LABEL || usize::from(v) > classes {
                return Err(Error::invalid(format!("label {v} outside 1..={classes}")));
            }
        }
        let (p, t) = (usize::from(p) - 1, usize::from(t) - 1);
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..classes)
        .map(|c| {
            let union = tp[c] + fp[c] + fn_[c];
            (union > 0).then(|| tp[c] as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::invalid("no labeled pixels to score"));
    }
    let miou = present.iter().sum::<f64>() / present.len() as f64;
    Ok(MiouResult { per_class, miou })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn miou_examples() {
        let truth = [1, 1, 2, 2, 1, 2];
        assert_eq!(compute_miou(&truth, &truth, 2).unwrap().miou, 1.0);
        let swapped: Vec<u8> = truth.iter().map(|&t| 3 - t).collect();
        assert_eq!(compute_miou(&swapped, &truth, 2).unwrap().miou, 0.0);

        // 4x4, class 2: TP 2, FP 1, FN 1
        let mut truth = [1u8; 16];
        let mut pred = [1u8; 16];
        truth[..3].fill(2);
        pred[..2].fill(2);
        pred[5] = 2;
        let r = compute_miou(&pred, &truth, 2).unwrap();
        assert_eq!(r.per_class[1], Some(0.5));
        assert_eq!(r.per_class[0], Some(12.0 / 14.0));
    }

    #[test]
    fn absent_classes_and_ignore_label() {
        let r = compute_miou(&[1, 2, 2], &[1, 2, 0], 4).unwrap();
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0), None, None]);
        assert_eq!(r.miou, 1.0);
        // a class only predicted still counts with IoU 0
        let r = compute_miou(&[1, 3], &[1, 1], 3).unwrap();
        assert_eq!(r.per_class, vec![Some(0.5), None, Some(0.0)]);
        assert_eq!(r.miou, 0.25);
        assert!(compute_miou(&[1], &[1, 2], 2).is_err());
        assert!(compute_miou(&[5], &[1], 2).is_err());
        assert!(compute_miou(&[1], &[0], 2).is_err());
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let rec = MetricsRecord {
            step: 3,
            epoch: 1,
            variant: "1w-ct".into(),
            supervised_loss: 0.5,
            consistency_loss: 0.25,
            accuracy: Some(0.9),
            miou: None,
            per_class_iou: Some(vec![Some(1.0), None]),
            perturbed_argmax_share: None,
            empty_mask_steps: 0,
        };
        let mut w = JsonLines::create(&path).unwrap();
        w.write(&rec).unwrap();
        w.write(&rec).unwrap();
        drop(w);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(!text.contains("miou"));
        assert_eq!(read_metrics(&path).unwrap(), vec![rec.clone(), rec]);
    }
}
