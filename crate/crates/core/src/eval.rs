//! Dice evaluation over every non-empty subset of present modalities.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::modality::{Modality, Region};
use crate::network::SegNetwork;
use crate::synthetic::Sample;

pub const REPORT_HEADER: &str = "subset,flair,t1,t1c,t2,dice_complete,dice_core,dice_enhancing";
pub const REPORT_NOTE: &str = "# dice is 1.0 when prediction and ground truth are both empty; reference row: flair+t1+t1c+t2";

/// Present flags in (FLAIR, T1, T1c, T2) order, singles first, then pairs,
/// triples and the full set.
pub const TABLE_ORDER: [[bool; 4]; 15] = {
    const O: bool = false;
    const X: bool = true;
    [
        [O, O, O, X],
        [O, O, X, O],
        [O, X, O, O],
        [X, O, O, O],
        [O, O, X, X],
        [O, X, X, O],
        [X, X, O, O],
        [O, X, O, X],
        [X, O, O, X],
        [X, O, X, O],
        [X, X, X, O],
        [X, X, O, X],
        [X, O, X, X],
        [O, X, X, X],
        [X, X, X, X],
    ]
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModalitySubset {
    present: [bool; 4],
}

impl ModalitySubset {
    pub fn new(present: [bool; 4]) -> Result<Self> {
        if !present.iter().any(|&p| p) {
            return Err(Error::AllModalitiesMissing);
        }
        Ok(Self { present })
    }

    pub fn full() -> Self {
        Self { present: [true; 4] }
    }

    /// All present except `missing`.
    pub fn without(missing: &[Modality]) -> Result<Self> {
        let mut present = [true; 4];
        for m in missing {
            present[m.index()] = false;
        }
        Self::new(present)
    }

    pub fn present(&self) -> [bool; 4] {
        self.present
    }

    pub fn contains(&self, m: Modality) -> bool {
        self.present[m.index()]
    }

    pub fn is_full(&self) -> bool {
        self.present == [true; 4]
    }

    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }
}

/// Present modality names joined by `+`, e.g. `flair+t2`.
impl fmt::Display for ModalitySubset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Modality::ALL.iter().filter(|m| self.contains(**m)).map(|m| m.name()).collect();
        f.write_str(&names.join("+"))
    }
}

pub fn enumerate_subsets() -> Vec<ModalitySubset> {
    TABLE_ORDER.iter().map(|&present| ModalitySubset { present }).collect()
}

/// `2|P ∩ T| / (|P| + |T|)`, and 1.0 when both masks are empty.
pub fn dice_score(pred: &Tensor<f32>, truth: &Tensor<f32>) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("dice_score", pred.shape(), truth.shape()));
    }
    dice_counts(pred.data(), truth.data())
}

fn dice_counts(pred: &[f32], truth: &[f32]) -> Result<f64> {
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        for (v, what) in [(p, "prediction mask"), (t, "ground-truth mask")] {
            if v != 0.0 && v != 1.0 {
                return Err(Error::NonBinary { what, value: v });
            }
        }
        let (p, t) = (p == 1.0, t == 1.0);
        inter += (p && t) as usize;
        np += p as usize;
        nt += t as usize;
    }
    if np + nt == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (np + nt) as f64)
}

/// Voxels with probability at least `threshold` are foreground.
pub fn binarize(probs: &Tensor<f32>, threshold: f32) -> Tensor<f32> {
    let data = probs.data().iter().map(|&p| if p >= threshold { 1.0 } else { 0.0 }).collect();
    Tensor::new(probs.shape(), data).expect("same shape")
}

/// Per-region dice of one prediction against `[3,...]` labels.
pub fn region_dice(mask: &Tensor<f32>, labels: &Tensor<f32>) -> Result<[f64; 3]> {
    if mask.shape() != labels.shape() || labels.shape().first() != Some(&3) {
        return Err(Error::shape("region_dice", mask.shape(), labels.shape()));
    }
    let mut out = [0.0; 3];
    for r in Region::ALL {
        out[r as usize] = dice_counts(mask.channel(r as usize), labels.channel(r as usize))?;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subset: ModalitySubset,
    /// Indexed by [`Region`].
    pub dice: [f64; 3],
}

impl EvalRow {
    pub fn mean(&self) -> f64 {
        self.dice.iter().sum::<f64>() / 3.0
    }

    pub fn region(&self, r: Region) -> f64 {
        self.dice[r as usize]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    /// Row holding the all-modalities result.
    pub reference: usize,
}

impl EvalReport {
    pub fn row(&self, subset: ModalitySubset) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.subset == subset)
    }

    pub fn reference_row(&self) -> &EvalRow {
        &self.rows[self.reference]
    }

    /// Mean over rows and regions.
    pub fn mean_dice(&self) -> f64 {
        self.rows.iter().map(EvalRow::mean).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_NOTE}\n{REPORT_HEADER}\n");
        for row in &self.rows {
            let flags = row.subset.present().map(|p| p as u8);
            writeln!(
                out,
                "{},{},{},{},{},{:.4},{:.4},{:.4}",
                row.subset, flags[0], flags[1], flags[2], flags[3], row.dice[0], row.dice[1], row.dice[2]
            )
            .expect("write to string");
        }
        out
    }

    pub fn parse_csv(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::arg("report", reason);
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        match lines.next() {
            Some(h) if h == REPORT_HEADER => {}
            other => return Err(bad(format!("unexpected header {other:?}"))),
        }
        let mut rows = Vec::new();
        for line in lines {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 8 {
                return Err(bad(format!("expected 8 fields in `{line}`")));
            }
            let mut present = [false; 4];
            for (p, f) in present.iter_mut().zip(&fields[1..5]) {
                *p = match *f {
                    "0" => false,
                    "1" => true,
                    _ => return Err(bad(format!("presence flag must be 0 or 1 in `{line}`"))),
                };
            }
            let mut dice = [0.0; 3];
            for (d, f) in dice.iter_mut().zip(&fields[5..]) {
                *d = f.parse().map_err(|_| bad(format!("invalid dice `{f}`")))?;
            }
            rows.push(EvalRow { subset: ModalitySubset::new(present)?, dice });
        }
        let reference = rows
            .iter()
            .position(|r| r.subset.is_full())
            .ok_or_else(|| bad("no all-modalities row".into()))?;
        Ok(Self { rows, reference })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_csv(&text)
    }
}

pub fn write_report(report: &EvalReport, path: &Path) -> Result<()> {
    report.write(path)
}

/// Mean per-sample region dice of `net` on `test` with only `subset` present.
pub fn evaluate_subset(net: &SegNetwork, test: &[Sample], subset: ModalitySubset, threshold: f32) -> Result<EvalRow> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut sum = [0.0; 3];
    for sample in test {
        let probs = net.predict(&sample.volumes, subset.present())?;
        let d = region_dice(&binarize(&probs, threshold), &sample.labels)?;
        for (s, v) in sum.iter_mut().zip(d) {
            *s += v;
        }
    }
    Ok(EvalRow {
        subset,
        dice: sum.map(|s| s / test.len() as f64),
    })
}

/// All fifteen subsets in table order. Subsets are evaluated in parallel;
/// each row only depends on its own subset.
pub fn evaluate(net: &SegNetwork, test: &[Sample], threshold: f32) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Empty("test set"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::arg("evaluate", format!("threshold must lie in (0,1), got {threshold}")));
    }
    let subsets = enumerate_subsets();
    let rows = subsets
        .par_iter()
        .map(|&s| evaluate_subset(net, test, s, threshold))
        .collect::<Result<Vec<_>>>()?;
    let reference = rows.iter().position(|r| r.subset.is_full()).expect("full subset enumerated");
    Ok(EvalReport { rows, reference })
}

#[cfg(test)]
mod tests;
