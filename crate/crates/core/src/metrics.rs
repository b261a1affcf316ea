//! Agreement measures between a predicted change map and ground truth.
//!
//! Both maps are binary label maps, 1 marking change. Rates that would
//! divide by an empty class come back as None rather than NaN.

use crate::error::{Error, Result};
use crate::imaging::LabelMap;

/// Pixel counts split by ground truth class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Confusion {
    /// Truly unchanged pixels.
    pub unchanged: usize,
    /// Truly changed pixels.
    pub changed: usize,
    /// Unchanged pixels flagged as changed.
    pub false_alarms: usize,
    /// Changed pixels flagged as unchanged.
    pub missed: usize,
}

pub fn confusion(truth: &LabelMap, predicted: &LabelMap) -> Result<Confusion> {
    if truth.width() != predicted.width() || truth.height() != predicted.height() {
        return Err(Error::DimensionMismatch {
            expected_width: truth.width(),
            expected_height: truth.height(),
            actual_width: predicted.width(),
            actual_height: predicted.height(),
        });
    }
    truth.ensure_binary()?;
    predicted.ensure_binary()?;
    let mut c = Confusion { unchanged: 0, changed: 0, false_alarms: 0, missed: 0 };
    for r in 0..truth.height() {
        for col in 0..truth.width() {
            match (truth.get(r, col), predicted.get(r, col)) {
                (0, p) => {
                    c.unchanged += 1;
                    c.false_alarms += p as usize;
                }
                (_, p) => {
                    c.changed += 1;
                    c.missed += (1 - p) as usize;
                }
            }
        }
    }
    Ok(c)
}

/// All rates are fractions in [0, 1] except generalized_detection, which by
/// its definition can exceed 1 by orders of magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub confusion: Confusion,
    /// Pf: false alarms over truly unchanged pixels.
    pub false_alarm_rate: Option<f64>,
    /// Pm: missed detections over truly changed pixels.
    pub missed_rate: Option<f64>,
    /// PCC: correctly classified pixels over all pixels.
    pub correct_classification: f64,
    /// KC: chance-corrected agreement.
    pub kappa: Option<f64>,
    /// GD: (unchanged - missed) over (false alarms + missed), kept exactly as
    /// defined even though the numerator mixes categories. Relative use only.
    pub generalized_detection: Option<f64>,
}

impl Confusion {
    pub fn report(&self) -> Report {
        let nu = self.unchanged as f64;
        let nc = self.changed as f64;
        let fa = self.false_alarms as f64;
        let mn = self.missed as f64;
        let total = nu + nc;
        assert!(total > 0.0, "empty confusion");

        let pcc = (nu - fa + nc - mn) / total;
        let pre = ((nc - mn + fa) * nc + (nu - fa + mn) * nu) / (total * total);
        let kappa = if (1.0 - pre).abs() > 1e-12 { Some((pcc - pre) / (1.0 - pre)) } else { None };
        Report {
            confusion: *self,
            false_alarm_rate: (self.unchanged > 0).then(|| fa / nu),
            missed_rate: (self.changed > 0).then(|| mn / nc),
            correct_classification: pcc,
            kappa,
            generalized_detection: (self.false_alarms + self.missed > 0)
                .then(|| (nu - mn) / (fa + mn)),
        }
    }
}

pub fn evaluate(truth: &LabelMap, predicted: &LabelMap) -> Result<Report> {
    Ok(confusion(truth, predicted)?.report())
}

impl Report {
    pub fn render(&self) -> String {
        let c = &self.confusion;
        let pct = |v: Option<f64>| match v {
            Some(x) => format!("{:.2}%", 100.0 * x),
            None => "n/a".to_string(),
        };
        let mut s = String::new();
        s.push_str(&format!(
            "pixels: {} unchanged, {} changed (ground truth)\n",
            c.unchanged, c.changed
        ));
        s.push_str(&format!(
            "errors: {} false alarms, {} missed detections\n",
            c.false_alarms, c.missed
        ));
        s.push_str(&format!("false alarm rate (Pf): {}\n", pct(self.false_alarm_rate)));
        s.push_str(&format!("missed rate (Pm): {}\n", pct(self.missed_rate)));
        s.push_str(&format!(
            "correct classification (PCC): {}\n",
            pct(Some(self.correct_classification))
        ));
        s.push_str(&format!("kappa (KC): {}\n", pct(self.kappa)));
        s.push_str(&format!(
            "generalized detection (GD, as-defined-in-source): {}\n",
            pct(self.generalized_detection)
        ));
        s
    }
}
