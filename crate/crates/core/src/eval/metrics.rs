use crate::error::{Error, Result};

/// Two-class confusion counts, `counts[true][predicted]`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn from_labels(truth: &[usize], predicted: &[usize]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), predicted.len())));
        }
        let mut cm = Self::default();
        for (&t, &p) in truth.iter().zip(predicted) {
            if t > 1 || p > 1 {
                return Err(Error::Parameter(format!("class index out of range: {t}/{p}")));
            }
            cm.counts[t][p] += 1;
        }
        Ok(cm)
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn recall(&self, class: usize) -> Result<f64> {
        let row = self.counts[class];
        let n = row[0] + row[1];
        if n == 0 {
            return Err(Error::UndefinedMetric(format!("class {class} has no samples")));
        }
        Ok(row[class] as f64 / n as f64)
    }

    /// Unweighted average recall in percent.
    pub fn uar(&self) -> Result<f64> {
        Ok((self.recall(0)? + self.recall(1)?) / 2.0 * 100.0)
    }
}

pub fn uar(cm: &ConfusionMatrix) -> Result<f64> {
    cm.uar()
}

/// UAR of predicted class indices against true ones.
pub fn uar_of(truth: &[usize], predicted: &[usize]) -> Result<f64> {
    ConfusionMatrix::from_labels(truth, predicted)?.uar()
}
