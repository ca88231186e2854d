//! Accuracy matrix, average accuracy and forgetting, and the mean-shift
//! diagnostics that compare stored and true normalization means.

use serde::{Deserialize, Serialize};

use crate::continual::{ContinualModel, MomentMode};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `a[i][j]`: accuracy on task `i` after training task `j`, defined for
/// `i <= j` only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    tasks: usize,
    entries: Vec<Vec<Option<f64>>>,
}

/// Forgetting value; `defined` is false for a single task, where the value
/// is reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub value: f64,
    pub defined: bool,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Metric("accuracy matrix needs at least one task".into()));
        }
        Ok(AccuracyMatrix { tasks, entries: vec![vec![None; tasks]; tasks] })
    }

    /// Builds a complete matrix from rows where row `i` lists `a[i][i..]`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let mut m = AccuracyMatrix::new(rows.len())?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != rows.len() - i {
                return Err(Error::Metric(format!("row {i} has {} entries, expected {}", row.len(), rows.len() - i)));
            }
            for (k, &v) in row.iter().enumerate() {
                m.set(i, i + k, v)?;
            }
        }
        Ok(m)
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn set(&mut self, i: usize, j: usize, accuracy: f64) -> Result<()> {
        if i > j || j >= self.tasks {
            return Err(Error::Metric(format!("entry ({i}, {j}) outside the lower triangle of {} tasks", self.tasks)));
        }
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::Metric(format!("accuracy {accuracy} outside [0, 1]")));
        }
        self.entries[i][j] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries.get(i).and_then(|row| row.get(j)).copied().flatten()
    }

    fn require(&self, i: usize, j: usize) -> Result<f64> {
        self.get(i, j).ok_or_else(|| Error::Metric(format!("accuracy matrix entry ({i}, {j}) is missing")))
    }

    /// Mean final accuracy `(1/T) sum_i a[i][T-1]`.
    pub fn acc(&self) -> Result<f64> {
        let last = self.tasks - 1;
        let mut total = 0.0;
        for i in 0..self.tasks {
            total += self.require(i, last)?;
        }
        Ok(total / self.tasks as f64)
    }

    /// `(1/(T-1)) sum_{i<T-1} max_{i<=j<=T-1} (a[i][j] - a[i][T-1])`.
    pub fn fgt(&self) -> Result<Forgetting> {
        let t = self.tasks;
        if t == 1 {
            self.require(0, 0)?;
            return Ok(Forgetting { value: 0.0, defined: false });
        }
        let mut total = 0.0;
        for i in 0..t - 1 {
            let last = self.require(i, t - 1)?;
            let mut worst = 0.0f64;
            for j in i..t {
                worst = worst.max(self.require(i, j)? - last);
            }
            total += worst;
        }
        Ok(Forgetting { value: total / (t - 1) as f64, defined: true })
    }

    /// `i,j,accuracy` rows for every filled entry.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,j,accuracy\n");
        for i in 0..self.tasks {
            for j in i..self.tasks {
                if let Some(v) = self.get(i, j) {
                    out.push_str(&format!("{i},{j},{v}\n"));
                }
            }
        }
        out
    }
}

/// Per normalization layer: the true post-convolution channel mean of the
/// probed data and the mean the layer would normalize it with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMeanProbe {
    pub layer: usize,
    pub true_mean: Vec<f64>,
    pub stored_mean: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerDeltas {
    pub layer: usize,
    /// Stored-vs-true gap right after the probed task was learned.
    pub delta0: f64,
    /// Drift of the true mean between the two probes.
    pub delta1: f64,
    /// Stored-vs-true gap at the final probe.
    pub delta2: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Per-layer deltas from probes taken after the first task and after the
/// final task.
pub fn delta_diagnostics(first: &[LayerMeanProbe], last: &[LayerMeanProbe]) -> Result<Vec<LayerDeltas>> {
    if first.is_empty() || last.is_empty() {
        return Err(Error::Diagnostic("missing layer probe".into()));
    }
    if first.len() != last.len() {
        return Err(Error::Diagnostic(format!(
            "{} probes after the first task, {} at the end",
            first.len(),
            last.len()
        )));
    }
    first
        .iter()
        .zip(last)
        .map(|(p1, pt)| {
            let c = p1.true_mean.len();
            if p1.layer != pt.layer
                || [p1.stored_mean.len(), pt.true_mean.len(), pt.stored_mean.len()].iter().any(|&n| n != c)
            {
                return Err(Error::Diagnostic(format!(
                    "probes for layer {} and {} disagree in shape",
                    p1.layer, pt.layer
                )));
            }
            Ok(LayerDeltas {
                layer: p1.layer,
                delta0: euclid(&p1.stored_mean, &p1.true_mean),
                delta1: euclid(&p1.true_mean, &pt.true_mean),
                delta2: euclid(&pt.stored_mean, &pt.true_mean),
            })
        })
        .collect()
}

pub fn deltas_csv(deltas: &[LayerDeltas]) -> String {
    let mut out = String::from("layer,delta0,delta1,delta2\n");
    for d in deltas {
        out.push_str(&format!("{},{},{},{}\n", d.layer, d.delta0, d.delta1, d.delta2));
    }
    out
}

/// Exact full-data channel moments `(mean, biased variance)` at the
/// post-convolution point of `layer`, with every earlier layer in eval mode.
pub fn true_moments(model: &ContinualModel, task: usize, x: &Tensor, layer: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.is_empty() {
        return Err(Error::Data("empty data".into()));
    }
    let moments = model.post_conv_moments(task, x, MomentMode::Running)?;
    moments.into_iter().nth(layer).ok_or_else(|| Error::Diagnostic(format!("model has no layer {layer}")))
}

/// Probes every normalization layer of `task` on `x`.
pub fn probe_layer_means(model: &ContinualModel, task: usize, x: &Tensor) -> Result<Vec<LayerMeanProbe>> {
    let moments = model.post_conv_moments(task, x, MomentMode::Running)?;
    moments
        .into_iter()
        .enumerate()
        .map(|(layer, (mean, _))| {
            Ok(LayerMeanProbe { layer, true_mean: mean, stored_mean: model.stored_mean(layer, task)? })
        })
        .collect()
}

/// Median of a nonempty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { 0.5 * (v[mid - 1] + v[mid]) })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn worked() -> AccuracyMatrix {
        AccuracyMatrix::from_rows(&[vec![0.9, 0.8, 0.7], vec![0.9, 0.85], vec![0.95]]).unwrap()
    }

    #[test]
    fn worked_example() {
        let m = worked();
        assert!((m.acc().unwrap() - 2.5 / 3.0).abs() < 1e-15);
        let f = m.fgt().unwrap();
        assert!(f.defined);
        assert!((f.value - 0.125).abs() < 1e-15);
    }

    #[test]
    fn single_task_forgetting_flagged() {
        let m = AccuracyMatrix::from_rows(&[vec![0.6]]).unwrap();
        assert_eq!(m.fgt().unwrap(), Forgetting { value: 0.0, defined: false });
        assert_eq!(m.acc().unwrap(), 0.6);
    }

    #[test]
    fn non_decreasing_rows_do_not_forget() {
        let m = AccuracyMatrix::from_rows(&[vec![0.5, 0.6, 0.6], vec![0.7, 0.9], vec![0.1]]).unwrap();
        assert_eq!(m.fgt().unwrap().value, 0.0);
    }

    #[test]
    fn incomplete_matrix_rejected() {
        let mut m = AccuracyMatrix::new(2).unwrap();
        m.set(0, 0, 0.5).unwrap();
        assert!(matches!(m.acc(), Err(Error::Metric(_))));
        assert!(matches!(m.set(1, 0, 0.5), Err(Error::Metric(_))));
        assert!(matches!(m.set(0, 1, 1.5), Err(Error::Metric(_))));
    }

    #[test]
    fn csv_lists_lower_triangle() {
        let csv = worked().to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(csv.contains("0,2,0.7\n"));
    }

    #[test]
    fn deltas_of_identical_probes_vanish() {
        let p = vec![LayerMeanProbe { layer: 0, true_mean: vec![1.0, 2.0], stored_mean: vec![1.0, 2.0] }];
        let d = delta_diagnostics(&p, &p).unwrap();
        assert_eq!((d[0].delta0, d[0].delta1, d[0].delta2), (0.0, 0.0, 0.0));
        assert!(matches!(delta_diagnostics(&p, &[]), Err(Error::Diagnostic(_))));
    }

    #[test]
    fn deltas_are_euclidean() {
        let first = vec![LayerMeanProbe { layer: 0, true_mean: vec![0.0, 0.0], stored_mean: vec![3.0, 4.0] }];
        let last = vec![LayerMeanProbe { layer: 0, true_mean: vec![1.0, 0.0], stored_mean: vec![1.0, 2.0] }];
        let d = delta_diagnostics(&first, &last).unwrap()[0];
        assert_eq!((d.delta0, d.delta1, d.delta2), (5.0, 1.0, 2.0));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[]), None);
    }
}
