//! Evaluation metrics and the per-run report.

mod cls;
mod det;
mod profiler;
mod seg;

pub use cls::{classification_metrics, ClsMetrics};
pub use det::{average_precision, map_sweep, sweep_thresholds, MapSummary};
pub use profiler::{layer_macs, median_latency, write_layer_macs_csv, Efficiency, LayerMacs};
pub use seg::{boundary, dice_metric, hausdorff, percentile, squared_edt};

use serde::{Deserialize, Serialize};

pub const DEFAULT_HD_PERCENTILE: f64 = 95.0;

/// Everything one evaluation produces. Metrics of a task the model does not
/// have are `None`, as are undefined values (e.g. HD with an empty mask in
/// every case, sensitivity with no HGG case).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_cases: usize,
    /// Per region (WT, TC, ET).
    pub dice: Option<[f64; 3]>,
    pub hd: Option<[Option<f64>; 3]>,
    pub hd_percentile: f64,
    pub acc: Option<f64>,
    pub sen: Option<f64>,
    pub spe: Option<f64>,
    pub map_sweep: Option<f64>,
    pub map_50: Option<f64>,
    pub mar_sweep: Option<f64>,
    pub mar_50: Option<f64>,
    pub efficiency: Efficiency,
}

impl MetricsReport {
    pub fn dice_avg(&self) -> Option<f64> {
        self.dice.map(|d| d.iter().sum::<f64>() / 3.0)
    }

    /// Mean of average Dice, accuracy and sweep mAP over the tasks present;
    /// used to pick the best checkpoint.
    pub fn selection_score(&self) -> f64 {
        let parts: Vec<f64> = [self.dice_avg(), self.acc, self.map_sweep].into_iter().flatten().collect();
        if parts.is_empty() {
            0.0
        } else {
            parts.iter().sum::<f64>() / parts.len() as f64
        }
    }

    /// True when every task section is filled in.
    pub fn is_complete(&self) -> bool {
        self.dice.is_some()
            && self.hd.is_some()
            && self.acc.is_some()
            && self.map_sweep.is_some()
            && self.map_50.is_some()
            && self.mar_sweep.is_some()
            && self.mar_50.is_some()
    }

    /// Range violations, empty when the report is sane.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let unit = |name: &str, v: Option<f64>, out: &mut Vec<String>| {
            if let Some(v) = v {
                if !(0.0..=1.0).contains(&v) {
                    out.push(format!("{name} = {v} outside [0, 1]"));
                }
            }
        };
        for (i, d) in self.dice.iter().flatten().enumerate() {
            unit(&format!("dice[{i}]"), Some(*d), &mut out);
        }
        for (i, h) in self.hd.iter().flatten().enumerate() {
            if h.is_some_and(|h| !(h >= 0.0)) {
                out.push(format!("hd[{i}] negative or NaN"));
            }
        }
        for (n, v) in [
            ("acc", self.acc),
            ("sen", self.sen),
            ("spe", self.spe),
            ("map_sweep", self.map_sweep),
            ("map_50", self.map_50),
            ("mar_sweep", self.mar_sweep),
            ("mar_50", self.mar_50),
        ] {
            unit(n, v, &mut out);
        }
        let e = &self.efficiency;
        if e.params == 0 || e.flops != 2 * e.macs || !(e.latency_s >= 0.0) || !(e.size_mb >= 0.0) {
            out.push(format!("inconsistent efficiency block {e:?}"));
        }
        out
    }
}
