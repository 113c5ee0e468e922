//! Efficiency accounting: parameter counts, MACs, latency and size.

use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use autograd::profile::MacRecord;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Efficiency {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
    pub latency_s: f64,
    pub size_mb: f64,
}

impl Efficiency {
    pub fn new(params: u64, macs: u64, latency_s: f64, size_bytes: u64) -> Self {
        Efficiency {
            params,
            macs,
            flops: 2 * macs,
            latency_s,
            size_mb: size_bytes as f64 / (1u64 << 20) as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub layer: String,
    pub op: String,
    pub calls: u64,
    pub macs: u64,
}

/// Groups records by (layer, op), keeping the order of first appearance.
pub fn layer_macs(records: &[MacRecord]) -> Vec<LayerMacs> {
    let mut index: HashMap<(&str, &str), usize> = HashMap::new();
    let mut rows: Vec<LayerMacs> = Vec::new();
    for r in records {
        let i = *index.entry((r.scope.as_str(), r.op)).or_insert_with(|| {
            rows.push(LayerMacs { layer: r.scope.clone(), op: r.op.to_string(), calls: 0, macs: 0 });
            rows.len() - 1
        });
        rows[i].calls += 1;
        rows[i].macs += r.macs;
    }
    rows
}

pub fn write_layer_macs_csv(path: &Path, rows: &[LayerMacs]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Median wall time of `repeats` calls after `warmup` untimed ones.
pub fn median_latency(mut f: impl FnMut(), warmup: usize, repeats: usize) -> f64 {
    for _ in 0..warmup {
        f();
    }
    let mut times: Vec<f64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        (times[n / 2 - 1] + times[n / 2]) / 2.0
    }
}
