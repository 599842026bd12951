use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

/// Confusion counts and class-average accuracy for one device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceReport {
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<u64>>,
    pub class_avg_acc: f64,
    pub n_items: u64,
}

impl DeviceReport {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Self {
        let class_avg_acc = class_average_accuracy(&confusion);
        let n_items = confusion.iter().flatten().sum();
        DeviceReport {
            confusion,
            class_avg_acc,
            n_items,
        }
    }
}

/// Mean per-class recall over the classes that have at least one item.
pub fn class_average_accuracy(confusion: &[Vec<u64>]) -> f64 {
    let recalls: Vec<f64> = confusion
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[c] as f64 / n as f64)
        })
        .collect();
    if recalls.is_empty() {
        0.0
    } else {
        recalls.iter().sum::<f64>() / recalls.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub per_device: BTreeMap<String, DeviceReport>,
    pub source_device: String,
    pub target_devices: Vec<String>,
    /// Class-average accuracy over the pooled target devices.
    pub combined_target_acc: Option<f64>,
    /// Mean of source accuracy and combined target accuracy.
    pub overall_avg: Option<f64>,
}

impl EvalReport {
    /// Builds a report from `(device, true class, predicted class)` triples.
    pub fn from_predictions(
        classes: &[String],
        records: &[(String, usize, usize)],
        source_device: &str,
        target_devices: &[String],
    ) -> Self {
        let k = classes.len();
        let mut conf: BTreeMap<String, Vec<Vec<u64>>> = BTreeMap::new();
        for (dev, t, p) in records {
            conf.entry(dev.clone()).or_insert_with(|| vec![vec![0; k]; k])[*t][*p] += 1;
        }
        let mut combined = vec![vec![0u64; k]; k];
        let mut any_target = false;
        for dev in target_devices {
            match conf.get(dev) {
                Some(m) => {
                    any_target = true;
                    for (crow, mrow) in combined.iter_mut().zip(m) {
                        crow.iter_mut().zip(mrow).for_each(|(a, b)| *a += b);
                    }
                }
                None => log::warn!("target device `{dev}` has no test items; omitted"),
            }
        }
        if !conf.contains_key(source_device) {
            log::warn!("source device `{source_device}` has no test items; omitted");
        }
        let per_device: BTreeMap<String, DeviceReport> = conf
            .into_iter()
            .map(|(d, m)| (d, DeviceReport::from_confusion(m)))
            .collect();
        let combined_target_acc = any_target.then(|| class_average_accuracy(&combined));
        let overall_avg = match (per_device.get(source_device), combined_target_acc) {
            (Some(s), Some(t)) => Some((s.class_avg_acc + t) / 2.0),
            _ => None,
        };
        EvalReport {
            classes: classes.to_vec(),
            per_device,
            source_device: source_device.to_string(),
            target_devices: target_devices.to_vec(),
            combined_target_acc,
            overall_avg,
        }
    }

    pub fn source_acc(&self) -> Option<f64> {
        self.per_device
            .get(&self.source_device)
            .map(|d| d.class_avg_acc)
    }

    /// Human-readable table: one row per device plus the source / target /
    /// averaged summary line.
    pub fn to_table(&self, title: &str) -> String {
        let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
        let targets = self.target_devices.join(",");
        let mut s = String::new();
        let _ = writeln!(s, "Class-average accuracy (%)");
        let _ = writeln!(
            s,
            "{:<28} {:>14} {:>14} {:>10}",
            "",
            format!("{} (source)", self.source_device),
            format!("{targets} (target)"),
            "Averaged"
        );
        let _ = writeln!(
            s,
            "{:<28} {:>14} {:>14} {:>10}",
            title,
            pct(self.source_acc()),
            pct(self.combined_target_acc),
            pct(self.overall_avg)
        );
        let _ = writeln!(s);
        let _ = writeln!(s, "{:<10} {:>8} {:>10}", "device", "items", "acc (%)");
        for (dev, r) in &self.per_device {
            let _ = writeln!(
                s,
                "{:<10} {:>8} {:>10.1}",
                dev,
                r.n_items,
                100.0 * r.class_avg_acc
            );
        }
        s
    }

    /// `device,role,n_items,class_avg_acc` rows.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        let mut s = String::from("device,role,n_items,class_avg_acc\n");
        for (dev, r) in &self.per_device {
            let role = if *dev == self.source_device {
                "source"
            } else if self.target_devices.contains(dev) {
                "target"
            } else {
                "other"
            };
            let _ = writeln!(s, "{dev},{role},{},{:.6}", r.n_items, r.class_avg_acc);
        }
        let n_target: u64 = self
            .target_devices
            .iter()
            .filter_map(|d| self.per_device.get(d))
            .map(|r| r.n_items)
            .sum();
        let _ = writeln!(
            s,
            "{},combined-target,{n_target},{}",
            self.target_devices.join("+"),
            opt(self.combined_target_acc)
        );
        let _ = writeln!(s, "all,averaged,,{}", opt(self.overall_avg));
        s
    }
}
