//! Run reports as text records.
//!
//! Fixed keys, one per line, in this order (optional keys omitted when unset):
//!
//! | key | meaning |
//! |---|---|
//! | `final_accuracy` | test accuracy in [0,1] |
//! | `parameter_count` | trained model parameters |
//! | `teacher_parameter_count` | teacher parameters, distillation runs only |
//! | `compression_factor` | teacher / student parameter ratio |
//! | `latency_batch_size`, `latency_warmup`, `latency_reps` | benchmark protocol |
//! | `latency_mean_ms`, `latency_p50_ms`, `latency_p95_ms` | per-batch forward time |
//! | `wall_clock_s` | run duration |
//! | `config.<name>` | the run configuration echo |
//!
//! followed by the `epoch,loss_total,loss_hard,loss_kl,acc` header and one
//! CSV row per epoch.

use std::path::Path;

use super::record::Record;
use super::{read_file, write_file, DataError};

pub const EPOCH_HEADER: &str = "epoch,loss_total,loss_hard,loss_kl,acc";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_hard: f64,
    pub loss_kl: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatencyStats {
    pub batch_size: usize,
    pub warmup: usize,
    pub reps: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencyStats {
    /// Speedup of `self` relative to `reference` (reference mean / own mean).
    pub fn speedup_over(&self, reference: &LatencyStats) -> f64 {
        reference.mean_ms / self.mean_ms
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsReport {
    pub final_accuracy: f64,
    pub parameter_count: usize,
    pub teacher_parameter_count: Option<usize>,
    pub compression_factor: Option<f64>,
    pub latency: Option<LatencyStats>,
    pub wall_clock_s: f64,
    pub config: Record,
    pub epochs: Vec<EpochRow>,
}

impl MetricsReport {
    pub fn render(&self) -> String {
        let mut r = Record::new();
        r.set("final_accuracy", self.final_accuracy);
        r.set("parameter_count", self.parameter_count);
        if let Some(t) = self.teacher_parameter_count {
            r.set("teacher_parameter_count", t);
        }
        if let Some(c) = self.compression_factor {
            r.set("compression_factor", c);
        }
        if let Some(l) = &self.latency {
            r.set("latency_batch_size", l.batch_size);
            r.set("latency_warmup", l.warmup);
            r.set("latency_reps", l.reps);
            r.set("latency_mean_ms", l.mean_ms);
            r.set("latency_p50_ms", l.p50_ms);
            r.set("latency_p95_ms", l.p95_ms);
        }
        r.set("wall_clock_s", self.wall_clock_s);
        for (k, v) in self.config.iter() {
            r.set(&format!("config.{k}"), v);
        }
        let mut out = r.render();
        out.push_str(EPOCH_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.loss_total, e.loss_hard, e.loss_kl, e.acc
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<MetricsReport, DataError> {
        let mut lines = text.lines().enumerate();
        let mut rec = Record::new();
        let mut saw_header = false;
        for (i, line) in lines.by_ref() {
            if line == EPOCH_HEADER {
                saw_header = true;
                break;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = Record::parse_line(line, i + 1)?;
            rec.set(&k, v);
        }
        if !saw_header {
            return Err(DataError::Parse {
                line: text.lines().count() + 1,
                message: format!("missing `{EPOCH_HEADER}` section"),
            });
        }
        let mut epochs = Vec::new();
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |m: String| DataError::Parse {
                line: i + 1,
                message: m,
            };
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(format!("expected 5 fields, found {}", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}")));
            epochs.push(EpochRow {
                epoch: f[0].parse().map_err(|e| bad(format!("{:?}: {e}", f[0])))?,
                loss_total: num(f[1])?,
                loss_hard: num(f[2])?,
                loss_kl: num(f[3])?,
                acc: num(f[4])?,
            });
        }

        let required = |k: &str| {
            rec.get(k)
                .is_some()
                .then_some(())
                .ok_or_else(|| DataError::Parse {
                    line: 0,
                    message: format!("missing key {k}"),
                })
        };
        required("final_accuracy")?;
        required("parameter_count")?;
        required("wall_clock_s")?;
        let latency = match rec.get("latency_mean_ms") {
            None => None,
            Some(_) => Some(LatencyStats {
                batch_size: rec.get_parsed("latency_batch_size")?.unwrap_or(0),
                warmup: rec.get_parsed("latency_warmup")?.unwrap_or(0),
                reps: rec.get_parsed("latency_reps")?.unwrap_or(0),
                mean_ms: rec.get_parsed("latency_mean_ms")?.unwrap_or(0.0),
                p50_ms: rec.get_parsed("latency_p50_ms")?.unwrap_or(0.0),
                p95_ms: rec.get_parsed("latency_p95_ms")?.unwrap_or(0.0),
            }),
        };
        let mut config = Record::new();
        for (k, v) in rec.iter() {
            if let Some(name) = k.strip_prefix("config.") {
                config.set(name, v);
            }
        }
        Ok(MetricsReport {
            final_accuracy: rec.get_parsed("final_accuracy")?.expect("checked"),
            parameter_count: rec.get_parsed("parameter_count")?.expect("checked"),
            teacher_parameter_count: rec.get_parsed("teacher_parameter_count")?,
            compression_factor: rec.get_parsed("compression_factor")?,
            latency,
            wall_clock_s: rec.get_parsed("wall_clock_s")?.expect("checked"),
            config,
            epochs,
        })
    }
}

pub fn write_metrics(report: &MetricsReport, path: &Path) -> Result<(), DataError> {
    write_file(path, report.render().as_bytes())
}

pub fn read_metrics(path: &Path) -> Result<MetricsReport, DataError> {
    let bytes = read_file(path)?;
    MetricsReport::parse(&String::from_utf8_lossy(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricsReport {
        let mut config = Record::new();
        config.set("mode", "kd_ig");
        config.set("temperature", 2.5);
        MetricsReport {
            final_accuracy: 0.9245,
            parameter_count: 543_718,
            teacher_parameter_count: Some(2_218_886),
            compression_factor: Some(2_218_886.0 / 543_718.0),
            latency: Some(LatencyStats {
                batch_size: 128,
                warmup: 10,
                reps: 100,
                mean_ms: 13.25,
                p50_ms: 13.0,
                p95_ms: 14.5,
            }),
            wall_clock_s: 1.5,
            config,
            epochs: vec![
                EpochRow {
                    epoch: 1,
                    loss_total: 2.1,
                    loss_hard: 2.0,
                    loss_kl: 0.1,
                    acc: 0.3,
                },
                EpochRow {
                    epoch: 2,
                    loss_total: 1.0 / 3.0,
                    loss_hard: 0.25,
                    loss_kl: 1e-9,
                    acc: 0.5,
                },
            ],
        }
    }

    #[test]
    fn accuracy_line_is_literal() {
        assert!(report()
            .render()
            .lines()
            .any(|l| l == "final_accuracy=0.9245"));
    }

    #[test]
    fn empty_epochs_leave_header_only() {
        let mut r = report();
        r.epochs.clear();
        let text = r.render();
        assert!(text.ends_with(&format!("{EPOCH_HEADER}\n")));
        assert_eq!(MetricsReport::parse(&text).unwrap(), r);
    }

    #[test]
    fn parse_back_equals() {
        let r = report();
        assert_eq!(MetricsReport::parse(&r.render()).unwrap(), r);
        let bare = MetricsReport {
            final_accuracy: 0.5,
            ..MetricsReport::default()
        };
        assert_eq!(MetricsReport::parse(&bare.render()).unwrap(), bare);
    }

    #[test]
    fn bad_rows_positioned() {
        let mut text = report().render();
        text.push_str("3,1,2\n");
        let err = MetricsReport::parse(&text).unwrap_err();
        assert!(matches!(err, DataError::Parse { .. }), "{err}");
        assert!(MetricsReport::parse("final_accuracy=1\n").is_err());
    }
}
