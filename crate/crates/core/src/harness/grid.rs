//! Exhaustive sweeps over (T, alpha, p).

use std::cmp::Ordering;
use std::fmt;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use super::train::{train, TrainConfig, TrainInputs};
use super::HarnessError;
use crate::data::{io_err, write_file, DataError};

pub const GRID_HEADER: &str = "T,alpha,p,val_acc,test_acc,seed";
pub const CELLS_HEADER: &str = "T,alpha,p,val_acc,test_acc,seed,final_loss";
pub const MAX_AXIS: usize = 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeedPolicy {
    /// Every cell trains with the base seed.
    Shared,
    /// Cell `i` in visit order trains with `base seed + i`.
    PerCell,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchSpace {
    pub temperatures: Vec<f64>,
    pub alphas: Vec<f64>,
    pub ps: Vec<f64>,
    pub epochs: usize,
    pub seed_policy: SeedPolicy,
}

fn parse_axis(key: &str, values: &str) -> Result<Vec<f64>, HarnessError> {
    values
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| HarnessError::InvalidConfig(format!("grid axis {key}: `{v}`: {e}")))
        })
        .collect()
}

impl GridSearchSpace {
    /// Parses `T=..;alpha=..;p=..`. Axes left out take the single value in `base`.
    pub fn parse(spec: &str, base: &TrainConfig, epochs: usize) -> Result<Self, HarnessError> {
        let (mut t, mut a, mut p) = (None, None, None);
        for part in spec.split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = part.split_once('=').ok_or_else(|| {
                HarnessError::InvalidConfig(format!("grid axis `{part}` is not key=values"))
            })?;
            let slot = match k.trim() {
                "T" | "temperature" => &mut t,
                "alpha" => &mut a,
                "p" => &mut p,
                other => {
                    return Err(HarnessError::InvalidConfig(format!(
                        "unknown grid axis `{other}` (expected T, alpha or p)"
                    )))
                }
            };
            if slot.is_some() {
                return Err(HarnessError::InvalidConfig(format!(
                    "grid axis `{}` given twice",
                    k.trim()
                )));
            }
            *slot = Some(parse_axis(k.trim(), v)?);
        }
        let space = GridSearchSpace {
            temperatures: t.unwrap_or_else(|| vec![base.temperature]),
            alphas: a.unwrap_or_else(|| vec![base.alpha]),
            ps: p.unwrap_or_else(|| vec![base.overlay_p]),
            epochs,
            seed_policy: SeedPolicy::Shared,
        };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        for (name, axis) in [
            ("T", &self.temperatures),
            ("alpha", &self.alphas),
            ("p", &self.ps),
        ] {
            if axis.is_empty() || axis.len() > MAX_AXIS {
                return Err(HarnessError::InvalidConfig(format!(
                    "grid axis {name} has {} values, expected 1 to {MAX_AXIS}",
                    axis.len()
                )));
            }
            if axis.iter().any(|v| !v.is_finite()) {
                return Err(HarnessError::InvalidConfig(format!(
                    "grid axis {name} has a non-finite value"
                )));
            }
        }
        if self.epochs == 0 {
            return Err(HarnessError::InvalidConfig(
                "grid epochs must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.temperatures.len() * self.alphas.len() * self.ps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All (T, alpha, p) triples, T varying slowest.
    pub fn cells(&self) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(self.len());
        for &t in &self.temperatures {
            for &a in &self.alphas {
                for &p in &self.ps {
                    out.push((t, a, p));
                }
            }
        }
        out
    }
}

impl fmt::Display for GridSearchSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let join = |v: &[f64]| v.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        write!(
            f,
            "T={};alpha={};p={}",
            join(&self.temperatures),
            join(&self.alphas),
            join(&self.ps)
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub temperature: f64,
    pub alpha: f64,
    pub p: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    pub seed: u64,
    /// Mean training loss of the last epoch, the first tie-breaker.
    pub final_loss: f64,
}

/// Higher validation accuracy first, then lower final loss, then (T, alpha, p) ascending.
pub fn compare_cells(a: &GridCell, b: &GridCell) -> Ordering {
    b.val_acc
        .total_cmp(&a.val_acc)
        .then(a.final_loss.total_cmp(&b.final_loss))
        .then(a.temperature.total_cmp(&b.temperature))
        .then(a.alpha.total_cmp(&b.alpha))
        .then(a.p.total_cmp(&b.p))
}

pub fn rank_cells(cells: &mut [GridCell]) {
    cells.sort_by(compare_cells);
}

fn cell_row(c: &GridCell, with_loss: bool) -> String {
    let mut row = format!(
        "{},{},{},{},{},{}",
        c.temperature, c.alpha, c.p, c.val_acc, c.test_acc, c.seed
    );
    if with_loss {
        row.push_str(&format!(",{}", c.final_loss));
    }
    row
}

pub fn render_grid_csv(cells: &[GridCell]) -> String {
    let mut out = format!("{GRID_HEADER}\n");
    for c in cells {
        out.push_str(&cell_row(c, false));
        out.push('\n');
    }
    out
}

pub fn render_cells_csv(cells: &[GridCell]) -> String {
    let mut out = format!("{CELLS_HEADER}\n");
    for c in cells {
        out.push_str(&cell_row(c, true));
        out.push('\n');
    }
    out
}

/// Parses the per-cell file written by [`render_cells_csv`].
pub fn parse_cells_csv(text: &str) -> Result<Vec<GridCell>, DataError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CELLS_HEADER => {}
        _ => {
            return Err(DataError::Parse {
                line: 1,
                message: format!("expected header `{CELLS_HEADER}`"),
            })
        }
    }
    let mut cells = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |m: String| DataError::Parse {
            line: i + 1,
            message: m,
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(format!("`{s}`: {e}")));
        cells.push(GridCell {
            temperature: num(f[0])?,
            alpha: num(f[1])?,
            p: num(f[2])?,
            val_acc: num(f[3])?,
            test_acc: num(f[4])?,
            seed: f[5].parse().map_err(|e| bad(format!("`{}`: {e}", f[5])))?,
            final_loss: num(f[6])?,
        });
    }
    Ok(cells)
}

pub fn write_grid_csv(cells: &[GridCell], path: &Path) -> Result<(), DataError> {
    write_file(path, render_grid_csv(cells).as_bytes())
}

/// Trains every cell once and returns them ranked. Ranking uses
/// `inputs.validation`, which is required. When `progress` is given, each
/// finished cell is appended there immediately, in visit order, so an
/// interrupted sweep keeps its completed cells.
pub fn grid_search(
    space: &GridSearchSpace,
    base: &TrainConfig,
    inputs: &TrainInputs<'_>,
    progress: Option<&Path>,
) -> Result<Vec<GridCell>, HarnessError> {
    space.validate()?;
    if inputs.validation.is_none() {
        return Err(HarnessError::InvalidConfig(
            "grid search needs a validation split".into(),
        ));
    }
    let mut log_file = match progress {
        Some(p) => {
            let mut f = File::create(p)
                .map_err(io_err(p))
                .map_err(HarnessError::Data)?;
            writeln!(f, "{CELLS_HEADER}").map_err(io_err(p))?;
            Some((p, f))
        }
        None => None,
    };
    let mut cells = Vec::with_capacity(space.len());
    for (i, (t, a, p)) in space.cells().into_iter().enumerate() {
        let seed = match space.seed_policy {
            SeedPolicy::Shared => base.seed,
            SeedPolicy::PerCell => base.seed.wrapping_add(i as u64),
        };
        let config = TrainConfig {
            temperature: t,
            alpha: a,
            overlay_p: p,
            epochs: space.epochs,
            seed,
            ..base.clone()
        };
        let out = train(&config, inputs)?;
        let cell = GridCell {
            temperature: t,
            alpha: a,
            p,
            val_acc: out.validation_accuracy.expect("validation given"),
            test_acc: if inputs.test.is_some() {
                out.report.final_accuracy
            } else {
                f64::NAN
            },
            seed,
            final_loss: out.report.epochs.last().map_or(f64::NAN, |e| e.loss_total),
        };
        log::info!(
            "grid cell {}/{}: {}",
            i + 1,
            space.len(),
            cell_row(&cell, true)
        );
        if let Some((path, f)) = log_file.as_mut() {
            writeln!(f, "{}", cell_row(&cell, true)).map_err(io_err(path))?;
            f.flush().map_err(io_err(path))?;
        }
        cells.push(cell);
    }
    rank_cells(&mut cells);
    Ok(cells)
}
