//! Delimited-text file formats.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! reader returns bit-identical values to what was written.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Field, RingGrid, TrajectoryRecord, TrajectorySet};
use crate::kernel::DiscreteKernel;

pub const FIELD_HEADER: &str = "t,x,value";
pub const TRAJECTORY_HEADER: &str = "vehicle_id,t,x,v";
pub const KERNEL_HEADER: &str = "k,offset_m,weight";
pub const FD_CURVE_HEADER: &str = "rho,v_hat";
pub const LOSS_TRACE_HEADER: &str = "iter,loss_total,loss_data,loss_phy_d,loss_phy_s";

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Data rows of a CSV file as `(line_number, fields)`, header checked.
fn csv_rows<'a>(path: &Path, text: &'a str, header: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == header => {}
        Some((n, h)) => {
            return Err(Error::Parse {
                path: path.into(),
                line: n + 1,
                msg: format!("expected header `{header}`, found `{}`", h.trim()),
            })
        }
        None => {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                msg: "empty file".into(),
            })
        }
    }
    let width = header.split(',').count();
    lines
        .map(|(n, l)| {
            let cols: Vec<&str> = l.split(',').map(str::trim).collect();
            if cols.len() != width {
                return Err(Error::Parse {
                    path: path.into(),
                    line: n + 1,
                    msg: format!("expected {width} columns, found {}", cols.len()),
                });
            }
            Ok((n + 1, cols))
        })
        .collect()
}

fn parse<T: std::str::FromStr>(path: &Path, line: usize, name: &str, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::Parse {
        path: path.into(),
        line,
        msg: format!("cannot parse {name} from `{s}`"),
    })
}

pub fn format_field(field: &Field) -> String {
    let g = field.grid();
    let mut s = String::with_capacity(g.len() * 16);
    s.push_str(FIELD_HEADER);
    s.push('\n');
    for i in 0..g.n_t() {
        let t = g.t(i);
        for (j, v) in field.row(i).iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", t, g.x(j), v);
        }
    }
    s
}

pub fn write_field(path: &Path, field: &Field) -> Result<()> {
    write_text(path, &format_field(field))
}

/// Read a long-format field; coordinates must match `grid` exactly.
pub fn read_field(path: &Path, grid: &RingGrid) -> Result<Field> {
    let text = read_text(path)?;
    let rows = csv_rows(path, &text, FIELD_HEADER)?;
    if rows.len() != grid.len() {
        return Err(Error::Input(format!(
            "{}: {} data rows, grid needs {} x {} = {}",
            path.display(),
            rows.len(),
            grid.n_t(),
            grid.n_x(),
            grid.len()
        )));
    }
    let mut values = Vec::with_capacity(rows.len());
    for (k, (line, cols)) in rows.iter().enumerate() {
        let (i, j) = (k / grid.n_x(), k % grid.n_x());
        let t: f64 = parse(path, *line, "t", cols[0])?;
        let x: f64 = parse(path, *line, "x", cols[1])?;
        if t != grid.t(i) || x != grid.x(j) {
            return Err(Error::Parse {
                path: path.into(),
                line: *line,
                msg: format!(
                    "expected t={} x={}, found t={t} x={x}",
                    grid.t(i),
                    grid.x(j)
                ),
            });
        }
        values.push(parse(path, *line, "value", cols[2])?);
    }
    Field::new(*grid, values)
}

pub fn write_trajectories(path: &Path, traj: &TrajectorySet) -> Result<()> {
    let mut s = String::from(TRAJECTORY_HEADER);
    s.push('\n');
    for r in traj.records() {
        let _ = writeln!(s, "{},{},{},{}", r.vehicle_id, r.t, r.x, r.v);
    }
    write_text(path, &s)
}

pub fn read_trajectories(path: &Path, ring_length_m: f64) -> Result<TrajectorySet> {
    let text = read_text(path)?;
    let rows = csv_rows(path, &text, TRAJECTORY_HEADER)?;
    if rows.is_empty() {
        return Err(Error::Input(format!("{}: no records", path.display())));
    }
    let mut records = Vec::with_capacity(rows.len());
    let mut last: BTreeMap<u64, f64> = BTreeMap::new();
    for (line, cols) in rows {
        let r = TrajectoryRecord {
            vehicle_id: parse(path, line, "vehicle_id", cols[0])?,
            t: parse(path, line, "t", cols[1])?,
            x: parse(path, line, "x", cols[2])?,
            v: parse(path, line, "v", cols[3])?,
        };
        if !(r.x >= 0.0 && r.x < ring_length_m) {
            return Err(Error::Parse {
                path: path.into(),
                line,
                msg: format!(
                    "vehicle {}: position {} outside [0, {ring_length_m})",
                    r.vehicle_id, r.x
                ),
            });
        }
        if let Some(prev) = last.insert(r.vehicle_id, r.t) {
            if !(r.t > prev) {
                return Err(Error::Parse {
                    path: path.into(),
                    line,
                    msg: format!(
                        "vehicle {}: timestamps not strictly increasing ({} after {prev})",
                        r.vehicle_id, r.t
                    ),
                });
            }
        }
        records.push(r);
    }
    TrajectorySet::new(records, ring_length_m)
}

pub fn write_kernel(path: &Path, kernel: &DiscreteKernel) -> Result<()> {
    let mut s = String::from(KERNEL_HEADER);
    s.push('\n');
    for (k, w) in kernel.weights().iter().enumerate() {
        let _ = writeln!(s, "{},{},{}", k, k as f64 * kernel.dx_m(), w);
    }
    write_text(path, &s)
}

pub fn read_kernel(path: &Path) -> Result<DiscreteKernel> {
    let text = read_text(path)?;
    let rows = csv_rows(path, &text, KERNEL_HEADER)?;
    let mut weights = Vec::with_capacity(rows.len());
    let mut dx = None;
    for (n, (line, cols)) in rows.iter().enumerate() {
        let k: usize = parse(path, *line, "k", cols[0])?;
        if k != n {
            return Err(Error::Parse {
                path: path.into(),
                line: *line,
                msg: format!("expected k={n}, found {k}"),
            });
        }
        let off: f64 = parse(path, *line, "offset_m", cols[1])?;
        if k == 1 {
            dx = Some(off);
        }
        weights.push(parse(path, *line, "weight", cols[2])?);
    }
    if weights.is_empty() {
        return Err(Error::Input(format!(
            "{}: no kernel weights",
            path.display()
        )));
    }
    // a one-cell kernel carries no spacing; its cell width is taken as 1 m
    DiscreteKernel::from_weights(weights, dx.unwrap_or(1.0))
}

pub fn write_fd_curve(path: &Path, curve: &[(f64, f64)]) -> Result<()> {
    let mut s = String::from(FD_CURVE_HEADER);
    s.push('\n');
    for (rho, v) in curve {
        let _ = writeln!(s, "{rho},{v}");
    }
    write_text(path, &s)
}

pub fn read_fd_curve(path: &Path) -> Result<Vec<(f64, f64)>> {
    let text = read_text(path)?;
    csv_rows(path, &text, FD_CURVE_HEADER)?
        .into_iter()
        .map(|(line, c)| {
            Ok((
                parse(path, line, "rho", c[0])?,
                parse(path, line, "v_hat", c[1])?,
            ))
        })
        .collect()
}

/// One row of the training loss trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTraceRow {
    pub iter: u64,
    pub total: f64,
    pub data: f64,
    pub phy_d: f64,
    pub phy_s: f64,
}

pub fn format_loss_trace(rows: &[LossTraceRow]) -> String {
    let mut s = String::from(LOSS_TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.iter, r.total, r.data, r.phy_d, r.phy_s
        );
    }
    s
}

pub fn write_loss_trace(path: &Path, rows: &[LossTraceRow]) -> Result<()> {
    write_text(path, &format_loss_trace(rows))
}

pub fn read_loss_trace(path: &Path) -> Result<Vec<LossTraceRow>> {
    let text = read_text(path)?;
    csv_rows(path, &text, LOSS_TRACE_HEADER)?
        .into_iter()
        .map(|(line, c)| {
            Ok(LossTraceRow {
                iter: parse(path, line, "iter", c[0])?,
                total: parse(path, line, "loss_total", c[1])?,
                data: parse(path, line, "loss_data", c[2])?,
                phy_d: parse(path, line, "loss_phy_d", c[3])?,
                phy_s: parse(path, line, "loss_phy_s", c[4])?,
            })
        })
        .collect()
}

/// `key = value` lines in the given order.
pub fn format_summary(entries: &[(String, String)]) -> String {
    let mut s = String::new();
    for (k, v) in entries {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

pub fn read_summary(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = read_text(path)?;
    let mut out = BTreeMap::new();
    for (n, l) in text.lines().enumerate() {
        if l.trim().is_empty() || l.trim_start().starts_with('#') {
            continue;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| Error::Parse {
            path: path.into(),
            line: n + 1,
            msg: "expected `key = value`".into(),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
