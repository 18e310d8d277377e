//! CSV rendering and staged writing of output directories.

use std::fs;
use std::io;
use std::path::Path;

use dvoc::analysis::DroopCurve;
use dvoc::Trace;
use sha2::{Digest, Sha256};

pub const TRACE_COLUMNS: [&str; 8] = ["v_alpha", "v_beta", "i_alpha", "i_beta", "p", "q", "vmag", "theta"];

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
}

/// `{}` on f64 is the shortest representation that round-trips.
fn num(x: f64) -> String {
    format!("{x}")
}

pub fn trace_csv(trace: &Trace) -> String {
    let mut w = writer();
    let mut header = vec!["t".to_string()];
    for inv in &trace.inverters {
        header.extend(TRACE_COLUMNS.iter().map(|c| format!("{}.{c}", inv.id)));
    }
    w.write_record(&header).unwrap();
    for k in 0..trace.len() {
        let mut row = vec![num(trace.time[k])];
        for c in &trace.inverters {
            for x in [c.v_alpha[k], c.v_beta[k], c.i_alpha[k], c.i_beta[k], c.p[k], c.q[k], c.vmag[k], c.theta[k]] {
                row.push(num(x));
            }
        }
        w.write_record(&row).unwrap();
    }
    finish(w)
}

/// Rows of `(metric, inverter, value)`.
#[derive(Debug, Default)]
pub struct Metrics(pub Vec<(String, String, String)>);

impl Metrics {
    pub fn push(&mut self, metric: &str, inverter: &str, value: f64) {
        self.0.push((metric.into(), inverter.into(), num(value)));
    }

    pub fn push_text(&mut self, metric: &str, inverter: &str, value: &str) {
        self.0.push((metric.into(), inverter.into(), value.into()));
    }

    pub fn push_opt(&mut self, metric: &str, inverter: &str, value: Option<f64>) {
        match value {
            Some(v) => self.push(metric, inverter, v),
            None => self.push_text(metric, inverter, "undefined"),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = writer();
        w.write_record(["metric", "inverter", "value"]).unwrap();
        for (m, i, v) in &self.0 {
            w.write_record([m, i, v]).unwrap();
        }
        finish(w)
    }
}

pub fn curves_csv(curves: &[(&str, &DroopCurve)]) -> String {
    let mut w = writer();
    w.write_record(["curve", "x", "y"]).unwrap();
    for (name, c) in curves {
        for &(x, y) in &c.points {
            w.write_record([name.to_string(), num(x), num(y)]).unwrap();
        }
    }
    finish(w)
}

pub fn columns_csv(header: &[&str], columns: &[&[f64]]) -> String {
    let mut w = writer();
    w.write_record(header).unwrap();
    let n = columns.first().map_or(0, |c| c.len());
    for k in 0..n {
        w.write_record(columns.iter().map(|c| num(c[k]))).unwrap();
    }
    finish(w)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Writes all files at once; nothing is written unless every file is ready.
pub fn write_all(dir: &Path, files: &[(String, String)]) -> io::Result<()> {
    fs::create_dir_all(dir)?;
    for (name, contents) in files {
        fs::write(dir.join(name), contents)?;
    }
    Ok(())
}
