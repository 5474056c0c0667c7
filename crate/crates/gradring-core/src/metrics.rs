//! Per-step training metrics and their CSV serialization.
//!
//! The CSV layout is fixed: `step,sim_time_s,loss,bytes_comm,util_w0..
//! util_wN,skipped`. Floats are written with Rust's shortest round-trip
//! formatting, so writing, parsing, and re-writing a file reproduces it
//! byte for byte.

use std::io::{self, BufRead, Write};

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub sim_time_s: f64,
    pub loss: f64,
    pub bytes_comm: u64,
    pub utils: Vec<f64>,
    pub skipped: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("csv parse error on line {0}: {1}")]
    Parse(usize, String),
}

pub fn csv_header(workers: usize) -> String {
    let mut s = String::from("step,sim_time_s,loss,bytes_comm");
    for w in 0..workers {
        s.push_str(&format!(",util_w{w}"));
    }
    s.push_str(",skipped");
    s
}

pub fn write_csv(rows: &[MetricsRow], workers: usize, out: &mut impl Write) -> io::Result<()> {
    writeln!(out, "{}", csv_header(workers))?;
    for r in rows {
        debug_assert_eq!(r.utils.len(), workers);
        write!(out, "{},{},{},{}", r.step, r.sim_time_s, r.loss, r.bytes_comm)?;
        for u in &r.utils {
            write!(out, ",{u}")?;
        }
        writeln!(out, ",{}", if r.skipped { 1 } else { 0 })?;
    }
    Ok(())
}

pub fn parse_csv(input: impl BufRead) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if !line.starts_with("step,sim_time_s,loss,bytes_comm") {
                return Err(MetricsError::Parse(1, "unexpected header".into()));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 6 {
            return Err(MetricsError::Parse(i + 1, "too few fields".into()));
        }
        let bad = |f: &str| MetricsError::Parse(i + 1, format!("bad field {f:?}"));
        let step = fields[0].parse().map_err(|_| bad(fields[0]))?;
        let sim_time_s = fields[1].parse().map_err(|_| bad(fields[1]))?;
        let loss = fields[2].parse().map_err(|_| bad(fields[2]))?;
        let bytes_comm = fields[3].parse().map_err(|_| bad(fields[3]))?;
        let utils = fields[4..fields.len() - 1]
            .iter()
            .map(|f| f.parse().map_err(|_| bad(f)))
            .collect::<Result<Vec<f64>, _>>()?;
        let skipped = match *fields.last().unwrap() {
            "0" => false,
            "1" => true,
            other => return Err(bad(other)),
        };
        rows.push(MetricsRow {
            step,
            sim_time_s,
            loss,
            bytes_comm,
            utils,
            skipped,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn sample_rows() -> Vec<MetricsRow> {
        vec![
            MetricsRow {
                step: 0,
                sim_time_s: 0.001953125,
                loss: 4.1588830833596715,
                bytes_comm: 35072,
                utils: vec![0.5, 0.25],
                skipped: false,
            },
            MetricsRow {
                step: 1,
                sim_time_s: 0.1,
                loss: std::f64::consts::PI,
                bytes_comm: 0,
                utils: vec![1.0, 0.3333333333333333],
                skipped: true,
            },
        ]
    }

    #[test]
    fn header_matches_layout() {
        assert_eq!(
            csv_header(3),
            "step,sim_time_s,loss,bytes_comm,util_w0,util_w1,util_w2,skipped"
        );
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let rows = sample_rows();
        let mut buf = Vec::new();
        write_csv(&rows, 2, &mut buf).unwrap();
        let parsed = parse_csv(Cursor::new(&buf)).unwrap();
        assert_eq!(parsed, rows);
        let mut buf2 = Vec::new();
        write_csv(&parsed, 2, &mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn hand_written_line_parses() {
        let text = "step,sim_time_s,loss,bytes_comm,util_w0,skipped\n3,0.5,2.25,1024,0.75,1\n";
        let rows = parse_csv(Cursor::new(text)).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].step, 3);
        assert_eq!(rows[0].bytes_comm, 1024);
        assert!(rows[0].skipped);
        assert_eq!(rows[0].utils, vec![0.75]);
    }

    #[test]
    fn malformed_field_is_rejected() {
        let text = "step,sim_time_s,loss,bytes_comm,util_w0,skipped\nx,0.5,2.25,1024,0.75,1\n";
        assert!(parse_csv(Cursor::new(text)).is_err());
    }
}
