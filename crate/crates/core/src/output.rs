//! Versioned CSV output. Every file starts with a single comment line
//! `# schema=<name>.v<k> tool=chainsgd/<version>`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::experiments::{GdBiasReport, Top1Report};
use crate::operator::Sample;
use crate::optimizer::RunTrace;

pub const TOOL_VERSION: &str = concat!("chainsgd/", env!("CARGO_PKG_VERSION"));

pub const SCHEMA_TRACE: &str = "chainsgd.trace.v1";
pub const SCHEMA_SWEEP: &str = "chainsgd.sweep.v1";
pub const SCHEMA_AGGREGATE: &str = "chainsgd.aggregate.v1";
pub const SCHEMA_BOUNDS: &str = "chainsgd.bounds.v1";
pub const SCHEMA_GD_BIAS: &str = "chainsgd.gd_bias.v1";
pub const SCHEMA_TOP1: &str = "chainsgd.top1.v1";
pub const SCHEMA_SIGMOID: &str = "chainsgd.sigmoid.v1";
pub const SCHEMA_GRADCHECK: &str = "chainsgd.gradcheck.v1";
pub const SCHEMA_DATA: &str = "chainsgd.data.v1";

pub fn header_line(schema: &str) -> String {
    format!("# schema={schema} tool={TOOL_VERSION}\n")
}

pub fn write_csv<W: Write, T: Serialize>(mut out: W, schema: &str, rows: &[T]) -> Result<()> {
    out.write_all(header_line(schema).as_bytes())?;
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_string<T: Serialize>(schema: &str, rows: &[T]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, schema, rows)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

pub fn write_csv_file<T: Serialize>(path: &Path, schema: &str, rows: &[T]) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_csv(f, schema, rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: u64,
    pub grad_norm: f64,
    pub loss: f64,
    pub ewma: f64,
    pub delta_active: bool,
    pub eps_active: bool,
}

pub fn trace_rows(trace: &RunTrace) -> Vec<TraceRow> {
    trace
        .iterations
        .iter()
        .enumerate()
        .map(|(k, &t)| TraceRow {
            t,
            grad_norm: trace.grad_norm[k],
            loss: trace.loss[k],
            ewma: trace.ewma[k],
            delta_active: trace.delta_active.get(t as usize).copied().unwrap_or(false),
            eps_active: trace.eps_active.get(t as usize).copied().unwrap_or(false),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GdBiasRow {
    pub t: usize,
    pub x: f64,
    pub gap: f64,
}

pub fn gd_bias_rows(r: &GdBiasReport) -> Vec<GdBiasRow> {
    r.iterates
        .iter()
        .enumerate()
        .map(|(t, &x)| GdBiasRow {
            t,
            x,
            gap: (x - r.fixed_point).abs(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Top1Row {
    pub t: usize,
    /// Empty once a run has diverged.
    pub clean_norm: Option<f64>,
    pub compressed_norm: Option<f64>,
}

pub fn top1_rows(r: &Top1Report) -> Vec<Top1Row> {
    let n = r.clean_norms.len().max(r.compressed_norms.len());
    (0..n)
        .map(|t| Top1Row {
            t,
            clean_norm: r.clean_norms.get(t).copied(),
            compressed_norm: r.compressed_norms.get(t).copied(),
        })
        .collect()
}

/// `y, h0, h1, …` for labelled samples (`ctx[0]` is the label).
pub fn data_csv_string(samples: &[Sample]) -> Result<String> {
    let mut buf = header_line(SCHEMA_DATA).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let d = samples.first().map_or(0, |s| s.x.len());
        let mut head = vec!["y".to_string()];
        head.extend((0..d).map(|k| format!("h{k}")));
        w.write_record(&head)?;
        for s in samples {
            let mut rec = vec![s.ctx.first().copied().unwrap_or(0.0).to_string()];
            rec.extend(s.x.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}
