//! Bench report emission: CSV and schema-versioned JSON with identical
//! values and a stable column order.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::Result;
use clada_core::runtime::BenchRow;

pub const BENCH_SCHEMA_VERSION: u32 = 1;

pub const BENCH_CSV_HEADER: &str = "mode,prompt_len,gen_len,batch,wall_time_s,cv,\
speedup_vs_dense,dense_wall_s,mean_sparsity,prefill_s,n_layers,d_model,d_h";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.mode,
            r.prompt_len,
            r.gen_len,
            r.batch,
            r.wall_time_s,
            r.cv,
            r.speedup_vs_dense,
            r.dense_wall_s,
            r.mean_sparsity,
            r.prefill_s,
            r.n_layers,
            r.d_model,
            r.d_h
        ));
    }
    out
}

pub fn bench_json(rows: &[BenchRow]) -> Result<String> {
    let value = serde_json::json!({
        "schema_version": BENCH_SCHEMA_VERSION,
        "rows": rows,
    });
    Ok(serde_json::to_string_pretty(&value)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => anyhow::bail!("unknown report format `{other}` (use csv or json)"),
        }
    }
}

pub fn emit_report(rows: &[BenchRow], format: ReportFormat, path: Option<&Path>) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => bench_csv(rows),
        ReportFormat::Json => bench_json(rows)?,
    };
    match path {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p)?);
            f.write_all(body.as_bytes())?;
            f.flush()?;
        }
        None => print!("{body}"),
    }
    Ok(())
}
