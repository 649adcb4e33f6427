use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::input::OutputFormat;

pub const SCHEMA_VERSION: &str = "1";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Envelope shared by every report. `generated_at` is the only field that
/// differs between identical runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report<T> {
    pub schema_version: String,
    pub tool_version: String,
    pub generated_at: String,
    pub command: String,
    #[serde(flatten)]
    pub body: T,
}

impl<T> Report<T> {
    pub fn new(command: &str, body: T) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            tool_version: TOOL_VERSION.to_string(),
            generated_at: chrono::Utc::now().to_rfc3339(),
            command: command.to_string(),
            body,
        }
    }
}

/// One-row view of a report for `csv-summary` output.
pub trait Summary {
    fn summary(&self) -> Vec<(&'static str, String)>;
}

/// Shortest round-trip text for a float, in the same form as the JSON reports.
pub fn num(v: f64) -> String {
    serde_json::to_string(&v).expect("floats serialize")
}

pub fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn write_report<T: Serialize + Summary>(
    out: &mut dyn Write,
    report: &Report<T>,
    format: OutputFormat,
) -> std::io::Result<()> {
    match format {
        OutputFormat::Json => {
            serde_json::to_writer_pretty(&mut *out, report)?;
            writeln!(out)
        }
        OutputFormat::CsvSummary => {
            let mut fields = vec![
                ("schema_version", report.schema_version.clone()),
                ("command", report.command.clone()),
            ];
            fields.extend(report.body.summary());
            let mut w = csv::Writer::from_writer(out);
            w.write_record(fields.iter().map(|(k, _)| *k))?;
            w.write_record(fields.iter().map(|(_, v)| v.as_str()))?;
            w.flush()
        }
    }
}
