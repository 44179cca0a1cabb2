//! CSV ingestion and number formatting shared by the file interfaces.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Render a float with 17 significant digits (round-trip exact for `f64`).
pub fn fmt_num(x: f64) -> String {
    format!("{x:.16e}")
}

/// Pretty JSON whose floats carry 17 significant digits.
struct Sig17<'a>(serde_json::ser::PrettyFormatter<'a>);

impl serde_json::ser::Formatter for Sig17<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()> {
        writer.write_all(fmt_num(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> std::io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }

    fn begin_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.begin_array(writer)
    }

    fn end_array<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.end_array(writer)
    }

    fn begin_array_value<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(writer, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(writer)
    }

    fn begin_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.begin_object(writer)
    }

    fn end_object<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.end_object(writer)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, writer: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(writer, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(writer)
    }

    fn end_object_value<W: ?Sized + Write>(&mut self, writer: &mut W) -> std::io::Result<()> {
        self.0.end_object_value(writer)
    }
}

/// Serialize to pretty JSON with every float rendered by [`fmt_num`]. Non-finite floats become `null`.
pub fn to_json<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(serde_json::ser::PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// How the numeric columns of a returns file should be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ReturnsKind {
    /// Log-price increments, used as-is.
    #[default]
    Log,
    /// Simple returns `r`, converted to `ln(1 + r)`.
    Simple,
}

/// A table of per-step log returns with its (opaque) date labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsTable {
    pub dates: Vec<String>,
    pub assets: Vec<String>,
    /// T x n log-price increments.
    pub log_returns: DMatrix<f64>,
}

impl ReturnsTable {
    pub fn len(&self) -> usize {
        self.log_returns.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Read `date, asset_1, ..., asset_n`. Dates are carried verbatim and never parsed.
pub fn read_returns_csv<R: Read>(reader: R, kind: ReturnsKind) -> Result<ReturnsTable> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Input("returns csv needs a date column and at least one asset".into()));
    }
    let assets: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    let n = assets.len();
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // header is line 1
        let line = i + 2;
        let record = record?;
        if record.len() != n + 1 {
            return Err(Error::Input(format!(
                "row {line}: expected {} fields, found {}",
                n + 1,
                record.len()
            )));
        }
        dates.push(record[0].to_owned());
        for (j, field) in record.iter().skip(1).enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                Error::Input(format!("row {line}, column {}: cannot parse {field:?}", j + 2))
            })?;
            let v = match kind {
                ReturnsKind::Log => v,
                ReturnsKind::Simple => {
                    if v <= -1.0 {
                        return Err(Error::Input(format!(
                            "row {line}, column {}: simple return {v} <= -1",
                            j + 2
                        )));
                    }
                    v.ln_1p()
                }
            };
            if !v.is_finite() {
                return Err(Error::Input(format!("row {line}, column {}: non-finite value", j + 2)));
            }
            values.push(v);
        }
    }
    let t = dates.len();
    Ok(ReturnsTable {
        dates,
        assets,
        log_returns: DMatrix::from_row_slice(t, n, &values),
    })
}

pub fn write_returns_csv<W: Write>(writer: W, table: &ReturnsTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["date".to_owned()];
    header.extend(table.assets.iter().cloned());
    w.write_record(&header)?;
    for (i, date) in table.dates.iter().enumerate() {
        let mut row = vec![date.clone()];
        row.extend(table.log_returns.row(i).iter().map(|v| fmt_num(*v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
