//! Tabular output: CSV with 17 significant digits, or a JSON array of rows.

use std::io::Write;

use serde::Serialize;

use super::invopt::InvOptRow;
use super::routing::StackelbergRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

/// Scientific notation with 17 significant digits (round-trips every f64).
pub fn fmt_f64(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        v.to_string()
    }
}

pub trait ResultRow: Serialize {
    const HEADER: &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

impl ResultRow for InvOptRow {
    const HEADER: &'static [&'static str] = &[
        "instance_id",
        "seed",
        "theta0",
        "x0",
        "theta_hat",
        "mse_init",
        "mse_final",
        "wall_ms",
        "status",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            self.instance_id.to_string(),
            self.seed.to_string(),
            fmt_f64(self.theta0),
            fmt_f64(self.x0),
            fmt_f64(self.theta_hat),
            fmt_f64(self.mse_init),
            fmt_f64(self.mse_final),
            fmt_f64(self.wall_ms),
            self.status.clone(),
        ]
    }
}

impl ResultRow for StackelbergRow {
    const HEADER: &'static [&'static str] = &[
        "alpha",
        "phi",
        "poa_scale",
        "poa_dual",
        "delay_scale",
        "delay_dual",
        "delay_opt",
        "wall_ms",
        "status",
    ];

    fn fields(&self) -> Vec<String> {
        vec![
            fmt_f64(self.alpha),
            fmt_f64(self.phi),
            fmt_f64(self.poa_scale),
            fmt_f64(self.poa_dual),
            fmt_f64(self.delay_scale),
            fmt_f64(self.delay_dual),
            fmt_f64(self.delay_opt),
            fmt_f64(self.wall_ms),
            self.status.clone(),
        ]
    }
}

pub fn write_csv<R: ResultRow, W: Write>(rows: &[R], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(R::HEADER)?;
    for row in rows {
        w.write_record(row.fields())?;
    }
    w.flush()?;
    Ok(())
}

/// Array of objects keyed like the CSV header. Numbers use serde_json's
/// shortest round-trip representation; non-finite values become `null`.
pub fn write_json<R: ResultRow, W: Write>(rows: &[R], out: W) -> Result<(), serde_json::Error> {
    serde_json::to_writer_pretty(out, rows)
}

pub fn write_rows<R: ResultRow, W: Write>(rows: &[R], format: OutputFormat, mut out: W) -> std::io::Result<()> {
    match format {
        OutputFormat::Csv => write_csv(rows, &mut out).map_err(std::io::Error::other),
        OutputFormat::Json => {
            write_json(rows, &mut out).map_err(std::io::Error::other)?;
            out.write_all(b"\n")
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row() -> StackelbergRow {
        StackelbergRow {
            alpha: 0.1,
            phi: 0.5,
            poa_scale: 1.25,
            poa_dual: 1.0,
            delay_scale: 0.5,
            delay_dual: 0.4,
            delay_opt: 0.4,
            wall_ms: 3.0,
            status: "ok".into(),
        }
    }

    #[test]
    fn floats_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123_456_789.123_456_78] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), v);
        }
        assert_eq!(fmt_f64(0.1), "1.0000000000000001e-1");
        assert_eq!(fmt_f64(f64::NAN), "NaN");
    }

    #[test]
    fn csv_header_only_for_no_rows() {
        let mut buf = Vec::new();
        write_csv::<InvOptRow, _>(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "instance_id,seed,theta0,x0,theta_hat,mse_init,mse_final,wall_ms,status\n"
        );
    }

    #[test]
    fn json_mirrors_csv_columns() {
        let mut buf = Vec::new();
        write_json(&[row()], &mut buf).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&buf).unwrap();
        let obj = v[0].as_object().unwrap();
        let keys: Vec<&str> = obj.keys().map(String::as_str).collect();
        let mut header = StackelbergRow::HEADER.to_vec();
        header.sort_unstable();
        let mut keys_sorted = keys.clone();
        keys_sorted.sort_unstable();
        assert_eq!(keys_sorted, header);
        assert_eq!(obj["poa_scale"], 1.25);
    }
}
