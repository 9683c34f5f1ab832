//! Metric reports as CSV rows plus a JSON summary, and the training loss log.
//! Non-finite numbers are written as the strings `inf`, `-inf` and `nan`.

use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use tvsr_core::metrics::{CaseRow, Comparison, MeanStd, MetricReport, SlicePairTable};

use crate::error::{read_file, write_file, Error, Result};

/// An `f64` that survives JSON even when infinite.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Num(pub f64);

impl Serialize for Num {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else {
            s.serialize_str(&self.0.to_string())
        }
    }
}

impl<'de> Deserialize<'de> for Num {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            F(f64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::F(x) => Ok(Num(x)),
            Raw::S(s) => s.parse().map(Num).map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonRow {
    pub id: String,
    pub psnr: Num,
    pub ssim: Num,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonStat {
    pub mean: Num,
    pub std: Num,
    pub display: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonSummary {
    pub psnr: JsonStat,
    pub ssim: JsonStat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonComparison {
    pub label: String,
    pub cases: usize,
    pub p_psnr: Num,
    pub p_ssim: Num,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonReport {
    pub method: String,
    pub cases: usize,
    pub summary: JsonSummary,
    pub comparisons: Vec<JsonComparison>,
    pub rows: Vec<JsonRow>,
}

fn stat(m: &MeanStd) -> JsonStat {
    JsonStat { mean: Num(m.mean), std: Num(m.std), display: m.display() }
}

impl From<&MetricReport> for JsonReport {
    fn from(r: &MetricReport) -> Self {
        Self {
            method: r.method.clone(),
            cases: r.rows.len(),
            summary: JsonSummary { psnr: stat(&r.psnr), ssim: stat(&r.ssim) },
            comparisons: r
                .comparisons
                .iter()
                .map(|c| JsonComparison {
                    label: c.label.clone(),
                    cases: c.cases,
                    p_psnr: Num(c.p_psnr),
                    p_ssim: Num(c.p_ssim),
                })
                .collect(),
            rows: r.rows.iter().map(|c| JsonRow { id: c.id.clone(), psnr: Num(c.psnr), ssim: Num(c.ssim) }).collect(),
        }
    }
}

impl From<JsonReport> for MetricReport {
    fn from(j: JsonReport) -> Self {
        let rows = j.rows.into_iter().map(|r| CaseRow { id: r.id, psnr: r.psnr.0, ssim: r.ssim.0 }).collect();
        let mut report = MetricReport::new(j.method, rows);
        report.comparisons = j
            .comparisons
            .into_iter()
            .map(|c| Comparison { label: c.label, cases: c.cases, p_psnr: c.p_psnr.0, p_ssim: c.p_ssim.0 })
            .collect();
        report
    }
}

pub fn report_json(report: &MetricReport) -> String {
    let mut s = serde_json::to_string_pretty(&JsonReport::from(report)).unwrap();
    s.push('\n');
    s
}

pub fn report_csv(report: &MetricReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "psnr", "ssim"]).unwrap();
    for r in &report.rows {
        w.write_record([r.id.clone(), r.psnr.to_string(), r.ssim.to_string()]).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn emit_report(report: &MetricReport, csv_path: &Path, json_path: &Path) -> Result<()> {
    write_file(csv_path, report_csv(report).as_bytes())?;
    write_file(json_path, report_json(report).as_bytes())
}

pub fn read_report_json(path: &Path) -> Result<MetricReport> {
    let bytes = read_file(path)?;
    let j: JsonReport = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Data(format!("{}: not a metric report: {e}", path.display())))?;
    Ok(j.into())
}

pub fn read_report_csv(path: &Path, method: &str) -> Result<MetricReport> {
    let bytes = read_file(path)?;
    let mut rows = Vec::new();
    for rec in csv::Reader::from_reader(&bytes[..]).records() {
        let rec = rec.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let num = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Data(format!("{}: bad row {:?}", path.display(), rec)))
        };
        rows.push(CaseRow { id: rec.get(0).unwrap_or_default().to_string(), psnr: num(1)?, ssim: num(2)? });
    }
    Ok(MetricReport::new(method, rows))
}

#[derive(Serialize)]
struct JsonCategory<'a> {
    category: &'a str,
    pairs: usize,
    psnr: Num,
    ssim: Num,
}

#[derive(Serialize)]
struct JsonOmitted<'a> {
    category: &'a str,
    reason: &'a str,
}

#[derive(Serialize)]
struct JsonSlicePairs<'a> {
    rows: Vec<JsonCategory<'a>>,
    omitted: Vec<JsonOmitted<'a>>,
}

pub fn slice_pairs_json(t: &SlicePairTable) -> String {
    let j = JsonSlicePairs {
        rows: t
            .rows
            .iter()
            .map(|r| JsonCategory { category: r.category.name(), pairs: r.pairs, psnr: Num(r.psnr), ssim: Num(r.ssim) })
            .collect(),
        omitted: t.omitted.iter().map(|(c, why)| JsonOmitted { category: c.name(), reason: why }).collect(),
    };
    let mut s = serde_json::to_string_pretty(&j).unwrap();
    s.push('\n');
    s
}

pub fn slice_pairs_text(t: &SlicePairTable) -> String {
    let mut s = format!("{:<8}{:>8}{:>12}{:>10}\n", "pair", "count", "psnr", "ssim");
    for r in &t.rows {
        s.push_str(&format!("{:<8}{:>8}{:>12.3}{:>10.4}\n", r.category.name(), r.pairs, r.psnr, r.ssim));
    }
    for (c, why) in &t.omitted {
        s.push_str(&format!("{:<8}omitted: {why}\n", c.name()));
    }
    s
}

pub fn loss_csv(losses: &[f32], first_step: u64) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "loss"]).unwrap();
    for (i, l) in losses.iter().enumerate() {
        w.write_record([(first_step + i as u64 + 1).to_string(), l.to_string()]).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report() -> MetricReport {
        let rows = vec![
            CaseRow { id: "0003".into(), psnr: 31.25, ssim: 0.912345678 },
            CaseRow { id: "0007".into(), psnr: f64::INFINITY, ssim: 1.0 },
        ];
        let mut r = MetricReport::new("full", rows);
        r.comparisons.push(Comparison { label: "full vs no_tab".into(), cases: 2, p_psnr: 0.25, p_ssim: 0.5 });
        r
    }

    #[test]
    fn json_round_trip_keeps_infinity() {
        let r = report();
        let text = report_json(&r);
        assert!(text.contains("\"inf\""));
        let back: MetricReport = serde_json::from_str::<JsonReport>(&text).unwrap().into();
        assert_eq!(back.rows, r.rows);
        assert_eq!(back.comparisons, r.comparisons);
        assert_eq!(report_json(&back), text);
    }

    #[test]
    fn single_case_std_is_zero() {
        let r = MetricReport::new("m", vec![CaseRow { id: "a".into(), psnr: 30.0, ssim: 0.9 }]);
        let j = JsonReport::from(&r);
        assert_eq!(j.summary.psnr.std, Num(0.0));
        assert_eq!(j.summary.psnr.display, "30.000 ± 0.000");
    }

    #[test]
    fn csv_lists_rows() {
        let c = report_csv(&report());
        assert_eq!(c, "id,psnr,ssim\n0003,31.25,0.912345678\n0007,inf,1\n");
        assert_eq!(loss_csv(&[0.5, 0.25], 10), "step,loss\n11,0.5\n12,0.25\n");
    }
}
