//! CSV rows and a standalone SVG line chart.

use std::fmt::Write as _;
use std::io::Write;

use serde::Serialize;

use crate::{cost::feasible_single_gpu, PerfReport, ScalingCurve, FEASIBILITY_OVERHEAD};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CsvRow {
    pub model: String,
    #[serde(rename = "N")]
    pub n: f64,
    pub gpus: usize,
    pub tp: usize,
    pub phase: String,
    pub seconds: f64,
    pub tflops_per_gpu: f64,
    pub hours: f64,
    pub dollars: f64,
    pub feasible: bool,
}

/// Three rows per report: gen, train and their combination.
pub fn rows(r: &PerfReport, mem_bytes: f64) -> Vec<CsvRow> {
    let feasible = r.gpus > 1 || feasible_single_gpu(r.params, mem_bytes, FEASIBILITY_OVERHEAD);
    [
        ("gen", r.gen_seconds, r.gen_tflops),
        ("train", r.train_seconds, r.train_tflops),
        ("effective", r.gen_seconds + r.train_seconds, r.effective_tflops),
    ]
    .into_iter()
    .map(|(phase, seconds, tf)| CsvRow {
        model: r.model.clone(),
        n: r.params,
        gpus: r.gpus,
        tp: r.tp,
        phase: phase.into(),
        seconds,
        tflops_per_gpu: tf,
        hours: r.epoch_hours,
        dollars: r.dollars,
        feasible,
    })
    .collect()
}

pub fn write_csv<W: Write>(out: W, rows: &[CsvRow]) -> crate::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;

/// Throughput per GPU against GPU count on a log2 x axis.
pub fn svg(curve: &ScalingCurve, title: &str) -> String {
    let pts = &curve.points;
    let series: [(&str, &str, fn(&PerfReport) -> f64); 3] = [
        ("generation", "#1f77b4", |r| r.gen_tflops),
        ("training", "#ff7f0e", |r| r.train_tflops),
        ("effective", "#2ca02c", |r| r.effective_tflops),
    ];
    let ymax = pts
        .iter()
        .flat_map(|p| series.iter().map(move |s| (s.2)(&p.report)))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let xs: Vec<f64> = pts.iter().map(|p| (p.gpus as f64).log2()).collect();
    let (x0, x1) = (
        xs.first().copied().unwrap_or(0.0),
        xs.last().copied().unwrap_or(1.0),
    );
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| PAD + (x - x0) / span * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - y / ymax * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    for (p, &x) in pts.iter().zip(&xs) {
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(x),
            H - PAD + 18.0,
            p.gpus
        );
    }
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            PAD - 6.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">GPUs</text>"#, W / 2.0, H - 16.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" transform="rotate(-90 16 {})" text-anchor="middle">TFLOPs per GPU</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (k, (name, color, f)) in series.iter().enumerate() {
        let path: Vec<String> = pts
            .iter()
            .zip(&xs)
            .map(|(p, &x)| format!("{:.1},{:.1}", px(x), py(f(&p.report))))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            path.join(" ")
        );
        let ly = PAD + 16.0 * k as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{a}" y1="{ly}" x2="{b}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{c}" y="{t}">{name}</text>"#,
            a = W - PAD - 110.0,
            b = W - PAD - 90.0,
            c = W - PAD - 84.0,
            t = ly + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{evaluate, scaling_curve, HardwareSpec, MemoryOptions, WorkloadSpec};

    #[test]
    fn csv_header_and_rows() {
        let w = WorkloadSpec::new("1.3b", "350m").unwrap();
        let hw = HardwareSpec::preset("a100-80g", 8).unwrap();
        let r = evaluate(&w, &hw, 8, 1, MemoryOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows(&r, hw.mem_bytes)).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "model,N,gpus,tp,phase,seconds,tflops_per_gpu,hours,dollars,feasible"
        );
        assert_eq!(lines.count(), 3);
    }

    #[test]
    fn svg_has_three_series() {
        let w = WorkloadSpec::new("13b", "350m").unwrap();
        let hw = HardwareSpec::preset("a100-40g", 8).unwrap();
        let c = scaling_curve(&w, &hw, &[8, 16, 32], MemoryOptions::default()).unwrap();
        let s = svg(&c, "13b <a100>");
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert_eq!(s.matches("<polyline").count(), 3);
        assert!(s.contains("&lt;a100&gt;"));
    }
}
