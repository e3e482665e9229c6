use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{APReport, AuDiagnostics, IouKind};
use crate::error::{Error, Result};
use crate::synthdata::Difficulty;

pub fn write_report_json(path: &Path, report: &APReport) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_diagnostics_csv(path: &Path, diag: &AuDiagnostics) -> Result<()> {
    let mut text = String::from("au,iou,distance\n");
    for p in &diag.pairs {
        writeln!(text, "{},{},{}", p.au, p.iou, p.distance).expect("string write");
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Two side-by-side scatter plots: AU against IoU and against distance.
pub fn write_scatter_svg(path: &Path, diag: &AuDiagnostics) -> Result<()> {
    const W: f64 = 360.0;
    const H: f64 = 280.0;
    const PAD: f64 = 40.0;
    let au_max = diag.pairs.iter().map(|p| p.au).fold(f64::MIN_POSITIVE, f64::max);
    let dist_max = diag.pairs.iter().map(|p| p.distance).fold(1.0, f64::max);

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="11">"#,
        2.0 * W,
        H
    )
    .expect("string write");
    let panels = [
        ("IoU", 1.0, 0.0, diag.au_vs_iou.rho),
        ("distance (m)", dist_max, W, diag.au_vs_distance.rho),
    ];
    for (i, (label, x_max, x0, rho)) in panels.into_iter().enumerate() {
        let (pw, ph) = (W - 2.0 * PAD, H - 2.0 * PAD);
        writeln!(
            svg,
            r#"<rect x="{}" y="{PAD}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#,
            x0 + PAD
        )
        .expect("string write");
        writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="middle">{label} (rho = {rho:.3})</text>"#,
            x0 + W / 2.0,
            H - 10.0
        )
        .expect("string write");
        writeln!(svg, r#"<text x="{}" y="{}">AU (m^2)</text>"#, x0 + 4.0, PAD - 8.0).expect("string write");
        for p in &diag.pairs {
            let xv = if i == 0 { p.iou } else { p.distance };
            let cx = x0 + PAD + pw * (xv / x_max).clamp(0.0, 1.0);
            let cy = PAD + ph * (1.0 - (p.au / au_max).clamp(0.0, 1.0));
            writeln!(svg, r##"<circle cx="{cx:.1}" cy="{cy:.1}" r="1.5" fill="#3366aa" fill-opacity="0.5"/>"##)
                .expect("string write");
        }
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Aligned text table of AP per metric and difficulty.
pub fn format_table(report: &APReport) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "N/A".to_string(), |a| format!("{a:.2}"));
    let mut out = format!(
        "{:<10}{:>10}{:>10}{:>10}{:>10}\n",
        format!("IoU {}", report.iou_threshold),
        "easy",
        "moderate",
        "hard",
        "mean"
    );
    for kind in IouKind::BOTH {
        let m = report.metric(kind);
        let name = match kind {
            IouKind::Bev => "AP_BEV",
            IouKind::ThreeD => "AP_3D",
        };
        let [e, md, h] = Difficulty::LEVELS.map(|d| cell(m.level(d).ap));
        writeln!(out, "{name:<10}{e:>10}{md:>10}{h:>10}{:>10}", cell(m.mean)).expect("string write");
    }
    out
}
