//! Study CSV to SVG: loss and perplexity against step, one polyline per cell.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::util::{read_to_string, write_atomic};

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];
const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 260.0;
const MARGIN: f64 = 48.0;

type Series = BTreeMap<String, Vec<(f64, f64, f64)>>;

fn read_series(text: &str) -> Result<Series> {
    let mut rdr = csv::Reader::from_reader(text.as_bytes());
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name}")))
    };
    let (id, step, loss, ppl) = (col("cell_id")?, col("step")?, col("loss")?, col("ppl")?);
    let mut series: Series = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let num = |c: usize, name: &str| -> Result<f64> {
            row.get(c)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Schema(format!("row {}: column {name} is not a finite number", i + 2)))
        };
        let key = row.get(id).unwrap_or_default().to_string();
        series.entry(key).or_default().push((num(step, "step")?, num(loss, "loss")?, num(ppl, "ppl")?));
    }
    if series.is_empty() {
        return Err(Error::Schema("no data rows".into()));
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(series)
}

fn panel(svg: &mut String, series: &Series, x0: f64, title: &str, pick: fn(&(f64, f64, f64)) -> f64) {
    let all = series.values().flatten();
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in all {
        xmin = xmin.min(p.0);
        xmax = xmax.max(p.0);
        ymin = ymin.min(pick(p));
        ymax = ymax.max(pick(p));
    }
    if xmax <= xmin {
        xmax = xmin + 1.0;
    }
    if ymax <= ymin {
        ymax = ymin + 1.0;
    }
    let (w, h) = (PANEL_W - 2.0 * MARGIN, PANEL_H - 2.0 * MARGIN);
    let sx = |x: f64| x0 + MARGIN + (x - xmin) / (xmax - xmin) * w;
    let sy = |y: f64| MARGIN + h - (y - ymin) / (ymax - ymin) * h;
    let _ = writeln!(
        svg,
        r#"<rect x="{:.1}" y="{MARGIN:.1}" width="{w:.1}" height="{h:.1}" fill="none" stroke="gray"/>"#,
        x0 + MARGIN
    );
    let _ = writeln!(svg, r#"<text x="{:.1}" y="24" font-size="14">{title}</text>"#, x0 + MARGIN);
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="10">{xmin}</text><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{xmax}</text>"#,
        x0 + MARGIN,
        MARGIN + h + 14.0,
        x0 + MARGIN + w,
        MARGIN + h + 14.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{ymax:.3}</text><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{ymin:.3}</text>"#,
        x0 + MARGIN - 4.0,
        MARGIN + 4.0,
        x0 + MARGIN - 4.0,
        MARGIN + h
    );
    for (i, (_, pts)) in series.iter().enumerate() {
        let coords: Vec<String> = pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.0), sy(pick(p)))).collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            coords.join(" ")
        );
    }
}

/// Render study CSV text. Identical input gives identical bytes.
pub fn render_svg(csv_text: &str) -> Result<String> {
    let series = read_series(csv_text)?;
    let legend_h = 16.0 * series.len() as f64 + 8.0;
    let (width, height) = (2.0 * PANEL_W, PANEL_H + legend_h);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif">"#
    );
    panel(&mut svg, &series, 0.0, "training loss", |p| p.1);
    panel(&mut svg, &series, PANEL_W, "perplexity", |p| p.2);
    for (i, id) in series.keys().enumerate() {
        let y = PANEL_H + 12.0 + 16.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<rect x="{MARGIN:.1}" y="{:.1}" width="10" height="10" fill="{}"/><text x="{:.1}" y="{y:.1}" font-size="11">{}</text>"#,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            MARGIN + 16.0,
            escape(id)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Write `{stem}.svg` into `out_dir` for each CSV.
pub fn plot_files(csvs: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for path in csvs {
        let svg = render_svg(&read_to_string(path)?)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
        let target = out_dir.join(format!("{stem}.svg"));
        write_atomic(&target, svg.as_bytes())?;
        written.push(target);
    }
    Ok(written)
}
