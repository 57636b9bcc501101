//! Metrics summaries, SVG chart and PGM map dumps.

use std::fmt::Write as _;
use std::io::Read;
use std::path::{Path, PathBuf};

use anchorseg_core::config::RunConfig;
use anchorseg_core::model::Model;

use crate::ablate::{MetricsRow, HEADER};
use crate::error::{format_err, Result};
use crate::train::{similarity_grid, Prepared};

/// Parses an ablation CSV; errors name the offending line.
pub fn parse_metrics(text: &str, file: &str) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    let mut header_seen = false;
    for record in reader.records() {
        let record = record.map_err(|e| format_err(file, format!("line {}: {e}", e.position().map_or(0, |p| p.line()))))?;
        let line = record.position().map_or(0, |p| p.line());
        let err = |msg: String| format_err(file, format!("line {line}: {msg}"));
        if !header_seen {
            let got = record.iter().collect::<Vec<_>>().join(",");
            if got != HEADER {
                return Err(err(format!("expected header `{HEADER}`, found `{got}`")));
            }
            header_seen = true;
            continue;
        }
        if record.len() != 7 {
            return Err(err(format!("expected 7 fields, found {}", record.len())));
        }
        let fraction = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = record[i]
                .trim()
                .parse()
                .map_err(|_| err(format!("{name} `{}` is not a number", &record[i])))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(err(format!("{name} {v} outside [0, 1]")));
            }
            Ok(v)
        };
        rows.push(MetricsRow {
            run_id: record[0].to_string(),
            ablation_id: record[1].to_string(),
            seed: record[2]
                .trim()
                .parse()
                .map_err(|_| err(format!("seed `{}` is not an integer", &record[2])))?,
            giou: fraction(3, "giou")?,
            ciou: fraction(4, "ciou")?,
            prec05: fraction(5, "prec05")?,
            nacc: if record[6].trim().is_empty() {
                None
            } else {
                Some(fraction(6, "nacc")?)
            },
        });
    }
    if !header_seen {
        return Err(format_err(file, "line 1: empty metrics file"));
    }
    Ok(rows)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut text = String::new();
    std::fs::File::open(path)?.read_to_string(&mut text)?;
    parse_metrics(&text, &path.display().to_string())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Spread {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

pub fn spread(values: &[f64]) -> Option<Spread> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Some(Spread {
        median,
        min: v[0],
        max: v[n - 1],
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub ablation_id: String,
    pub runs: usize,
    pub giou: Spread,
    pub ciou: Spread,
    pub prec05: Spread,
    pub nacc: Option<Spread>,
}

/// One summary per ablation, in order of first appearance.
pub fn summarize(rows: &[MetricsRow]) -> Vec<Summary> {
    let mut ids: Vec<&str> = Vec::new();
    for r in rows {
        if !ids.contains(&r.ablation_id.as_str()) {
            ids.push(&r.ablation_id);
        }
    }
    ids.into_iter()
        .map(|id| {
            let group: Vec<&MetricsRow> = rows.iter().filter(|r| r.ablation_id == id).collect();
            let col = |f: fn(&MetricsRow) -> f64| spread(&group.iter().map(|r| f(r)).collect::<Vec<_>>()).expect("group is non-empty");
            Summary {
                ablation_id: id.to_string(),
                runs: group.len(),
                giou: col(|r| r.giou),
                ciou: col(|r| r.ciou),
                prec05: col(|r| r.prec05),
                nacc: spread(&group.iter().filter_map(|r| r.nacc).collect::<Vec<_>>()),
            }
        })
        .collect()
}

pub fn format_table(summaries: &[Summary]) -> String {
    let cell = |s: &Spread| format!("{:.3} [{:.3}, {:.3}]", s.median, s.min, s.max);
    let mut out = format!(
        "{:<10} {:>4}  {:<22} {:<22} {:<22} {:<22}\n",
        "ablation", "runs", "gIoU", "cIoU", "P@0.5", "N-acc"
    );
    for s in summaries {
        let _ = writeln!(
            out,
            "{:<10} {:>4}  {:<22} {:<22} {:<22} {:<22}",
            s.ablation_id,
            s.runs,
            cell(&s.giou),
            cell(&s.ciou),
            cell(&s.prec05),
            s.nacc.as_ref().map_or_else(|| "n/a".to_string(), cell)
        );
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Bar chart of median gIoU, one `rect.bar` per ablation.
pub fn render_svg(summaries: &[Summary]) -> String {
    let (bar_w, gap, plot_h, left, top) = (40.0, 16.0, 200.0, 48.0, 24.0);
    let width = left + summaries.len() as f64 * (bar_w + gap) + gap;
    let height = top + plot_h + 48.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n"
    );
    let _ = writeln!(
        svg,
        "  <text x=\"{}\" y=\"16\" font-size=\"12\" text-anchor=\"middle\">median gIoU</text>",
        width / 2.0
    );
    let base = top + plot_h;
    let _ = writeln!(
        svg,
        "  <line x1=\"{left}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"black\"/>",
        width - gap / 2.0
    );
    for tick in [0.0, 0.5, 1.0] {
        let y = base - tick * plot_h;
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{y}\" font-size=\"10\" text-anchor=\"end\">{tick:.1}</text>",
            left - 4.0
        );
    }
    for (i, s) in summaries.iter().enumerate() {
        let x = left + gap + i as f64 * (bar_w + gap);
        let h = s.giou.median.clamp(0.0, 1.0) * plot_h;
        let id = escape(&s.ablation_id);
        let _ = writeln!(
            svg,
            "  <rect class=\"bar\" data-ablation=\"{id}\" x=\"{x}\" y=\"{:.3}\" width=\"{bar_w}\" height=\"{h:.3}\" fill=\"#4a78b0\"/>",
            base - h
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">{id}</text>",
            x + bar_w / 2.0,
            base + 14.0
        );
        let _ = writeln!(
            svg,
            "  <text x=\"{}\" y=\"{:.3}\" font-size=\"9\" text-anchor=\"middle\">{:.3}</text>",
            x + bar_w / 2.0,
            base - h - 3.0,
            s.giou.median
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Plain PGM (`P2`) with 16-bit levels; values are clamped to `[0, 1]`.
pub fn to_pgm(values: &[f32], height: usize, width: usize) -> String {
    let mut out = format!("P2\n{width} {height}\n65535\n");
    for row in values.chunks(width) {
        let line: Vec<String> = row
            .iter()
            .map(|&v| ((v.clamp(0.0, 1.0) as f64) * 65535.0).round().to_string())
            .collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parses a plain PGM back into `(height, width, levels)`.
pub fn parse_pgm(text: &str) -> Result<(usize, usize, Vec<u32>)> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    if tokens.next() != Some("P2") {
        return Err(format_err("pgm", "missing P2 magic"));
    }
    let mut num = |what: &str| -> Result<u32> {
        tokens
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format_err("pgm", format!("bad {what}")))
    };
    let (w, h, _max) = (num("width")? as usize, num("height")? as usize, num("maxval")?);
    let levels = (0..w * h).map(|_| num("pixel")).collect::<Result<Vec<_>>>()?;
    Ok((h, w, levels))
}

/// Writes similarity maps of every held-out sample: the `G × G` grid and the
/// image-resolution map, plus the target mask. Returns the written paths.
pub fn dump_prior_maps(model: &Model<f32>, data: &Prepared, cfg: &RunConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let dims = &cfg.dims;
    let mut written = Vec::new();
    for i in data.eval_range() {
        let (grid, full) = similarity_grid(model, &data.inputs[i], cfg)?;
        let mask: Vec<f32> = data.masks[i].iter().map(|&m| m as u8 as f32).collect();
        for (suffix, values, h, w) in [
            ("grid", grid.data(), dims.grid, dims.grid),
            ("similarity", full.data(), dims.h, dims.w),
            ("mask", &mask[..], dims.h, dims.w),
        ] {
            let path = dir.join(format!("sample_{i:04}_{suffix}.pgm"));
            std::fs::write(&path, to_pgm(values, h, w))?;
            written.push(path);
        }
    }
    Ok(written)
}
