//! SVG rendering of the CSV, attention and concept files the other verbs
//! write. File in, file out.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use kgicu::encoder::{read_attention_jsonl, AttentionRecord, NodeRole};
use kgicu::train::ConceptScore;
use kgicu::{Error, Result};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, Copy)]
pub struct Selection {
    pub record: usize,
    pub timestep: Option<usize>,
    pub layer: usize,
}

pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

pub fn render(input: &Path, out: &Path, sel: Selection) -> Result<()> {
    let ext = input.extension().and_then(|e| e.to_str()).unwrap_or("");
    let svg = match ext {
        "jsonl" => attention_svg(&read_attention_jsonl(input)?, sel)?,
        "json" => concepts_svg(&read(input)?)?,
        "csv" => csv_svg(&read(input)?)?,
        _ => {
            return Err(Error::Input(format!(
                "cannot plot `{}`: expected .csv, .jsonl or .json",
                input.display()
            )))
        }
    };
    if out.extension().and_then(|e| e.to_str()) != Some("svg") {
        return Err(Error::Input(format!("output `{}` must end in .svg", out.display())));
    }
    std::fs::write(out, svg).map_err(|source| Error::Io {
        path: out.to_path_buf(),
        source,
    })
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn fmt_tick(v: f64) -> String {
    if v.abs() >= 100.0 || (v.fract() == 0.0 && v.abs() < 1e6) {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, series: &[Series]) -> Result<String> {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return Err(Error::Input("nothing to plot: no finite points".into()));
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y0 -= 0.5;
        y1 += 0.5;
    }
    let pad = (y1 - y0) * 0.05;
    let (y0, y1) = (y0 - pad, y1 + pad);
    let pw = WIDTH - MARGIN_L - MARGIN_R;
    let ph = HEIGHT - MARGIN_T - MARGIN_B;
    let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| MARGIN_T + ph - (y - y0) / (y1 - y0) * ph;

    let mut s = header(title);
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN_L}\" y=\"{MARGIN_T}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#444\"/>"
    );
    for t in ticks(x0, x1, 5) {
        let x = sx(t);
        let _ = writeln!(
            s,
            "<line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"#444\"/>\
             <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            MARGIN_T + ph,
            MARGIN_T + ph + 5.0,
            MARGIN_T + ph + 18.0,
            fmt_tick(t)
        );
    }
    for t in ticks(y0, y1, 5) {
        let y = sy(t);
        let _ = writeln!(
            s,
            "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            MARGIN_L,
            MARGIN_L + pw,
            MARGIN_L - 6.0,
            y + 4.0,
            fmt_tick(t)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n\
         <text transform=\"translate(18,{:.1}) rotate(-90)\" text-anchor=\"middle\">{}</text>",
        MARGIN_L + pw / 2.0,
        HEIGHT - 12.0,
        escape(xlabel),
        MARGIN_T + ph / 2.0,
        escape(ylabel)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let path: Vec<String> = ser
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let dash = if ser.dashed { " stroke-dasharray=\"5,4\"" } else { "" };
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\"{dash} points=\"{}\"/>",
            path.join(" ")
        );
        let ly = MARGIN_T + 14.0 + 18.0 * i as f64;
        let lx = MARGIN_L + pw + 12.0;
        let _ = writeln!(
            s,
            "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"{dash}/>\
             <text x=\"{}\" y=\"{}\">{}</text>",
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(&ser.name)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn node_label(role: &NodeRole) -> String {
    match role {
        NodeRole::Vital { feature } => format!("v{feature}"),
        NodeRole::Text => "text".into(),
        NodeRole::Kg { concept_id } => concept_id.clone(),
    }
}

/// Row-normalised attention of one record as a white-to-blue grid.
pub fn heatmap(title: &str, rec: &AttentionRecord) -> String {
    let n = rec.size.max(1);
    let labels: Vec<String> = rec.node_roles.iter().map(node_label).collect();
    let side = (HEIGHT - MARGIN_T - 110.0).min(WIDTH - 260.0);
    let cell = side / n as f64;
    let (ox, oy) = (120.0, MARGIN_T + 70.0);
    let mut s = header(title);
    let max = rec.alpha.iter().copied().fold(0.0f64, f64::max).max(1e-12);
    for u in 0..rec.size {
        for v in 0..rec.size {
            let a = rec.get(u, v) / max;
            let shade = |c: f64| (255.0 - a * (255.0 - c)).round() as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" \
                 fill=\"rgb({},{},{})\"><title>{} ← {}: {:.4}</title></rect>",
                ox + v as f64 * cell,
                oy + u as f64 * cell,
                shade(8.0),
                shade(48.0),
                shade(107.0),
                escape(&labels[u]),
                escape(&labels[v]),
                rec.get(u, v)
            );
        }
    }
    let font = cell.clamp(6.0, 12.0);
    for (i, l) in labels.iter().enumerate() {
        let c = (i as f64 + 0.5) * cell;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-size=\"{font:.1}\">{}</text>\
             <text transform=\"translate({:.1},{:.1}) rotate(-60)\" font-size=\"{font:.1}\">{}</text>",
            ox - 4.0,
            oy + c + font / 3.0,
            escape(l),
            ox + c,
            oy - 4.0,
            escape(l)
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{:.1}\" y=\"{:.1}\">rows attend to columns; max weight {max:.4}</text>",
        ox,
        oy + side + 20.0
    );
    s.push_str("</svg>\n");
    s
}

fn attention_svg(records: &[AttentionRecord], sel: Selection) -> Result<String> {
    let rec = match sel.timestep {
        Some(t) => records.iter().find(|r| r.timestep == t && r.layer == sel.layer),
        None => records.get(sel.record),
    }
    .ok_or_else(|| Error::Input("no attention record matches the selection".into()))?;
    Ok(heatmap(&format!("Attention, step {} layer {}", rec.timestep, rec.layer), rec))
}

fn concepts_svg(text: &str) -> Result<String> {
    #[derive(serde::Deserialize)]
    struct Ranked {
        episode: String,
        top: Vec<ConceptScore>,
    }
    let ranked: Ranked = serde_json::from_str(text)?;
    if ranked.top.is_empty() {
        return Err(Error::Input("concept ranking is empty".into()));
    }
    let mut s = header(&format!("Attention mass per concept, episode {}", ranked.episode));
    let max = ranked.top.iter().map(|c| c.score).fold(0.0f64, f64::max).max(1e-12);
    let bar_h = ((HEIGHT - MARGIN_T - MARGIN_B) / ranked.top.len() as f64).min(28.0);
    let (ox, w) = (150.0, WIDTH - 260.0);
    for (i, c) in ranked.top.iter().enumerate() {
        let y = MARGIN_T + 10.0 + i as f64 * bar_h;
        let len = c.score / max * w;
        let _ = writeln!(
            s,
            "<rect x=\"{ox}\" y=\"{y:.1}\" width=\"{len:.1}\" height=\"{:.1}\" fill=\"{}\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\
             <text x=\"{:.1}\" y=\"{:.1}\">{:.4}</text>",
            bar_h * 0.8,
            PALETTE[0],
            ox - 6.0,
            y + bar_h * 0.55,
            escape(&c.concept_id),
            ox + len + 6.0,
            y + bar_h * 0.55,
            c.score
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    fn parse(text: &str) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
        let header = reader
            .headers()
            .map_err(|e| Error::Input(format!("bad CSV header: {e}")))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| {
                r.map(|r| r.iter().map(str::to_string).collect())
                    .map_err(|e| Error::Input(format!("bad CSV row: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Self { header, rows })
    }

    fn col(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Input(format!("CSV has no `{name}` column")))
    }

    fn num(row: &[String], i: usize) -> f64 {
        row[i].parse().unwrap_or(f64::NAN)
    }
}

/// Mean of `metric` per numeric group key, in ascending key order.
fn grouped_means(t: &Table, key: usize, metric: usize) -> Vec<(f64, f64)> {
    let mut acc: BTreeMap<u64, (f64, f64, usize)> = BTreeMap::new();
    for r in &t.rows {
        let (k, v) = (Table::num(r, key), Table::num(r, metric));
        if k.is_finite() && v.is_finite() {
            let e = acc.entry(k.to_bits()).or_insert((k, 0.0, 0));
            e.1 += v;
            e.2 += 1;
        }
    }
    let mut pts: Vec<(f64, f64)> = acc.into_values().map(|(k, s, n)| (k, s / n as f64)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    pts
}

fn csv_svg(text: &str) -> Result<String> {
    let t = Table::parse(text)?;
    let h: Vec<&str> = t.header.iter().map(String::as_str).collect();
    match h.as_slice() {
        ["t", "output", "probability", "label"] => {
            let mut by_out: BTreeMap<String, (Vec<(f64, f64)>, Vec<(f64, f64)>)> = BTreeMap::new();
            for r in &t.rows {
                let e = by_out.entry(r[1].clone()).or_default();
                let x = Table::num(r, 0);
                e.0.push((x, Table::num(r, 2)));
                e.1.push((x, Table::num(r, 3)));
            }
            let mut series = Vec::new();
            for (out, (p, l)) in by_out.into_iter().take(PALETTE.len() / 2) {
                series.push(Series {
                    name: format!("p[{out}]"),
                    points: p,
                    dashed: false,
                });
                series.push(Series {
                    name: format!("label[{out}]"),
                    points: l,
                    dashed: true,
                });
            }
            line_plot("Predicted probability per step", "hour", "probability", &series)
        }
        ["task", "epoch", ..] => {
            let epoch = t.col("epoch")?;
            let mut series = vec![Series {
                name: "train loss".into(),
                points: grouped_means(&t, epoch, t.col("train_loss")?),
                dashed: false,
            }];
            for m in ["auprc", "auroc"] {
                series.push(Series {
                    name: format!("val {m}"),
                    points: grouped_means(&t, epoch, t.col(m)?),
                    dashed: true,
                });
            }
            line_plot("Training history", "epoch", "value", &series)
        }
        ["task", "rung_or_ratio", "seed", ..] => {
            let key = t.col("rung_or_ratio")?;
            if t.rows.iter().any(|r| r[key].parse::<f64>().is_err()) {
                return Err(Error::Input(
                    "per-rung CSVs have no numeric axis; plot the mask-sweep output instead".into(),
                ));
            }
            let series = ["auroc", "auprc"]
                .into_iter()
                .map(|m| {
                    Ok(Series {
                        name: m.to_uppercase(),
                        points: grouped_means(&t, key, t.col(m)?),
                        dashed: false,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            line_plot("Performance under vital-sign masking", "masking ratio", "metric (mean over seeds)", &series)
        }
        ["task", "rung_or_ratio", "runs", ..] => {
            let key = t.col("rung_or_ratio")?;
            let series = ["auroc_mean", "auprc_mean"]
                .into_iter()
                .map(|m| {
                    Ok(Series {
                        name: m.into(),
                        points: grouped_means(&t, key, t.col(m)?),
                        dashed: false,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            line_plot("Masking summary", "masking ratio", "metric", &series)
        }
        _ => Err(Error::Input(format!("unrecognised CSV header `{}`", t.header.join(",")))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_csv_becomes_polylines() {
        let svg = csv_svg("t,output,probability,label\n0,0,0.1,0\n1,0,0.7,1\n").unwrap();
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 2);
    }

    #[test]
    fn heatmap_has_one_cell_per_entry() {
        let rec = AttentionRecord {
            layer: 0,
            timestep: 3,
            size: 2,
            alpha: vec![0.5, 0.5, 0.2, 0.8],
            node_roles: vec![NodeRole::Text, NodeRole::Kg { concept_id: "C1".into() }],
        };
        let svg = heatmap("t", &rec);
        assert_eq!(svg.matches("<rect x=").count(), 4);
    }

    #[test]
    fn unknown_header_is_rejected() {
        assert!(csv_svg("a,b\n1,2\n").is_err());
    }
}
