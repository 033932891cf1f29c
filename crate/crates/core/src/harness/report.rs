//! Report files: JSON for everything, CSV for tables and curves, SVG plots
//! where a picture makes sense.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{CampaignMetrics, HarnessError, Heatmap, SweepResult};
use crate::faults::{OutcomeClass, LOCATIONS};
use crate::fragility::FragilityMetrics;
use crate::pipeline::BoundaryId;
use crate::tradeoff::{Plan, TradeoffPoint};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Svg,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Svg => "svg",
        }
    }

    /// Parse a comma-separated list such as `csv,json`.
    pub fn parse_list(s: &str) -> Result<Vec<ReportFormat>, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let f: ReportFormat = part.parse()?;
            if !out.contains(&f) {
                out.push(f);
            }
        }
        Ok(out)
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "svg" => Ok(ReportFormat::Svg),
            other => Err(format!("unknown format `{other}` (expected csv, json or svg)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "result")]
pub enum ReportBody {
    Campaign(CampaignMetrics),
    Sweep(SweepResult),
    Heatmap(Heatmap),
    Frontier(Vec<TradeoffPoint>),
    Plan(Plan),
    Characterization(Vec<FragilityMetrics>),
    LatencyCdf(Vec<LatencySeries>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySeries {
    pub config: String,
    pub cdf: Vec<(u64, f64)>,
}

/// A result plus the metadata needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool_version: String,
    pub profile: String,
    pub seed: Option<u64>,
    /// Inputs that produced the result, as given.
    pub spec: serde_json::Value,
    #[serde(flatten)]
    pub body: ReportBody,
}

impl Report {
    pub fn new(profile: &str, seed: Option<u64>, spec: serde_json::Value, body: ReportBody) -> Self {
        Report { tool_version: TOOL_VERSION.into(), profile: profile.into(), seed, spec, body }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io { path: path.display().to_string(), source }
}

/// Write `report` as `<dir>/<stem>.<ext>` for each requested format.
/// Formats that do not apply to the body (SVG for plans and
/// characterization tables) are skipped. Returns the files written.
pub fn emit_report(
    report: &Report,
    dir: &Path,
    stem: &str,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for &f in formats {
        let path = dir.join(format!("{stem}.{}", f.extension()));
        let content = match f {
            ReportFormat::Json => Some(serde_json::to_string_pretty(report).expect("reports serialize") + "\n"),
            ReportFormat::Csv => Some(render_csv(&report.body)?),
            ReportFormat::Svg => render_svg(&report.body),
        };
        if let Some(c) = content {
            fs::write(&path, c).map_err(io_err(&path))?;
            written.push(path);
        }
    }
    Ok(written)
}

fn render_csv(body: &ReportBody) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fmt_err = |e: csv::Error| HarnessError::Format { what: "csv".into(), message: e.to_string() };
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    match body {
        ReportBody::Campaign(m) => {
            w.write_record(["metric", "value"]).map_err(fmt_err)?;
            let mut rows: Vec<(String, String)> = vec![
                ("injected_total".into(), m.injected_total.to_string()),
                ("manifested_total".into(), m.manifested_total.to_string()),
                ("flagged_total".into(), m.flagged_total.to_string()),
            ];
            for o in OutcomeClass::ALL {
                rows.push((format!("count_{}", outcome_name(o)), m.counts.get(o).to_string()));
            }
            rows.extend([
                ("observability".into(), opt(m.observability)),
                ("detected_frac".into(), opt(m.detected_frac)),
                ("masked_frac".into(), opt(m.masked_frac)),
                ("unhandled_rate".into(), opt(m.unhandled_rate)),
                ("runs".into(), m.runs.to_string()),
                ("diverged_runs".into(), m.diverged_runs.to_string()),
                ("run_error_probability".into(), opt(m.run_error_probability)),
                ("recovery_events".into(), m.recovery_latencies.len().to_string()),
                ("cycles".into(), m.counters.cycles.to_string()),
                ("retired".into(), m.counters.retired.to_string()),
            ]);
            for (k, v) in rows {
                w.write_record([k, v]).map_err(fmt_err)?;
            }
        }
        ReportBody::Sweep(s) => {
            let mut header = vec!["margin".to_string()];
            header.extend(s.curves.iter().map(|c| c.config.clone()));
            w.write_record(&header).map_err(fmt_err)?;
            for (i, m) in s.margins.iter().enumerate() {
                let mut row = vec![m.to_string()];
                row.extend(s.curves.iter().map(|c| opt(c.run_error_probability.get(i).copied().flatten())));
                w.write_record(&row).map_err(fmt_err)?;
            }
        }
        ReportBody::Heatmap(h) => {
            let mut header = vec!["boundary".to_string()];
            header.extend((1..=LOCATIONS).map(|l| format!("L{l}")));
            w.write_record(&header).map_err(fmt_err)?;
            for b in BoundaryId::ALL {
                let mut row = vec![b.name().to_string()];
                row.extend(h.matrix[b.index()].iter().map(|v| v.to_string()));
                w.write_record(&row).map_err(fmt_err)?;
            }
        }
        ReportBody::Frontier(points) => {
            w.write_record(["label", "area_frac", "reliability_gain"]).map_err(fmt_err)?;
            for p in points {
                w.write_record([p.label.clone(), p.area_frac.to_string(), p.reliability_gain.to_string()])
                    .map_err(fmt_err)?;
            }
        }
        ReportBody::Plan(p) => {
            w.write_record(["field", "value"]).map_err(fmt_err)?;
            for (s, m) in crate::pipeline::StageId::ALL.iter().zip(p.config.modes) {
                w.write_record([s.name().to_string(), format!("{m:?}")]).map_err(fmt_err)?;
            }
            w.write_record(["area_frac".to_string(), p.overhead.area_frac.to_string()]).map_err(fmt_err)?;
            w.write_record(["power_frac".to_string(), p.overhead.power_frac.to_string()]).map_err(fmt_err)?;
            w.write_record(["predicted_gain".to_string(), p.predicted.reliability_gain.to_string()])
                .map_err(fmt_err)?;
            w.write_record(["infeasible".to_string(), p.infeasible.to_string()]).map_err(fmt_err)?;
        }
        ReportBody::Characterization(rows) => {
            w.write_record(["stage", "nominal_slack", "mu", "delta_phi", "sigma_phi", "class"]).map_err(fmt_err)?;
            for m in rows {
                w.write_record([
                    m.stage.name().to_string(),
                    m.nominal_slack.to_string(),
                    m.mu.to_string(),
                    m.delta_phi.to_string(),
                    m.sigma_phi.to_string(),
                    format!("{:?}", m.class),
                ])
                .map_err(fmt_err)?;
            }
        }
        ReportBody::LatencyCdf(series) => {
            w.write_record(["config", "latency", "cumulative_fraction"]).map_err(fmt_err)?;
            for s in series {
                for (x, f) in &s.cdf {
                    w.write_record([s.config.clone(), x.to_string(), f.to_string()]).map_err(fmt_err)?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Format { what: "csv".into(), message: e.to_string() })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn outcome_name(o: OutcomeClass) -> &'static str {
    match o {
        OutcomeClass::Benign => "benign",
        OutcomeClass::DetectedRecovered => "detected_recovered",
        OutcomeClass::MaskedSilent => "masked_silent",
        OutcomeClass::SilentDataCorruption => "silent_data_corruption",
        OutcomeClass::Unresolvable => "unresolvable",
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn svg_open(title: &str) -> String {
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        W / 2.0,
        escape(title)
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear map of `[lo, hi]` onto the plot box along one axis.
struct Axis {
    lo: f64,
    hi: f64,
    from: f64,
    to: f64,
}

impl Axis {
    fn new(lo: f64, hi: f64, from: f64, to: f64) -> Self {
        let (lo, hi) = if hi > lo { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        Axis { lo, hi, from, to }
    }

    fn map(&self, v: f64) -> f64 {
        self.from + (v - self.lo) / (self.hi - self.lo) * (self.to - self.from)
    }
}

fn axes(s: &mut String, x: &Axis, y: &Axis, xlabel: &str, ylabel: &str) {
    let _ = writeln!(
        s,
        "<path d=\"M{PAD} {t} V{b} H{r}\" fill=\"none\" stroke=\"black\"/>",
        t = PAD,
        b = H - PAD,
        r = W - PAD / 2.0
    );
    for i in 0..=4 {
        let fx = x.lo + (x.hi - x.lo) * i as f64 / 4.0;
        let fy = y.lo + (y.hi - y.lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.3}</text>",
            x.map(fx),
            H - PAD + 16.0,
            fx
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.3}</text>",
            PAD - 6.0,
            y.map(fy) + 4.0,
            fy
        );
    }
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>", W / 2.0, H - 16.0, escape(xlabel));
    let _ = writeln!(
        s,
        "<text x=\"16\" y=\"{y}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {y})\">{}</text>",
        escape(ylabel),
        y = H / 2.0
    );
}

fn legend(s: &mut String, labels: &[String]) {
    for (i, l) in labels.iter().enumerate() {
        let y = PAD + 16.0 * i as f64;
        let c = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{c}\"/>", W - 170.0, y - 9.0);
        let _ = writeln!(s, "<text x=\"{}\" y=\"{y}\">{}</text>", W - 155.0, escape(l));
    }
}

fn polyline(s: &mut String, pts: &[(f64, f64)], color: &str) {
    if pts.is_empty() {
        return;
    }
    let d: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
    let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", d.join(" "));
}

/// SVG rendering of a result, or `None` when the body has no plot.
pub fn render_svg(body: &ReportBody) -> Option<String> {
    let plot_y0 = H - PAD;
    let plot_y1 = PAD;
    let plot_x0 = PAD;
    let plot_x1 = W - 180.0;
    let mut s;
    match body {
        ReportBody::Heatmap(h) => {
            s = svg_open("Error incidence by boundary and location");
            let (cw, ch) = ((W - 2.0 * PAD) / LOCATIONS as f64, (H - 2.0 * PAD) / 4.0);
            let max = h.matrix.iter().flatten().cloned().fold(0.0_f64, f64::max).max(1e-12);
            for b in BoundaryId::ALL {
                let y = PAD + ch * b.index() as f64;
                let _ = writeln!(
                    s,
                    "<text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
                    PAD - 4.0,
                    y + ch / 2.0 + 4.0,
                    escape(b.name())
                );
                for l in 0..LOCATIONS {
                    let v = h.matrix[b.index()][l];
                    let x = PAD + cw * l as f64;
                    let shade = (255.0 * (1.0 - (v / max).clamp(0.0, 1.0))) as u8;
                    let _ = writeln!(
                        s,
                        "<rect class=\"cell\" x=\"{x:.1}\" y=\"{y:.1}\" width=\"{cw:.1}\" height=\"{ch:.1}\" fill=\"rgb(255,{shade},{shade})\" stroke=\"#888\"/>"
                    );
                    let _ = writeln!(
                        s,
                        "<text class=\"label\" x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>",
                        x + cw / 2.0,
                        y + ch / 2.0 + 4.0
                    );
                }
            }
            for l in 0..LOCATIONS {
                let _ = writeln!(
                    s,
                    "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\">L{}</text>",
                    PAD + cw * (l as f64 + 0.5),
                    H - PAD + 16.0,
                    l + 1
                );
            }
        }
        ReportBody::Sweep(sw) => {
            s = svg_open("Run error probability vs timing margin");
            let lo = sw.margins.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = sw.margins.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let x = Axis::new(
                if lo.is_finite() { lo } else { 0.0 },
                if hi.is_finite() { hi } else { 1.0 },
                plot_x0,
                plot_x1,
            );
            let y = Axis::new(0.0, 1.0, plot_y0, plot_y1);
            axes(&mut s, &x, &y, "timing margin", "run error probability");
            for (i, c) in sw.curves.iter().enumerate() {
                let pts: Vec<(f64, f64)> = sw
                    .margins
                    .iter()
                    .zip(&c.run_error_probability)
                    .filter_map(|(m, p)| p.map(|p| (x.map(*m), y.map(p))))
                    .collect();
                polyline(&mut s, &pts, PALETTE[i % PALETTE.len()]);
            }
            legend(&mut s, &sw.curves.iter().map(|c| c.config.clone()).collect::<Vec<_>>());
        }
        ReportBody::Frontier(points) => {
            s = svg_open("Reliability gain vs area overhead");
            let hi = points.iter().map(|p| p.area_frac).fold(0.0_f64, f64::max).max(0.1);
            let x = Axis::new(0.0, hi * 1.1, plot_x0, plot_x1);
            let y = Axis::new(0.0, 1.0, plot_y0, plot_y1);
            axes(&mut s, &x, &y, "area overhead", "reliability gain");
            for p in points {
                let (cx, cy) = (x.map(p.area_frac), y.map(p.reliability_gain));
                let _ = writeln!(s, "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"5\" fill=\"{}\"/>", PALETTE[0]);
                let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>", cx + 7.0, cy - 7.0, escape(&p.label));
            }
        }
        ReportBody::LatencyCdf(series) => {
            s = svg_open("Recovery latency CDF");
            let xs = series.iter().flat_map(|c| c.cdf.iter().map(|p| p.0 as f64));
            let hi = xs.clone().fold(1.0_f64, f64::max);
            let lo = xs.fold(hi, f64::min);
            let x = Axis::new(lo - 1.0, hi + 1.0, plot_x0, plot_x1);
            let y = Axis::new(0.0, 1.0, plot_y0, plot_y1);
            axes(&mut s, &x, &y, "total recovery latency (cycles)", "cumulative fraction");
            for (i, c) in series.iter().enumerate() {
                let mut pts = Vec::new();
                let mut prev = 0.0;
                for &(v, f) in &c.cdf {
                    pts.push((x.map(v as f64), y.map(prev)));
                    pts.push((x.map(v as f64), y.map(f)));
                    prev = f;
                }
                pts.push((x.map(hi + 1.0), y.map(prev)));
                polyline(&mut s, &pts, PALETTE[i % PALETTE.len()]);
            }
            legend(&mut s, &series.iter().map(|c| c.config.clone()).collect::<Vec<_>>());
        }
        ReportBody::Campaign(m) => {
            s = svg_open(&format!("Event outcomes: {}", m.config));
            let x = Axis::new(0.0, OutcomeClass::ALL.len() as f64, plot_x0, plot_x1);
            let y = Axis::new(0.0, 1.0, plot_y0, plot_y1);
            axes(&mut s, &x, &y, "outcome", "fraction of injected events");
            let n = m.injected_total.max(1) as f64;
            for (i, o) in OutcomeClass::ALL.into_iter().enumerate() {
                let f = m.counts.get(o) as f64 / n;
                let (x0, x1) = (x.map(i as f64 + 0.15), x.map(i as f64 + 0.85));
                let _ = writeln!(
                    s,
                    "<rect x=\"{x0:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
                    y.map(f),
                    x1 - x0,
                    y.map(0.0) - y.map(f),
                    PALETTE[i % PALETTE.len()]
                );
            }
            legend(&mut s, &OutcomeClass::ALL.iter().map(|o| outcome_name(*o).to_string()).collect::<Vec<_>>());
        }
        ReportBody::Plan(_) | ReportBody::Characterization(_) => return None,
    }
    s += "</svg>\n";
    Some(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formats_parse() {
        assert_eq!(
            ReportFormat::parse_list("csv, JSON,svg,csv").unwrap(),
            vec![ReportFormat::Csv, ReportFormat::Json, ReportFormat::Svg]
        );
        assert!(ReportFormat::parse_list("png").is_err());
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let body = ReportBody::Sweep(SweepResult { margins: vec![], curves: vec![] });
        assert_eq!(render_csv(&body).unwrap(), "margin\n");
        let json = serde_json::to_value(Report::new("paper", Some(1), serde_json::Value::Null, body)).unwrap();
        assert_eq!(json["result"]["margins"], serde_json::json!([]));
        assert_eq!(json["kind"], "sweep");
    }

    #[test]
    fn heatmap_svg_has_grid_and_labels() {
        let h = Heatmap { matrix: [[0.1; LOCATIONS]; 4], counts: [[0; LOCATIONS]; 4], insufficient_rows: vec![] };
        let svg = render_svg(&ReportBody::Heatmap(h)).unwrap();
        assert_eq!(svg.matches("class=\"cell\"").count(), 32);
        assert_eq!(svg.matches("class=\"label\"").count(), 32);
    }
}
