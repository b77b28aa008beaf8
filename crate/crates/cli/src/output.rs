//! Text artifacts: key-value reports, metric and prediction tables, and
//! SVG overlays.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::{Map, Value};

use ltn::metrics::MetricsReport;
use ltn::scene::Point;

/// Ordered key-value summary rendered as a JSON object.
#[derive(Default)]
pub struct Report {
    entries: Map<String, Value>,
}

impl Report {
    /// Non-finite values render as `null`.
    pub fn num(&mut self, key: &str, v: f64) -> &mut Self {
        self.entries.insert(key.to_string(), Value::from(v));
        self
    }

    pub fn int(&mut self, key: &str, v: usize) -> &mut Self {
        self.entries.insert(key.to_string(), Value::from(v));
        self
    }

    pub fn text(&mut self, key: &str, v: &str) -> &mut Self {
        self.entries.insert(key.to_string(), Value::from(v));
        self
    }

    pub fn nums(&mut self, key: &str, vs: &[f64]) -> &mut Self {
        self.entries.insert(key.to_string(), Value::from(vs.to_vec()));
        self
    }

    pub fn metrics(&mut self, prefix: &str, m: &MetricsReport) -> &mut Self {
        self.num(&format!("{prefix}ade"), m.ade)
            .num(&format!("{prefix}fde"), m.fde)
            .int(&format!("{prefix}k"), m.k)
            .num(&format!("{prefix}min_ade_k"), m.min_ade_k)
            .num(&format!("{prefix}min_fde_k"), m.min_fde_k);
        for (i, v) in m.fde_seconds.iter().enumerate() {
            self.num(&format!("{prefix}fde_{}s", i + 1), v.unwrap_or(f64::NAN));
        }
        self
    }

    pub fn render(&self) -> String {
        let mut out = serde_json::to_string_pretty(&self.entries).expect("plain values serialize");
        out.push('\n');
        out
    }
}

/// One row of the metrics table.
pub struct MetricsRow {
    pub id: String,
    pub metrics: MetricsReport,
    /// Best of the raw latent-mode samples, when they were recorded.
    pub raw: Option<(f64, f64)>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(rows: &[MetricsRow], k: usize) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = [
        "instance_id".to_string(),
        "ade".into(),
        "fde".into(),
        format!("min_ade_{k}"),
        format!("min_fde_{k}"),
        "fde_1s".into(),
        "fde_2s".into(),
        "fde_3s".into(),
        "fde_4s".into(),
        format!("raw_min_ade_{k}"),
        format!("raw_min_fde_{k}"),
    ];
    w.write_record(&header).expect("in-memory write");
    for r in rows {
        let m = &r.metrics;
        let mut rec = vec![r.id.clone(), cell(Some(m.ade)), cell(Some(m.fde)), cell(Some(m.min_ade_k)), cell(Some(m.min_fde_k))];
        rec.extend(m.fde_seconds.iter().map(|v| cell(*v)));
        rec.push(cell(r.raw.map(|x| x.0)));
        rec.push(cell(r.raw.map(|x| x.1)));
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii fields")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum RowKind {
    Proposal,
    Selected,
    Mean,
    Raw,
}

impl RowKind {
    fn name(self) -> &'static str {
        match self {
            RowKind::Proposal => "proposal",
            RowKind::Selected => "selected",
            RowKind::Mean => "mean",
            RowKind::Raw => "raw",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "proposal" => RowKind::Proposal,
            "selected" => RowKind::Selected,
            "mean" => RowKind::Mean,
            "raw" => RowKind::Raw,
            _ => return None,
        })
    }
}

/// One predicted path of an instance.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEntry {
    pub kind: RowKind,
    pub index: usize,
    pub latent_index: Option<usize>,
    pub score: Option<f64>,
    pub positions: Vec<Point>,
}

pub const PREDICTIONS_HEADER: [&str; 8] = ["instance_id", "kind", "index", "latent_index", "score", "step", "x", "y"];

/// Prediction rows; positions are written with full round-trip precision.
pub struct PredictionWriter {
    inner: csv::Writer<Vec<u8>>,
}

impl Default for PredictionWriter {
    fn default() -> Self {
        let mut inner = csv::Writer::from_writer(Vec::new());
        inner.write_record(PREDICTIONS_HEADER).expect("in-memory write");
        Self { inner }
    }
}

impl PredictionWriter {
    /// One row per step of `entry`.
    pub fn push(&mut self, id: &str, entry: &PathEntry) {
        for (step, p) in entry.positions.iter().enumerate() {
            let rec = [
                id.to_string(),
                entry.kind.name().to_string(),
                entry.index.to_string(),
                entry.latent_index.map(|z| z.to_string()).unwrap_or_default(),
                entry.score.map(|s| format!("{s:?}")).unwrap_or_default(),
                (step + 1).to_string(),
                format!("{:?}", p.x),
                format!("{:?}", p.y),
            ];
            self.inner.write_record(&rec).expect("in-memory write");
        }
    }

    pub fn finish(self) -> String {
        String::from_utf8(self.inner.into_inner().expect("in-memory flush")).expect("ascii fields")
    }
}

/// Paths per instance id. Rows of one path must list steps `1, 2, ...` in
/// order.
pub fn parse_predictions(text: &str) -> Result<BTreeMap<String, Vec<PathEntry>>, String> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(|e| format!("predictions: {e}"))?;
    if header.iter().ne(PREDICTIONS_HEADER) {
        return Err(format!("predictions: expected header `{}`", PREDICTIONS_HEADER.join(",")));
    }
    let mut out: BTreeMap<String, Vec<PathEntry>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| format!("predictions: {e}"))?;
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |what: &str| format!("predictions line {line}: {what}");
        let opt = |i: usize| Some(&rec[i]).filter(|f| !f.is_empty());
        let kind = RowKind::parse(&rec[1]).ok_or_else(|| bad("unknown kind"))?;
        let index: usize = rec[2].parse().map_err(|_| bad("bad index"))?;
        let latent_index = opt(3).map(str::parse).transpose().map_err(|_| bad("bad latent index"))?;
        let score = opt(4).map(str::parse).transpose().map_err(|_| bad("bad score"))?;
        let step: usize = rec[5].parse().map_err(|_| bad("bad step"))?;
        let x: f64 = rec[6].parse().map_err(|_| bad("bad x"))?;
        let y: f64 = rec[7].parse().map_err(|_| bad("bad y"))?;
        let paths = out.entry(rec[0].to_string()).or_default();
        let j = match paths.iter().position(|p| p.kind == kind && p.index == index) {
            Some(j) => j,
            None => {
                paths.push(PathEntry {
                    kind,
                    index,
                    latent_index,
                    score,
                    positions: Vec::new(),
                });
                paths.len() - 1
            }
        };
        let entry = &mut paths[j];
        if step != entry.positions.len() + 1 {
            return Err(bad("steps must be consecutive from 1"));
        }
        entry.positions.push(Point::new(x, y));
    }
    Ok(out)
}

/// Layers of one overlay plot.
pub struct Overlay<'a> {
    pub title: &'a str,
    pub history: &'a [Point],
    pub truth: Option<&'a [Point]>,
    pub proposals: Vec<&'a [Point]>,
    pub selected: &'a [Point],
}

const SVG_SIZE: f64 = 480.0;
const SVG_MARGIN: f64 = 24.0;

pub fn overlay_svg(o: &Overlay<'_>) -> String {
    let all = o
        .history
        .iter()
        .chain(o.truth.unwrap_or(&[]))
        .chain(o.proposals.iter().flat_map(|p| p.iter()))
        .chain(o.selected);
    let (mut lo, mut hi) = (Point::new(f64::INFINITY, f64::INFINITY), Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY));
    for p in all {
        lo = Point::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Point::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    let span = (hi.x - lo.x).max(hi.y - lo.y).max(1e-6);
    let scale = (SVG_SIZE - 2.0 * SVG_MARGIN) / span;
    let map = |p: &Point| ((p.x - lo.x) * scale + SVG_MARGIN, SVG_SIZE - ((p.y - lo.y) * scale + SVG_MARGIN));
    let line = |pts: &[Point], style: &str| {
        let coords: Vec<String> = pts
            .iter()
            .map(|p| {
                let (x, y) = map(p);
                format!("{x:.2},{y:.2}")
            })
            .collect();
        format!("  <polyline fill=\"none\" {style} points=\"{}\"/>\n", coords.join(" "))
    };

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_SIZE}\" height=\"{SVG_SIZE}\" viewBox=\"0 0 {SVG_SIZE} {SVG_SIZE}\">\n"
    );
    let _ = writeln!(out, "  <title>{}</title>", o.title);
    out.push_str("  <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    for p in &o.proposals {
        out.push_str(&line(p, "stroke=\"#7a9cc6\" stroke-width=\"0.8\" stroke-opacity=\"0.6\""));
    }
    // Paths start at the last observed point so the layers join up.
    let origin = o.history.last().copied();
    let joined = |path: &[Point]| -> Vec<Point> { origin.into_iter().chain(path.iter().copied()).collect() };
    if let Some(t) = o.truth {
        out.push_str(&line(&joined(t), "stroke=\"black\" stroke-width=\"2\" stroke-dasharray=\"6 4\""));
    }
    out.push_str(&line(o.history, "stroke=\"black\" stroke-width=\"2\""));
    out.push_str(&line(&joined(o.selected), "stroke=\"#d62728\" stroke-width=\"3\""));
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(kind: RowKind, index: usize, score: Option<f64>) -> PathEntry {
        PathEntry {
            kind,
            index,
            latent_index: Some(3),
            score,
            positions: vec![Point::new(0.1, -2.0), Point::new(1.0 / 3.0, 7.25)],
        }
    }

    #[test]
    fn predictions_round_trip() {
        let a = entry(RowKind::Proposal, 0, Some(0.123456789));
        let b = entry(RowKind::Proposal, 1, Some(0.5));
        let mut c = entry(RowKind::Mean, 0, None);
        c.latent_index = None;
        let mut w = PredictionWriter::default();
        w.push("s0_a1_f0", &a);
        w.push("s0_a1_f0", &b);
        w.push("s1_a2_f3", &c);
        let text = w.finish();
        assert!(text.starts_with("instance_id,kind,index,latent_index,score,step,x,y\n"));
        let parsed = parse_predictions(&text).unwrap();
        assert_eq!(parsed["s0_a1_f0"], vec![a, b]);
        assert_eq!(parsed["s1_a2_f3"], vec![c]);
    }

    #[test]
    fn bad_prediction_rows_name_the_line() {
        let head = PREDICTIONS_HEADER.join(",");
        let err = |body: &str| parse_predictions(&format!("{head}\n{body}")).unwrap_err();
        assert!(err("s0,proposal,0,1,0.5,1,0.0\n").contains("predictions"));
        assert!(err("s0,proposal,0,1,0.5,1,0.0,0.0\ns0,proposal,0,1,0.5,3,0.0,0.0\n").contains("line 3"));
        assert!(err("s0,other,0,1,0.5,1,0.0,0.0\n").contains("kind"));
        assert!(parse_predictions("a,b\n").unwrap_err().contains("header"));
    }

    #[test]
    fn report_renders_in_order() {
        let mut r = Report::default();
        r.text("name", "a \"b\"").int("n", 3).num("x", 0.5).num("missing", f64::NAN).nums("v", &[1.0, 2.5]);
        let text = r.render();
        let keys: Vec<&str> = text.lines().filter_map(|l| l.trim().strip_prefix('"')?.split('"').next()).collect();
        assert_eq!(keys, ["name", "n", "x", "missing", "v"]);
        let v: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(v["name"], "a \"b\"");
        assert_eq!(v["n"], 3);
        assert_eq!(v["x"], 0.5);
        assert!(v["missing"].is_null());
        assert_eq!(v["v"][1], 2.5);
    }

    #[test]
    fn metrics_table_leaves_unreached_seconds_empty() {
        let row = MetricsRow {
            id: "s0_a0_f0".into(),
            metrics: MetricsReport {
                ade: 1.0,
                fde: 2.0,
                k: 20,
                min_ade_k: 0.5,
                min_fde_k: 0.25,
                fde_seconds: [Some(1.5), None, None, None],
            },
            raw: None,
        };
        let csv = metrics_csv(&[row], 20);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "instance_id,ade,fde,min_ade_20,min_fde_20,fde_1s,fde_2s,fde_3s,fde_4s,raw_min_ade_20,raw_min_fde_20"
        );
        assert_eq!(lines.next().unwrap(), "s0_a0_f0,1,2,0.5,0.25,1.5,,,,,");
    }

    #[test]
    fn overlay_has_every_layer() {
        let hist = [Point::new(0.0, 0.0), Point::new(1.0, 0.0)];
        let truth = [Point::new(2.0, 0.0), Point::new(3.0, 0.5)];
        let prop = [Point::new(2.0, 0.2), Point::new(3.0, 1.0)];
        let svg = overlay_svg(&Overlay {
            title: "s0",
            history: &hist,
            truth: Some(&truth),
            proposals: vec![&prop, &prop],
            selected: &prop,
        });
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<polyline").count(), 5);
        assert_eq!(svg.matches("stroke-dasharray").count(), 1);
        assert_eq!(svg.matches("#d62728").count(), 1);
    }
}
