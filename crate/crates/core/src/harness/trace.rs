//! Simulation traces and their CSV/SVG renderings.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::HarnessError;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub losses_w: f64,
    /// Lowest generator voltage magnitude, per unit.
    pub min_v_pu: f64,
    /// max_h (U_min − |u_h|)_+ / U_N.
    pub violation_pu: f64,
    pub q: Vec<f64>,
    pub lambda: Vec<f64>,
    pub pf_iterations: usize,
}

/// One row per executed step, recorded after the step's update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimTrace {
    /// File ids of the generator agents, in column order.
    pub agent_ids: Vec<u32>,
    pub rows: Vec<TraceRow>,
}

impl SimTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }

    pub fn max_violation_pu(&self) -> f64 {
        self.rows.iter().fold(0.0, |a, r| a.max(r.violation_pu))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EmitFormat {
    Csv,
    /// Losses and the lowest generator voltage against the step index, with a
    /// reference line at `u_min_pu`.
    Svg { u_min_pu: f64 },
}

pub fn emit(trace: &SimTrace, format: EmitFormat, path: &Path) -> Result<(), HarnessError> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        EmitFormat::Csv => write_csv(trace, &mut out)?,
        EmitFormat::Svg { u_min_pu } => write_svg(trace, u_min_pu, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

fn header(agent_ids: &[u32]) -> Vec<String> {
    let mut cols: Vec<String> = ["step", "losses_w", "min_v_pu", "violation_pu"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for id in agent_ids {
        cols.push(format!("q_{id}"));
        cols.push(format!("lambda_{id}"));
    }
    cols.push("pf_iterations".into());
    cols
}

/// Columns: `step, losses_w, min_v_pu, violation_pu`, then `q_<id>,
/// lambda_<id>` per agent, then `pf_iterations`. Floats are written in
/// shortest round-trip form.
pub fn write_csv<W: Write>(trace: &SimTrace, out: W) -> Result<(), HarnessError> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(header(&trace.agent_ids))?;
    for row in &trace.rows {
        let mut rec = vec![
            row.step.to_string(),
            row.losses_w.to_string(),
            row.min_v_pu.to_string(),
            row.violation_pu.to_string(),
        ];
        for (q, l) in row.q.iter().zip(&row.lambda) {
            rec.push(q.to_string());
            rec.push(l.to_string());
        }
        rec.push(row.pf_iterations.to_string());
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_csv<R: Read>(input: R) -> Result<SimTrace, HarnessError> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    let bad = |msg: String| HarnessError::Scenario(format!("trace CSV: {msg}"));
    if headers.len() < 5 || (headers.len() - 5) % 2 != 0 {
        return Err(bad(format!("unexpected column count {}", headers.len())));
    }
    let agents = (headers.len() - 5) / 2;
    let agent_ids = (0..agents)
        .map(|a| {
            let col = &headers[4 + 2 * a];
            col.strip_prefix("q_")
                .and_then(|id| id.parse().ok())
                .ok_or_else(|| bad(format!("bad column {col}")))
        })
        .collect::<Result<Vec<u32>, _>>()?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record?;
        let f = |i: usize| -> Result<f64, HarnessError> {
            record[i]
                .parse()
                .map_err(|_| bad(format!("bad number {:?}", &record[i])))
        };
        let u = |i: usize| -> Result<usize, HarnessError> {
            record[i]
                .parse()
                .map_err(|_| bad(format!("bad integer {:?}", &record[i])))
        };
        let mut q = Vec::with_capacity(agents);
        let mut lambda = Vec::with_capacity(agents);
        for a in 0..agents {
            q.push(f(4 + 2 * a)?);
            lambda.push(f(5 + 2 * a)?);
        }
        rows.push(TraceRow {
            step: u(0)?,
            losses_w: f(1)?,
            min_v_pu: f(2)?,
            violation_pu: f(3)?,
            q,
            lambda,
            pf_iterations: u(4 + 2 * agents)?,
        });
    }
    Ok(SimTrace { agent_ids, rows })
}

const WIDTH: f64 = 800.0;
const PANEL_HEIGHT: f64 = 220.0;
const MARGIN_LEFT: f64 = 80.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 30.0;
const GAP: f64 = 60.0;

struct Panel {
    top: f64,
    lo: f64,
    hi: f64,
    steps: f64,
}

impl Panel {
    fn new(top: f64, values: impl Iterator<Item = f64>, steps: usize) -> Self {
        let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| {
            (l.min(v), h.max(v))
        });
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 * hi.abs().max(1.0) {
            let pad = 0.01 * hi.abs().max(1e-3);
            lo -= pad;
            hi += pad;
        }
        Panel {
            top,
            lo,
            hi,
            steps: steps.max(2) as f64 - 1.0,
        }
    }

    fn x(&self, step: usize) -> f64 {
        MARGIN_LEFT + (WIDTH - MARGIN_LEFT - MARGIN_RIGHT) * step as f64 / self.steps
    }

    fn y(&self, value: f64) -> f64 {
        self.top + PANEL_HEIGHT * (1.0 - (value - self.lo) / (self.hi - self.lo))
    }

    fn frame(&self, svg: &mut String, title: &str, unit: &str) {
        let _ = writeln!(
            svg,
            r##"<rect x="{MARGIN_LEFT}" y="{}" width="{}" height="{PANEL_HEIGHT}" fill="none" stroke="#888"/>"##,
            self.top,
            WIDTH - MARGIN_LEFT - MARGIN_RIGHT
        );
        let _ = writeln!(
            svg,
            r#"<text x="{MARGIN_LEFT}" y="{}" font-size="13">{title}</text>"#,
            self.top - 8.0
        );
        for (value, y) in [(self.hi, self.top + 4.0), (self.lo, self.top + PANEL_HEIGHT)] {
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{y}" font-size="10" text-anchor="end">{value:.4} {unit}</text>"#,
                MARGIN_LEFT - 4.0
            );
        }
    }

    fn polyline(&self, svg: &mut String, points: impl Iterator<Item = (usize, f64)>, class: &str) {
        let pts: Vec<String> = points
            .map(|(s, v)| format!("{:.2},{:.2}", self.x(s), self.y(v)))
            .collect();
        let _ = writeln!(
            svg,
            r##"<polyline class="{class}" fill="none" stroke="#c00" stroke-width="1" points="{}"/>"##,
            pts.join(" ")
        );
    }
}

/// Two stacked panels: losses (kW) and the lowest generator voltage (pu)
/// with a dashed reference line at `u_min_pu`.
pub fn write_svg<W: Write>(trace: &SimTrace, u_min_pu: f64, mut out: W) -> Result<(), HarnessError> {
    let steps = trace.rows.len();
    let height = MARGIN_TOP + 2.0 * PANEL_HEIGHT + GAP + 40.0;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );

    let losses = Panel::new(MARGIN_TOP, trace.rows.iter().map(|r| r.losses_w / 1e3), steps);
    losses.frame(&mut svg, "Distribution losses", "kW");
    losses.polyline(
        &mut svg,
        trace.rows.iter().map(|r| (r.step, r.losses_w / 1e3)),
        "losses",
    );

    let voltage = Panel::new(
        MARGIN_TOP + PANEL_HEIGHT + GAP,
        trace
            .rows
            .iter()
            .map(|r| r.min_v_pu)
            .chain(std::iter::once(u_min_pu)),
        steps,
    );
    voltage.frame(&mut svg, "Lowest generator voltage", "pu");
    voltage.polyline(
        &mut svg,
        trace.rows.iter().map(|r| (r.step, r.min_v_pu)),
        "min-voltage",
    );
    let y = voltage.y(u_min_pu);
    let _ = writeln!(
        svg,
        r##"<line class="u-min" data-value="{u_min_pu}" x1="{MARGIN_LEFT}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="#000" stroke-dasharray="6,4"/>"##,
        WIDTH - MARGIN_RIGHT
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{:.2}" font-size="10" text-anchor="end">U_min = {u_min_pu:.3} pu</text>"#,
        WIDTH - MARGIN_RIGHT - 4.0,
        y - 4.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-size="11" text-anchor="middle">step</text>"#,
        WIDTH / 2.0,
        height - 10.0
    );
    svg.push_str("</svg>\n");
    out.write_all(svg.as_bytes())?;
    Ok(())
}
