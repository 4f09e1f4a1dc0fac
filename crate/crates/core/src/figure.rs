//! SVG coverage report comparing adaptive and uniform frame selections.
//!
//! Each row holds one panel per selected frame, showing the cloud points that
//! frame sees; points it newly covers are drawn solid. Panel tint scales with
//! the frame's marginal gain. A top-down map shows which cloud points either
//! selection covers.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::coverage::{SamplingOutcome, SelectionReport};
use crate::error::{Error, Result};
use crate::geometry::project_point;
use crate::scene::SceneManifest;

const PANEL_W: f64 = 160.0;
const GAP: f64 = 12.0;
const MARGIN: f64 = 20.0;
const FONT: f64 = 12.0;
const LINE: f64 = 16.0;
const MAP_SIZE: f64 = 240.0;
const MAX_PANEL_POINTS: usize = 600;
const MAX_MAP_POINTS: usize = 4000;

/// Axis-aligned box of a laid-out element.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutBox {
    pub name: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl LayoutBox {
    fn new(name: impl Into<String>, x: f64, y: f64, w: f64, h: f64) -> Self {
        LayoutBox { name: name.into(), x, y, w, h }
    }

    fn overlaps(&self, o: &LayoutBox) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

#[derive(Debug, Clone)]
pub struct CoverageFigure {
    pub svg: String,
    pub width: f64,
    pub height: f64,
    pub layout: Vec<LayoutBox>,
    /// Stats lines exactly as embedded in the figure.
    pub stats: Vec<String>,
}

impl CoverageFigure {
    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, &self.svg).map_err(|e| Error::io(path, e))
    }
}

/// Returns the names of the first pair of overlapping elements, if any, and
/// any element that leaves the canvas.
pub fn check_layout(layout: &[LayoutBox], width: f64, height: f64) -> std::result::Result<(), String> {
    for b in layout {
        if b.x < 0.0 || b.y < 0.0 || b.x + b.w > width || b.y + b.h > height {
            return Err(format!("{} leaves the canvas", b.name));
        }
    }
    for (i, a) in layout.iter().enumerate() {
        for b in &layout[i + 1..] {
            if a.overlaps(b) {
                return Err(format!("{} overlaps {}", a.name, b.name));
            }
        }
    }
    Ok(())
}

pub fn stats_lines(r: &SelectionReport) -> Vec<String> {
    vec![
        format!("total_points: {}", r.total_points),
        format!("covered_points: {}", r.covered_points),
        format!("uniform_baseline_covered: {}", r.uniform_baseline_covered),
        format!("selected_ids: {:?}", r.selected_ids),
        format!("marginal_gains: {:?}", r.marginal_gains),
    ]
}

fn text_box(name: &str, x: f64, y: f64, text: &str) -> LayoutBox {
    // baseline at y + FONT; rough glyph width of 0.6 em
    LayoutBox::new(name, x, y, 0.6 * FONT * text.chars().count() as f64, LINE)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn stride(n: usize, max: usize) -> usize {
    n.div_ceil(max).max(1)
}

struct Row<'a> {
    label: &'a str,
    picks: Vec<usize>,
    gains: Vec<u64>,
}

pub fn coverage_figure(outcome: &SamplingOutcome, manifest: &SceneManifest) -> Result<CoverageFigure> {
    let r = &outcome.report;
    let k = outcome.greedy.selected.len();
    if k == 0 {
        return Err(Error::Input("selection is empty".into()));
    }
    let frame0 = &manifest.frames[outcome.candidate_positions[0]];
    let aspect = frame0.intrinsics.height as f64 / frame0.intrinsics.width as f64;
    let panel_h = PANEL_W * aspect;

    let sequential_gains = |picks: &[usize]| -> Vec<u64> {
        let mut seen = HashSet::new();
        picks
            .iter()
            .map(|&c| outcome.visibility[c].visible.iter().filter(|&&p| seen.insert(p)).count() as u64)
            .collect()
    };
    let rows = [
        Row { label: "adaptive", picks: outcome.greedy.selected.clone(), gains: outcome.greedy.gains.clone() },
        Row {
            label: "uniform",
            picks: outcome.uniform_baseline.clone(),
            gains: sequential_gains(&outcome.uniform_baseline),
        },
    ];
    let max_gain = rows.iter().flat_map(|r| r.gains.iter().copied()).max().unwrap_or(0).max(1);

    let stats = stats_lines(r);
    let row_w = k as f64 * PANEL_W + (k - 1) as f64 * GAP;
    let stats_w = stats.iter().map(|s| 0.6 * FONT * s.chars().count() as f64).fold(0.0, f64::max);
    let maps_w = 2.0 * MAP_SIZE + GAP;
    let width = 2.0 * MARGIN + row_w.max(maps_w).max(stats_w);

    let mut svg = String::new();
    let mut layout = Vec::new();
    let mut y = MARGIN;
    let mut body = String::new();

    for row in &rows {
        let title = format!("{} (K={k})", row.label);
        layout.push(text_box(&format!("{} title", row.label), MARGIN, y, &title));
        let _ = writeln!(body, r#"<text x="{MARGIN}" y="{}" font-size="{FONT}">{}</text>"#, y + FONT, escape(&title));
        y += LINE + 4.0;
        let mut covered = HashSet::new();
        for (slot, (&c, &gain)) in row.picks.iter().zip(&row.gains).enumerate() {
            let x = MARGIN + slot as f64 * (PANEL_W + GAP);
            let frame = &manifest.frames[outcome.candidate_positions[c]];
            let name = format!("{} panel {slot}", row.label);
            layout.push(LayoutBox::new(&name, x, y, PANEL_W, panel_h));
            let tint = 0.15 + 0.85 * gain as f64 / max_gain as f64;
            let _ = writeln!(
                body,
                r##"<g><rect x="{x}" y="{y}" width="{PANEL_W}" height="{panel_h:.2}" fill="#2a6fdb" fill-opacity="{tint:.3}" stroke="#333"/>"##
            );
            let (sx, sy) = (PANEL_W / frame.intrinsics.width as f64, panel_h / frame.intrinsics.height as f64);
            let vis = &outcome.visibility[c].visible;
            let step = stride(vis.len(), MAX_PANEL_POINTS);
            for (i, &p) in vis.iter().enumerate() {
                let new = covered.insert(p);
                if i % step != 0 {
                    continue;
                }
                if let Some(pr) = project_point(outcome.cloud.points[p as usize], &frame.intrinsics, &frame.extrinsics) {
                    let fill = if new { "#ffffff" } else { "#ffffff80" };
                    let _ = writeln!(
                        body,
                        r#"<rect x="{:.2}" y="{:.2}" width="1.5" height="1.5" fill="{fill}"/>"#,
                        x + pr.u * sx,
                        y + pr.v * sy
                    );
                }
            }
            let label = format!("frame {} +{gain}", frame.frame_id);
            let ly = y + panel_h + 2.0;
            layout.push(text_box(&format!("{name} label"), x, ly, &label));
            let _ = writeln!(body, r#"<text x="{x}" y="{}" font-size="{FONT}">{}</text></g>"#, ly + FONT, escape(&label));
        }
        y += panel_h + LINE + 2.0 + GAP;
    }

    // top-down maps
    let pts = &outcome.cloud.points;
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in pts {
        for a in 0..2 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-9);
    let scale = (MAP_SIZE - 8.0) / span;
    for (m, row) in rows.iter().enumerate() {
        let x = MARGIN + m as f64 * (MAP_SIZE + GAP);
        let title = format!("{} top-down", row.label);
        layout.push(text_box(&format!("{} map title", row.label), x, y, &title));
        let _ = writeln!(body, r#"<text x="{x}" y="{}" font-size="{FONT}">{}</text>"#, y + FONT, escape(&title));
        let my = y + LINE + 4.0;
        layout.push(LayoutBox::new(format!("{} map", row.label), x, my, MAP_SIZE, MAP_SIZE));
        let _ = writeln!(body, r##"<rect x="{x}" y="{my}" width="{MAP_SIZE}" height="{MAP_SIZE}" fill="none" stroke="#333"/>"##);
        let covered: HashSet<u32> = row.picks.iter().flat_map(|&c| outcome.visibility[c].visible.iter().copied()).collect();
        let step = stride(pts.len(), MAX_MAP_POINTS);
        for (i, p) in pts.iter().enumerate().step_by(step) {
            let fill = if covered.contains(&(i as u32)) { "#2a9d4b" } else { "#d64545" };
            let _ = writeln!(
                body,
                r#"<rect x="{:.2}" y="{:.2}" width="1.5" height="1.5" fill="{fill}"/>"#,
                x + 4.0 + (p[0] - lo[0]) * scale,
                my + MAP_SIZE - 4.0 - (p[1] - lo[1]) * scale
            );
        }
    }
    y += LINE + 4.0 + MAP_SIZE + GAP;

    for (i, s) in stats.iter().enumerate() {
        layout.push(text_box(&format!("stats line {i}"), MARGIN, y, s));
        let _ = writeln!(body, r#"<text x="{MARGIN}" y="{}" font-size="{FONT}" class="stats">{}</text>"#, y + FONT, escape(s));
        y += LINE;
    }
    let height = y + MARGIN;

    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="monospace">"#
    );
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#fafafa"/>"##);
    svg.push_str(&body);
    svg.push_str("</svg>\n");
    Ok(CoverageFigure { svg, width, height, layout, stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coverage::{adaptive_sample_detailed, SamplerConfig};
    use crate::synthetic::{SyntheticScene, SyntheticSceneSpec};

    fn outcome(frames: usize, m: usize, k: usize, seed: u64) -> (SamplingOutcome, SceneManifest) {
        let spec = SyntheticSceneSpec { frames, width: 56, height: 28, seed, ..Default::default() };
        let scene = SyntheticScene::generate(&spec).unwrap();
        let (depths, _) = scene.render_all();
        let cfg = SamplerConfig { voxel_size: 0.1, ..SamplerConfig::new(frames, m, k) };
        (adaptive_sample_detailed(&scene.manifest, depths.as_slice(), &cfg).unwrap(), scene.manifest)
    }

    #[test]
    fn stats_are_verbatim() {
        let (o, m) = outcome(12, 6, 2, 1);
        let fig = coverage_figure(&o, &m).unwrap();
        assert!(fig.svg.contains(&format!("covered_points: {}", o.report.covered_points)));
        assert!(fig.svg.contains(&format!("uniform_baseline_covered: {}", o.report.uniform_baseline_covered)));
        assert_eq!(fig.stats, stats_lines(&o.report));
        check_layout(&fig.layout, fig.width, fig.height).unwrap();
    }

    #[test]
    fn single_panel_per_method() {
        let (o, m) = outcome(8, 4, 1, 2);
        let fig = coverage_figure(&o, &m).unwrap();
        let panels = fig.layout.iter().filter(|b| b.name.contains("panel") && !b.name.ends_with("label")).count();
        assert_eq!(panels, 2);
        check_layout(&fig.layout, fig.width, fig.height).unwrap();
    }

    #[test]
    fn overlap_detected() {
        let a = LayoutBox::new("a", 0.0, 0.0, 10.0, 10.0);
        let b = LayoutBox::new("b", 5.0, 5.0, 10.0, 10.0);
        let c = LayoutBox::new("c", 10.0, 0.0, 10.0, 10.0);
        assert!(check_layout(&[a.clone(), b], 100.0, 100.0).is_err());
        assert!(check_layout(&[a.clone(), c], 100.0, 100.0).is_ok());
        assert!(check_layout(&[a], 5.0, 100.0).is_err());
    }
}
