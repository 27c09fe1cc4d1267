//! Minimal static SVG boxplots: one box-and-whisker glyph per design cell,
//! built from precomputed five-number summaries. No dependencies, no
//! interactivity — just something a browser or image viewer renders.

use crate::error::{CliError, Result};
use crate::metrics::FiveNumber;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

const PLOT_HEIGHT: f64 = 260.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 50.0;
const CELL_WIDTH: f64 = 90.0;
const BOX_WIDTH: f64 = 44.0;

fn px(v: f64) -> String {
    format!("{v:.2}")
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes one boxplot per `(label, summary)` pair, sharing a vertical axis.
pub fn write_boxplot_svg(
    path: &Path,
    title: &str,
    cells: &[(String, FiveNumber)],
) -> Result<()> {
    if cells.is_empty() {
        return Err(CliError::data("no cells to plot".to_string()));
    }
    let width = MARGIN_LEFT + CELL_WIDTH * cells.len() as f64 + 30.0;
    let height = MARGIN_TOP + PLOT_HEIGHT + MARGIN_BOTTOM;

    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (_, s) in cells {
        lo = lo.min(s.min);
        hi = hi.max(s.max);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 * hi.abs().max(1.0) };
    let (lo, hi) = (lo - pad, hi + pad);
    let y = |v: f64| MARGIN_TOP + PLOT_HEIGHT * (hi - v) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         font-family=\"sans-serif\" font-size=\"12\">",
        px(width),
        px(height)
    );
    let _ = writeln!(
        svg,
        "<text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{}</text>",
        px(width / 2.0),
        escape(title)
    );

    // Vertical axis with five ticks.
    let _ = writeln!(
        svg,
        "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>",
        px(MARGIN_LEFT),
        px(MARGIN_TOP),
        px(MARGIN_TOP + PLOT_HEIGHT)
    );
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let yy = y(v);
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>\
             <text x=\"{3}\" y=\"{4}\" text-anchor=\"end\">{5:.4}</text>",
            px(MARGIN_LEFT - 5.0),
            px(yy),
            px(MARGIN_LEFT),
            px(MARGIN_LEFT - 8.0),
            px(yy + 4.0),
            v
        );
    }

    for (i, (label, s)) in cells.iter().enumerate() {
        let cx = MARGIN_LEFT + CELL_WIDTH * (i as f64 + 0.5);
        let x0 = cx - BOX_WIDTH / 2.0;
        let x1 = cx + BOX_WIDTH / 2.0;
        // Whiskers with end caps.
        let _ = writeln!(
            svg,
            "<line x1=\"{0}\" y1=\"{1}\" x2=\"{0}\" y2=\"{2}\" stroke=\"black\"/>\
             <line x1=\"{0}\" y1=\"{3}\" x2=\"{0}\" y2=\"{4}\" stroke=\"black\"/>",
            px(cx),
            px(y(s.min)),
            px(y(s.q1)),
            px(y(s.q3)),
            px(y(s.max))
        );
        for v in [s.min, s.max] {
            let _ = writeln!(
                svg,
                "<line x1=\"{}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\"/>",
                px(cx - BOX_WIDTH / 4.0),
                px(y(v)),
                px(cx + BOX_WIDTH / 4.0)
            );
        }
        // Box and median line.
        let _ = writeln!(
            svg,
            "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"white\" stroke=\"black\"/>",
            px(x0),
            px(y(s.q3)),
            px(BOX_WIDTH),
            px((y(s.q1) - y(s.q3)).max(0.0))
        );
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" y1=\"{1}\" x2=\"{2}\" y2=\"{1}\" stroke=\"black\" stroke-width=\"2\"/>",
            px(x0),
            px(y(s.median)),
            px(x1)
        );
        let _ = writeln!(
            svg,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            px(cx),
            px(MARGIN_TOP + PLOT_HEIGHT + 20.0),
            escape(label)
        );
    }
    svg.push_str("</svg>\n");
    fs::write(path, svg)
        .map_err(|e| CliError::Io(format!("cannot write '{}': {e}", path.display())))?;
    Ok(())
}
