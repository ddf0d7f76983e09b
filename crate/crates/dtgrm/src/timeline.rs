//! Per-sequence timeline images: ground truth and prediction rendered
//! as two horizontal color bands in a standalone SVG.

use std::path::Path;

use crate::error::Result;
use crate::metrics::segments_from_labels;

/// Distinct fills; classes beyond the palette cycle.
const PALETTE: [&str; 12] = [
    "#4e79a7", "#f28e2b", "#e15759", "#76b7b2", "#59a14f", "#edc948", "#b07aa1", "#ff9da7",
    "#9c755f", "#bab0ac", "#1170aa", "#e49444",
];

const WIDTH: f64 = 800.0;
const BAND_HEIGHT: f64 = 36.0;
const GAP: f64 = 26.0;
const MARGIN: f64 = 10.0;

fn band(out: &mut String, labels: &[usize], y: f64, t_len: usize) {
    for seg in segments_from_labels(labels) {
        let x = MARGIN + WIDTH * seg.start as f64 / t_len as f64;
        let w = WIDTH * (seg.end - seg.start) as f64 / t_len as f64;
        let fill = PALETTE[seg.label % PALETTE.len()];
        out.push_str(&format!(
            "  <rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{w:.2}\" height=\"{BAND_HEIGHT}\" \
             fill=\"{fill}\"><title>class {}</title></rect>\n",
            seg.label
        ));
    }
}

/// Two labeled bands: ground truth on top, prediction below.
pub fn render_timeline(id: &str, gt: &[usize], pred: &[usize]) -> String {
    assert_eq!(gt.len(), pred.len(), "timeline length mismatch");
    assert!(!gt.is_empty(), "timeline needs at least one frame");
    let height = 2.0 * (BAND_HEIGHT + GAP) + 2.0 * MARGIN;
    let total_w = WIDTH + 2.0 * MARGIN;
    let mut out = String::new();
    out.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{total_w}\" height=\"{height}\" \
         viewBox=\"0 0 {total_w} {height}\" font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    out.push_str(&format!(
        "  <text x=\"{MARGIN}\" y=\"{}\">{id}: ground truth</text>\n",
        MARGIN + 14.0
    ));
    band(&mut out, gt, MARGIN + GAP, gt.len());
    let y2 = MARGIN + GAP + BAND_HEIGHT + GAP;
    out.push_str(&format!(
        "  <text x=\"{MARGIN}\" y=\"{}\">prediction</text>\n",
        y2 - 6.0
    ));
    band(&mut out, pred, y2, gt.len());
    out.push_str("</svg>\n");
    out
}

pub fn write_timeline(path: &Path, id: &str, gt: &[usize], pred: &[usize]) -> Result<()> {
    std::fs::write(path, render_timeline(id, gt, pred))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_one_rect_per_segment() {
        let gt = [0, 0, 1, 1, 1, 2];
        let pred = [0, 0, 0, 1, 1, 2];
        let svg = render_timeline("seq", &gt, &pred);
        assert_eq!(svg.matches("<rect").count(), 6);
        assert!(svg.starts_with("<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("ground truth"));
        assert!(svg.contains("prediction"));
    }

    #[test]
    fn classes_beyond_the_palette_reuse_colors() {
        let gt = vec![13; 4];
        let svg = render_timeline("seq", &gt, &gt);
        assert!(svg.contains(PALETTE[13 % PALETTE.len()]));
    }
}
