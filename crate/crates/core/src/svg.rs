//! Dendrogram and heatmap figures as standalone SVG documents.
//!
//! # Layout
//!
//! Dendrogram: leaves are placed left to right in [`LinkageTree::leaf_order`]
//! at a fixed pitch. The vertical axis maps merge height linearly from the
//! baseline (height 0) to the top margin (maximum height). Each merge node
//! sits at the mean x of its two children and is drawn as a bracket: two
//! vertical legs rising from the children's heights, joined by a horizontal
//! bar at the merge height. An optional dashed line marks the cut threshold.
//!
//! Heatmap: cell `(i, j)` is drawn at row `i`, column `j` of a square grid,
//! with rows and columns in the given order. Fill is a linear blend from a
//! light to a dark color over the matrix's finite range; non-finite entries
//! are gray. Every cell carries its value in a `<title>` tooltip.
//!
//! Each document starts with the caller's notes as XML comments. A
//! generation timestamp is added only when requested, so repeated renders
//! of the same input are byte-identical by default.

use std::fmt::Write as _;

use crate::similarity::{LinkageTree, Matrix};

const PITCH: f64 = 28.0;
const MARGIN: f64 = 40.0;
const LABEL_SPACE: f64 = 60.0;
const PLOT_HEIGHT: f64 = 260.0;
const CELL: f64 = 28.0;

#[derive(Debug, Clone, Default)]
pub struct SvgOptions {
    pub title: Option<String>,
    /// Comment lines written at the top of the document.
    pub notes: Vec<String>,
    /// Adds a `generated` timestamp comment.
    pub timestamp: bool,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn comment(s: &str) -> String {
    // `--` may not appear inside an XML comment
    s.replace("--", "- -")
}

fn header(out: &mut String, width: f64, height: f64, opts: &SvgOptions) {
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    for n in &opts.notes {
        let _ = writeln!(out, "<!-- {} -->", comment(n));
    }
    if opts.timestamp {
        let _ = writeln!(out, "<!-- generated: {} -->", chrono::Utc::now().to_rfc3339());
    }
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    if let Some(t) = &opts.title {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
            width / 2.0,
            escape(t)
        );
    }
}

/// Renders a dendrogram; `cut_height` draws the threshold line.
pub fn dendrogram(tree: &LinkageTree, cut_height: Option<f64>, opts: &SvgOptions) -> String {
    let n = tree.n_leaves();
    let width = 2.0 * MARGIN + PITCH * n.max(1) as f64;
    let height = MARGIN + PLOT_HEIGHT + LABEL_SPACE;
    let base = MARGIN + PLOT_HEIGHT;
    let max_h = tree.max_height();
    let y_of = |h: f64| {
        if max_h > 0.0 {
            base - PLOT_HEIGHT * h / max_h
        } else {
            base
        }
    };

    // x and height of every node: leaves first, then merges in order
    let mut pos = vec![(0.0, 0.0); n + tree.merges.len()];
    for (slot, leaf) in tree.leaf_order().into_iter().enumerate() {
        pos[leaf] = (MARGIN + PITCH * (slot as f64 + 0.5), 0.0);
    }
    for (k, m) in tree.merges.iter().enumerate() {
        pos[n + k] = ((pos[m.left].0 + pos[m.right].0) / 2.0, m.height);
    }

    let mut out = String::new();
    header(&mut out, width, height, opts);
    let _ = writeln!(out, r#"<g stroke="black" stroke-width="1.2" fill="none">"#);
    for (k, m) in tree.merges.iter().enumerate() {
        let (xl, hl) = pos[m.left];
        let (xr, hr) = pos[m.right];
        let ym = y_of(pos[n + k].1);
        let _ = writeln!(
            out,
            r#"<path d="M{xl:.1},{:.1} V{ym:.1} H{xr:.1} V{:.1}"><title>{} {:.6}</title></path>"#,
            y_of(hl),
            y_of(hr),
            tree.method,
            m.height
        );
    }
    let _ = writeln!(out, "</g>");
    if let Some(c) = cut_height {
        let y = y_of(c);
        let _ = writeln!(
            out,
            r#"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="red" stroke-dasharray="4 3"/>"#,
            MARGIN / 2.0,
            width - MARGIN / 2.0
        );
    }
    for (leaf, id) in tree.leaf_ids.iter().enumerate() {
        let x = pos[leaf].0;
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{:.1}" text-anchor="end" transform="rotate(-90 {x:.1} {:.1})">{}</text>"#,
            base + 8.0,
            base + 8.0,
            escape(id)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn blend(t: f64) -> String {
    let (lo, hi) = ([247.0, 251.0, 255.0], [8.0, 48.0, 107.0]);
    let c: Vec<u8> = lo
        .iter()
        .zip(hi)
        .map(|(a, b)| (a + (b - a) * t.clamp(0.0, 1.0)).round() as u8)
        .collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Renders a square or rectangular matrix with row and column labels.
pub fn heatmap(row_ids: &[String], col_ids: &[String], m: &Matrix, opts: &SvgOptions) -> String {
    let left = MARGIN + LABEL_SPACE;
    let top = MARGIN + LABEL_SPACE;
    let width = left + CELL * m.ncols as f64 + MARGIN;
    let height = top + CELL * m.nrows as f64 + MARGIN;
    let finite: Vec<f64> = m.data.iter().copied().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut out = String::new();
    header(&mut out, width, height, opts);
    for i in 0..m.nrows {
        for j in 0..m.ncols {
            let v = m.get(i, j);
            let fill = if v.is_finite() { blend((v - lo) / span) } else { "#bbbbbb".into() };
            let _ = writeln!(
                out,
                r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="{fill}"><title>{} / {}: {v}</title></rect>"#,
                left + CELL * j as f64,
                top + CELL * i as f64,
                escape(row_ids.get(i).map(String::as_str).unwrap_or("")),
                escape(col_ids.get(j).map(String::as_str).unwrap_or("")),
            );
        }
    }
    for (i, id) in row_ids.iter().enumerate().take(m.nrows) {
        let _ = writeln!(
            out,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            left - 6.0,
            top + CELL * (i as f64 + 0.5),
            escape(id)
        );
    }
    for (j, id) in col_ids.iter().enumerate().take(m.ncols) {
        let x = left + CELL * (j as f64 + 0.5);
        let y = top - 6.0;
        let _ = writeln!(
            out,
            r#"<text x="{x:.1}" y="{y:.1}" transform="rotate(-90 {x:.1} {y:.1})">{}</text>"#,
            escape(id)
        );
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::{linkage, DistanceMatrix, LinkageMethod};

    fn tree() -> LinkageTree {
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let m = Matrix::from_rows(&[vec![0.0, 1.0, 4.0], vec![1.0, 0.0, 3.0], vec![4.0, 3.0, 0.0]]).unwrap();
        linkage(&DistanceMatrix::new(ids, m).unwrap(), LinkageMethod::Average).unwrap()
    }

    #[test]
    fn dendrogram_has_one_bracket_per_merge_and_every_label() {
        let svg = dendrogram(&tree(), Some(2.0), &SvgOptions::default());
        assert_eq!(svg.matches("<path").count(), 2);
        assert_eq!(svg.matches("stroke-dasharray").count(), 1);
        for id in ["a", "b", "c"] {
            assert!(svg.contains(&format!(">{id}</text>")));
        }
        assert!(svg.trim_end().ends_with("</svg>"));
    }

    #[test]
    fn output_is_stable_unless_timestamped() {
        let t = tree();
        let opts = SvgOptions {
            notes: vec!["seed: 1 -- x".into()],
            ..SvgOptions::default()
        };
        assert_eq!(dendrogram(&t, None, &opts), dendrogram(&t, None, &opts));
        assert!(dendrogram(&t, None, &opts).contains("<!-- seed: 1 - - x -->"));
        let stamped = dendrogram(&t, None, &SvgOptions { timestamp: true, ..opts });
        assert!(stamped.contains("generated:"));
    }

    #[test]
    fn heatmap_draws_every_cell_and_escapes_labels() {
        let ids = vec!["<1>".to_string(), "2".to_string()];
        let m = Matrix::from_rows(&[vec![0.0, 1.0], vec![f64::NAN, 0.5]]).unwrap();
        let svg = heatmap(&ids, &ids, &m, &SvgOptions::default());
        assert_eq!(svg.matches("<rect x=").count(), 4);
        assert!(svg.contains("&lt;1&gt;"));
        assert!(svg.contains("#bbbbbb"));
        assert!(svg.contains(&blend(0.0)) && svg.contains(&blend(1.0)));
    }
}
