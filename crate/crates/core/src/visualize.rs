//! SVG heatmaps of token attributions: one row per decision step, cells
//! shaded red for positive and blue for negative scores.

use std::fmt::Write;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum VisualizeError {
    #[error("row '{label}' has {scores} scores for {tokens} tokens")]
    Length { label: String, scores: usize, tokens: usize },
}

/// One heatmap row.
#[derive(Clone, Debug)]
pub struct HeatmapRow {
    pub label: String,
    pub scores: Vec<f64>,
    /// Token positions to underline (the oracle rationale of the step).
    pub underline: Vec<usize>,
}

/// Fill colour for `score` after dividing by the row's largest magnitude.
/// Zero, and any row whose scores are all zero, renders white.
pub fn cell_color(score: f64, scale: f64) -> String {
    let v = if scale > 0.0 { (score / scale).clamp(-1.0, 1.0) } else { 0.0 };
    let fade = (255.0 * (1.0 - v.abs())).round() as u8;
    if v > 0.0 {
        format!("#ff{fade:02x}{fade:02x}")
    } else if v < 0.0 {
        format!("#{fade:02x}{fade:02x}ff")
    } else {
        "#ffffff".into()
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const CELL_W: usize = 64;
const CELL_H: usize = 28;
const LABEL_W: usize = 150;

pub fn render_svg(title: &str, tokens: &[&str], rows: &[HeatmapRow]) -> Result<String, VisualizeError> {
    for r in rows {
        if r.scores.len() != tokens.len() {
            return Err(VisualizeError::Length { label: r.label.clone(), scores: r.scores.len(), tokens: tokens.len() });
        }
    }
    let width = LABEL_W + CELL_W * tokens.len() + 10;
    let height = 40 + CELL_H * rows.len() + 10;
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" font-family="monospace" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<text x="4" y="18" font-size="14">{}</text>"#, escape(title));
    for (ri, row) in rows.iter().enumerate() {
        let y = 30 + ri * CELL_H;
        let scale = row.scores.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let _ = writeln!(svg, r#"<g class="step" data-row="{ri}">"#);
        let _ = writeln!(svg, r#"<text x="4" y="{}">{}</text>"#, y + 18, escape(&row.label));
        for (i, (tok, &score)) in tokens.iter().zip(&row.scores).enumerate() {
            let x = LABEL_W + i * CELL_W;
            let _ = writeln!(
                svg,
                r##"<rect class="cell" x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="{}" stroke="#cccccc"><title>{:.6}</title></rect>"##,
                cell_color(score, scale),
                score
            );
            let deco = if row.underline.contains(&i) { r#" text-decoration="underline" font-weight="bold""# } else { "" };
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle"{deco}>{}</text>"#,
                x + CELL_W / 2,
                y + 18,
                escape(tok)
            );
            if !deco.is_empty() {
                let _ = writeln!(
                    svg,
                    r#"<line class="rationale" x1="{}" y1="{}" x2="{}" y2="{}" stroke="black" stroke-width="2"/>"#,
                    x + 6,
                    y + CELL_H - 3,
                    x + CELL_W - 6,
                    y + CELL_H - 3
                );
            }
        }
        let _ = writeln!(svg, "</g>");
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(scores: Vec<f64>) -> HeatmapRow {
        HeatmapRow { label: "step 1".into(), scores, underline: vec![1] }
    }

    fn fills(svg: &str) -> Vec<String> {
        svg.lines()
            .filter(|l| l.contains(r#"class="cell""#))
            .map(|l| l.split("fill=\"").nth(1).unwrap()[..7].to_string())
            .collect()
    }

    #[test]
    fn one_cell_per_token() {
        let toks = ["<bos>", "go", "to", "red", "<eos>"];
        let svg = render_svg("t", &toks, &[row(vec![0.0, 0.5, -0.2, 1.0, 0.0]), row(vec![0.0; 5])]).unwrap();
        assert_eq!(svg.matches(r#"class="cell""#).count(), 10);
        assert_eq!(svg.matches(r#"class="step""#).count(), 2);
        assert!(svg.contains("&lt;bos&gt;"));
        assert_eq!(svg.matches(r#"class="rationale""#).count(), 2);
    }

    #[test]
    fn zero_scores_are_white() {
        let svg = render_svg("t", &["a", "b"], &[row(vec![0.0, 0.0])]).unwrap();
        assert!(fills(&svg).iter().all(|f| f == "#ffffff"));
    }

    #[test]
    fn negation_swaps_red_and_blue() {
        let pos = fills(&render_svg("t", &["a", "b", "c"], &[row(vec![1.0, -0.5, 0.25])]).unwrap());
        let neg = fills(&render_svg("t", &["a", "b", "c"], &[row(vec![-1.0, 0.5, -0.25])]).unwrap());
        assert_eq!(pos[0], "#ff0000");
        assert_eq!(neg[0], "#0000ff");
        for (p, n) in pos.iter().zip(&neg) {
            let swapped = format!("#{}{}{}", &p[5..7], &p[3..5], &p[1..3]);
            assert_eq!(&swapped, n);
        }
    }

    #[test]
    fn length_mismatch_errors() {
        assert!(render_svg("t", &["a", "b"], &[row(vec![1.0])]).is_err());
    }
}
