//! Static heatmap rendering of per-token attribution scores.
//!
//! Output is a single self-contained HTML file: positive scores ramp to
//! green, negative to red, near-zero stays neutral, and the color scale is
//! normalized per example by the largest absolute score. Rendering is
//! byte-deterministic for fixed inputs.

/// Render token scores as a standalone HTML document.
///
/// `special` marks cls/pad positions, drawn with a dashed outline. The
/// caption should state the attribution settings (lambda, steps,
/// normalization); it is embedded verbatim (HTML-escaped).
pub fn render_heatmap(
    labels: &[String],
    scores: &[f64],
    special: &[bool],
    caption: &str,
) -> String {
    assert_eq!(labels.len(), scores.len());
    assert_eq!(labels.len(), special.len());
    let max_abs = scores.iter().fold(0.0f64, |m, &v| m.max(v.abs()));

    let mut body = String::new();
    for ((label, &score), &is_special) in labels.iter().zip(scores).zip(special) {
        let (r, g, b) = score_color(score, max_abs);
        let class = if is_special { "tok special" } else { "tok" };
        body.push_str(&format!(
            "<span class=\"{class}\" style=\"background:rgb({r},{g},{b})\" \
             title=\"{score:.6}\">{}</span>\n",
            escape(label)
        ));
    }

    format!(
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<style>\n\
         body {{ font-family: monospace; margin: 2em; }}\n\
         .tokens {{ line-height: 2.2; }}\n\
         .tok {{ padding: 3px 5px; margin: 2px; border-radius: 3px; }}\n\
         .tok.special {{ outline: 1px dashed #888; }}\n\
         .caption {{ margin-top: 1.5em; color: #444; font-size: 0.9em; }}\n\
         </style>\n</head>\n<body>\n<div class=\"tokens\">\n{body}</div>\n\
         <p class=\"caption\">{}</p>\n</body>\n</html>\n",
        escape(caption)
    )
}

/// White at zero, fully saturated green (positive) or red (negative) at the
/// per-example maximum magnitude.
fn score_color(score: f64, max_abs: f64) -> (u8, u8, u8) {
    if max_abs == 0.0 || score == 0.0 {
        return (255, 255, 255);
    }
    let t = (score.abs() / max_abs).clamp(0.0, 1.0);
    let fade = (255.0 * (1.0 - t * 0.75)).round() as u8;
    if score > 0.0 {
        (fade, 255, fade)
    } else {
        (255, fade, fade)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_scores_render_neutral() {
        let labels: Vec<String> = (0..3).map(|i| format!("tok{i}")).collect();
        let html = render_heatmap(&labels, &[0.0, 0.0, 0.0], &[true, false, false], "cap");
        assert_eq!(html.matches("rgb(255,255,255)").count(), 3);
        assert!(html.contains("class=\"tok special\""));
    }

    #[test]
    fn max_positive_token_gets_deepest_green() {
        let labels: Vec<String> = (0..3).map(|i| format!("tok{i}")).collect();
        let html = render_heatmap(&labels, &[0.5, 1.0, -1.0], &[false; 3], "");
        // strongest positive: full green with the deepest fade
        assert!(html.contains("rgb(64,255,64)"));
        // strongest negative mirrors it in red
        assert!(html.contains("rgb(255,64,64)"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let labels: Vec<String> = (0..4).map(|i| format!("t{i}")).collect();
        let scores = [0.1, -0.7, 0.0, 0.33333];
        let a = render_heatmap(&labels, &scores, &[false; 4], "m=50 lambda=1");
        let b = render_heatmap(&labels, &scores, &[false; 4], "m=50 lambda=1");
        assert_eq!(a, b);
    }

    #[test]
    fn caption_is_escaped() {
        let labels = vec!["x".to_string()];
        let html = render_heatmap(&labels, &[1.0], &[false], "<script>");
        assert!(!html.contains("<script>"));
    }
}
