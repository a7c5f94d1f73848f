//! Static HTML rendering of one rationale.

use std::fmt::Write;

/// Highlight colour at full mask value.
const HIGHLIGHT: (f64, f64, f64) = (255.0, 170.0, 0.0);

/// Background colour on the ramp from white (`m = 0`) to the highlight.
pub fn ramp(m: f64) -> (u8, u8, u8) {
    let m = m.clamp(0.0, 1.0);
    let mix = |c: f64| (255.0 + (c - 255.0) * m).round() as u8;
    (mix(HIGHLIGHT.0), mix(HIGHLIGHT.1), mix(HIGHLIGHT.2))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(ch),
        }
    }
    out
}

pub struct Explanation<'a> {
    pub title: &'a str,
    pub words: &'a [String],
    pub scores: &'a [f64],
    pub class_index: usize,
    pub class_probs: &'a [f64],
}

/// Self-contained document: class probabilities in a header, then every
/// token on a background whose intensity follows its score.
pub fn render_html(e: &Explanation<'_>) -> String {
    let mut html = String::new();
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>{}</title>\n\
         <style>\nbody {{ font-family: sans-serif; max-width: 60em; margin: 2em auto; }}\n\
         .probs td {{ padding: 0 1em 0 0; }}\n.target {{ font-weight: bold; }}\n\
         .text {{ line-height: 2; }}\n.tok {{ padding: 0.1em 0.15em; border-radius: 0.2em; }}\n</style>\n\
         </head>\n<body>\n<h1>{}</h1>\n<table class=\"probs\">\n",
        escape(e.title),
        escape(e.title)
    );
    for (c, p) in e.class_probs.iter().enumerate() {
        let class = if c == e.class_index { " class=\"target\"" } else { "" };
        let _ = writeln!(html, "<tr{class}><td>class {c}</td><td>{p:.4}</td></tr>");
    }
    let _ = writeln!(
        html,
        "</table>\n<p>Highlighted: rationale for class {}.</p>\n<p class=\"text\">",
        e.class_index
    );
    for (word, &m) in e.words.iter().zip(e.scores) {
        let (r, g, b) = ramp(m);
        let _ = writeln!(
            html,
            "<span class=\"tok\" style=\"background-color: rgb({r}, {g}, {b})\" title=\"{m:.4}\">{}</span>",
            escape(word)
        );
    }
    html.push_str("</p>\n</body>\n</html>\n");
    html
}
