//! Static token heatmaps of input and output uncertainty.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::GenerationTrace;
use crate::uncertainty::TokenUncertainty;

/// Background colors from the xterm 256-color cube, white to red.
pub const ANSI_RAMP: [u8; 6] = [231, 224, 217, 210, 203, 196];
const ANSI_RESET: &str = "\x1b[0m";
const RANGE_PERCENTILE: f64 = 0.99;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// `None` when no decision threshold was supplied.
    pub hallucinated: Option<bool>,
    pub reppl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationView {
    pub example_id: String,
    /// Prompt pieces followed by greedy output pieces.
    pub tokens: Vec<String>,
    /// `−log p̂` for prompt tokens, `−log p_g` for output tokens.
    pub values: Vec<f64>,
    pub input_len: usize,
    pub verdict: Verdict,
    pub masked_special_positions: Vec<usize>,
    /// Upper end of the color scale; values at or above it saturate.
    pub value_range: f64,
}

impl ExplanationView {
    pub fn validate(&self) -> Result<()> {
        if self.values.len() != self.tokens.len() {
            return Err(Error::Invariant(format!(
                "{}: {} values for {} tokens",
                self.example_id,
                self.values.len(),
                self.tokens.len()
            )));
        }
        if self.input_len > self.tokens.len() {
            return Err(Error::Invariant(format!(
                "{}: input longer than view",
                self.example_id
            )));
        }
        if let Some(&p) = self
            .masked_special_positions
            .iter()
            .find(|&&p| p >= self.tokens.len())
        {
            return Err(Error::Invariant(format!(
                "{}: special position {p} out of range",
                self.example_id
            )));
        }
        if !(self.value_range >= 0.0 && self.value_range.is_finite()) {
            return Err(Error::Invariant(format!(
                "{}: bad value range",
                self.example_id
            )));
        }
        Ok(())
    }

    fn is_special(&self, i: usize) -> bool {
        self.masked_special_positions.contains(&i)
    }

    /// Color intensity in `[0, 1]`.
    pub fn intensity(&self, i: usize) -> f64 {
        if self.value_range <= 0.0 || self.is_special(i) {
            return 0.0;
        }
        (self.values[i] / self.value_range).clamp(0.0, 1.0)
    }

    pub fn output_tokens(&self) -> &[String] {
        &self.tokens[self.input_len..]
    }
}

/// One view per trace, all sharing the 99th percentile of the batch's
/// visible values as their color range.
pub fn build_views(
    traces: &[GenerationTrace],
    scores: &[TokenUncertainty],
    threshold: Option<f64>,
) -> Result<Vec<ExplanationView>> {
    if traces.len() != scores.len() {
        return Err(Error::InvalidArgument(format!(
            "{} traces but {} scores",
            traces.len(),
            scores.len()
        )));
    }
    let mut views: Vec<ExplanationView> = traces
        .iter()
        .zip(scores)
        .map(|(t, tu)| build_view(t, tu, threshold))
        .collect();
    let visible: Vec<f64> = views
        .iter()
        .flat_map(|v| {
            v.values
                .iter()
                .enumerate()
                .filter(|(i, _)| !v.is_special(*i))
                .map(|(_, &x)| x)
        })
        .collect();
    let range = percentile(&visible, RANGE_PERCENTILE);
    for v in &mut views {
        v.value_range = range;
    }
    Ok(views)
}

/// A view scaled to its own values.
pub fn build_view(
    trace: &GenerationTrace,
    tu: &TokenUncertainty,
    threshold: Option<f64>,
) -> ExplanationView {
    let t0 = trace.input_len;
    let g = trace.greedy_tokens.len();
    let display = trace.display.as_ref();
    let input_pieces = display
        .map(|d| d.input_pieces.clone())
        .filter(|p| p.len() == t0)
        .unwrap_or_else(|| {
            (0..t0)
                .map(|i| fallback_piece(i, format!("[{i}]")))
                .collect()
        });
    let greedy_pieces = display
        .map(|d| d.greedy_pieces.clone())
        .filter(|p| p.len() == g)
        .unwrap_or_else(|| {
            trace
                .greedy_tokens
                .iter()
                .map(|tok| format!(" t{tok}"))
                .collect()
        });
    let mut tokens = input_pieces;
    tokens.extend(greedy_pieces);
    let mut values = tu.input_uncertainty();
    values.extend(tu.output_uncertainty());
    let masked_special_positions = display
        .map(|d| {
            d.special_positions
                .iter()
                .copied()
                .filter(|&p| p < tokens.len())
                .collect()
        })
        .unwrap_or_default();
    let mut view = ExplanationView {
        example_id: trace.example_id.clone(),
        tokens,
        values,
        input_len: t0,
        verdict: Verdict {
            hallucinated: threshold.map(|th| tu.severity() > th),
            reppl: tu.reppl,
        },
        masked_special_positions,
        value_range: 0.0,
    };
    let visible: Vec<f64> = (0..view.values.len())
        .filter(|&i| !view.is_special(i))
        .map(|i| view.values[i])
        .collect();
    view.value_range = percentile(&visible, RANGE_PERCENTILE);
    view
}

fn fallback_piece(i: usize, text: String) -> String {
    if i == 0 {
        text
    } else {
        format!(" {text}")
    }
}

/// Nearest-rank percentile of the finite values; 0 when there are none.
fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1].max(0.0)
}

fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn escape_href(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.') {
            out.push(b as char);
        } else {
            let _ = write!(out, "%{b:02X}");
        }
    }
    out
}

fn html_color(intensity: f64) -> String {
    let gb = (255.0 * (1.0 - intensity)).round() as u8;
    format!("#ff{gb:02x}{gb:02x}")
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em;max-width:60em}\
.tokens{white-space:pre-wrap;font-family:monospace;line-height:1.8}\
.tok{padding:0.1em 0}.special{color:transparent}\
.out{border-bottom:2px solid #555}\
table{border-collapse:collapse}td,th{padding:0.2em 0.8em;border-bottom:1px solid #ddd;text-align:left}";

fn verdict_text(v: &Verdict) -> String {
    let label = match v.hallucinated {
        Some(true) => "hallucinated",
        Some(false) => "faithful",
        None => "unlabeled",
    };
    format!("{label} (RePPL {:.4})", v.reppl)
}

/// A self-contained HTML page. Special tokens keep their place but are
/// rendered blank and uncolored.
pub fn render_html(view: &ExplanationView) -> String {
    let mut out = String::new();
    let title = escape_html(&view.example_id);
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{title}</title><style>{STYLE}</style></head><body>\n"
    );
    let _ = writeln!(out, "<h1>{title}</h1>");
    let _ = writeln!(
        out,
        "<p class=\"verdict\">{}</p>",
        escape_html(&verdict_text(&view.verdict))
    );
    let _ = writeln!(
        out,
        "<p class=\"scale\">color range 0 to {:.4}</p>",
        view.value_range
    );
    out.push_str("<div class=\"tokens\">");
    for (i, tok) in view.tokens.iter().enumerate() {
        let part = if i < view.input_len { "in" } else { "out" };
        if view.is_special(i) {
            let _ = write!(out, "<span class=\"tok {part} special\"></span>");
            continue;
        }
        let _ = write!(
            out,
            "<span class=\"tok {part}\" style=\"background:{}\" title=\"{:.4}\">{}</span>",
            html_color(view.intensity(i)),
            view.values[i],
            escape_html(tok)
        );
    }
    out.push_str("</div>\n</body></html>\n");
    out
}

/// Index page linking each example's `<id>.html`.
pub fn render_index(views: &[ExplanationView]) -> String {
    let mut out = String::new();
    let _ = write!(
        out,
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>explanations</title><style>{STYLE}</style></head><body>\n"
    );
    out.push_str("<table>\n<tr><th>example</th><th>RePPL</th><th>verdict</th></tr>\n");
    for v in views {
        let label = match v.verdict.hallucinated {
            Some(true) => "hallucinated",
            Some(false) => "faithful",
            None => "",
        };
        let _ = writeln!(
            out,
            "<tr><td><a href=\"{}.html\">{}</a></td><td>{:.4}</td><td>{label}</td></tr>",
            escape_href(&v.example_id),
            escape_html(&v.example_id),
            v.verdict.reppl
        );
    }
    out.push_str("</table>\n</body></html>\n");
    out
}

/// Ramp index for a token, monotone in its value.
pub fn ansi_level(view: &ExplanationView, i: usize) -> usize {
    (view.intensity(i) * (ANSI_RAMP.len() - 1) as f64).round() as usize
}

/// Tokens on 256-color backgrounds. Special tokens are printed uncolored;
/// stripping the escape sequences leaves the token concatenation.
pub fn render_ansi(view: &ExplanationView) -> String {
    let mut out = String::new();
    for (i, tok) in view.tokens.iter().enumerate() {
        if view.is_special(i) {
            out.push_str(tok);
            continue;
        }
        let _ = write!(
            out,
            "\x1b[48;5;{}m\x1b[38;5;16m{tok}{ANSI_RESET}",
            ANSI_RAMP[ansi_level(view, i)]
        );
    }
    out
}

/// One summary line for terminal listings.
pub fn ansi_header(view: &ExplanationView) -> String {
    format!("{}: {}", view.example_id, verdict_text(&view.verdict))
}
