//! Word-level attention heatmaps.
//!
//! Frame attention is averaged over the frames of each aligned word, the
//! word weights are split into three per-utterance rank bins, and the words
//! are rendered with one of three fixed highlight levels.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionMap;
use crate::synthcorpus::Word;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadSelect {
    /// Mean over heads.
    Mean,
    Head(usize),
}

/// A word with times in seconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimedWord {
    pub token: String,
    pub start: f64,
    pub end: f64,
}

/// Converts word times to frame spans by rounding to the nearest frame
/// boundary.
pub fn words_to_frames(words: &[TimedWord], frame_period: f64) -> Result<Vec<Word>> {
    if !(frame_period > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "frame period {frame_period} must be > 0"
        )));
    }
    words
        .iter()
        .map(|w| {
            if !(w.start >= 0.0 && w.end >= w.start) {
                return Err(Error::InvalidArgument(format!(
                    "word {:?} has invalid times {}..{}",
                    w.token, w.start, w.end
                )));
            }
            Ok(Word {
                token: w.token.clone(),
                start: (w.start / frame_period).round() as usize,
                end: (w.end / frame_period).round() as usize,
            })
        })
        .collect()
}

/// Mean attention over each word's frames. Words with empty spans get 0.
pub fn word_attention(map: &AttentionMap, alignment: &[Word], head: HeadSelect) -> Result<Vec<f64>> {
    let frames = map.frames();
    let row = match head {
        HeadSelect::Mean => map.head_mean(),
        HeadSelect::Head(i) => map
            .weights
            .get(i)
            .cloned()
            .ok_or_else(|| Error::InvalidArgument(format!("head {i} out of range for {} heads", map.heads())))?,
    };
    let mut prev_end = 0;
    for (i, w) in alignment.iter().enumerate() {
        if w.start > w.end || w.end > frames {
            return Err(Error::InvalidArgument(format!(
                "word {i} ({:?}) spans frames {}..{} outside 0..{frames}",
                w.token, w.start, w.end
            )));
        }
        if w.start < w.end {
            if w.start < prev_end {
                return Err(Error::InvalidArgument(format!(
                    "word {i} ({:?}) overlaps the previous word",
                    w.token
                )));
            }
            prev_end = w.end;
        }
    }
    Ok(alignment
        .iter()
        .map(|w| {
            if w.start == w.end {
                log::warn!("word {:?} covers no frames; weight set to 0", w.token);
                0.0
            } else {
                row[w.start..w.end].iter().sum::<f64>() / (w.end - w.start) as f64
            }
        })
        .collect())
}

/// Per-utterance tercile bins: a word's bin is `min(2, floor(3r/n))` where
/// `r` counts the words with strictly smaller weight, so ties go low.
pub fn quantize_bins(weights: &[f64]) -> Vec<u8> {
    let n = weights.len();
    weights
        .iter()
        .map(|&w| {
            let r = weights.iter().filter(|&&v| v < w).count();
            (3 * r / n).min(2) as u8
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RenderFormat {
    Ansi,
    Html,
}

impl std::str::FromStr for RenderFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ansi" => Ok(Self::Ansi),
            "html" => Ok(Self::Html),
            _ => Err(Error::InvalidArgument(format!("unknown render format {s:?}"))),
        }
    }
}

/// Background colours for bins 0, 1, 2.
pub const ANSI_CODES: [&str; 3] = ["\x1b[48;5;230m", "\x1b[48;5;215m", "\x1b[48;5;196m"];
pub const ANSI_RESET: &str = "\x1b[0m";
pub const HTML_CLASSES: [&str; 3] = ["att-low", "att-mid", "att-high"];

/// Stylesheet for the HTML classes, used by [`html_page`].
pub const HTML_STYLE: &str =
    ".att-low{background:#fff7e0}.att-mid{background:#fdae61}.att-high{background:#d7191c;color:#fff}";

fn escape_html(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
}

/// Space-separated highlighted words.
pub fn render<S: AsRef<str>>(words: &[S], bins: &[u8], format: RenderFormat) -> Result<String> {
    if words.len() != bins.len() {
        return Err(Error::Shape(format!("{} words but {} bins", words.len(), bins.len())));
    }
    if let Some(b) = bins.iter().find(|&&b| b > 2) {
        return Err(Error::InvalidArgument(format!("bin {b} outside 0..=2")));
    }
    let mut out = String::new();
    for (i, (w, &b)) in words.iter().zip(bins).enumerate() {
        if i > 0 {
            out.push(' ');
        }
        match format {
            RenderFormat::Ansi => {
                let _ = write!(out, "{}{}{ANSI_RESET}", ANSI_CODES[b as usize], w.as_ref());
            }
            RenderFormat::Html => {
                let _ = write!(out, "<span class=\"{}\">", HTML_CLASSES[b as usize]);
                escape_html(w.as_ref(), &mut out);
                out.push_str("</span>");
            }
        }
    }
    Ok(out)
}

/// Wraps rendered HTML spans in a standalone page.
pub fn html_page(title: &str, body: &str) -> String {
    let mut t = String::new();
    escape_html(title, &mut t);
    format!(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{t}</title><style>{HTML_STYLE}</style></head>\n<body><p>{body}</p></body></html>\n"
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word(token: &str, start: usize, end: usize) -> Word {
        Word {
            token: token.into(),
            start,
            end,
        }
    }

    fn map(rows: Vec<Vec<f64>>) -> AttentionMap {
        AttentionMap {
            weights: rows,
            frame_period: 0.08,
        }
    }

    #[test]
    fn uniform_attention_gives_equal_weights() {
        let m = map(vec![vec![0.125; 8]]);
        let w = word_attention(&m, &[word("a", 0, 4), word("b", 4, 8)], HeadSelect::Mean).unwrap();
        assert_eq!(w, vec![0.125, 0.125]);
    }

    #[test]
    fn one_hot_attention_lights_one_word() {
        let mut row = vec![0.0; 9];
        row[5] = 1.0;
        let align = [word("a", 0, 3), word("b", 3, 6), word("c", 6, 9)];
        let w = word_attention(&map(vec![row]), &align, HeadSelect::Head(0)).unwrap();
        assert_eq!(w[0], 0.0);
        assert!(w[1] > 0.0);
        assert_eq!(w[2], 0.0);
    }

    #[test]
    fn head_mean_mixes_uniform_and_one_hot() {
        let uniform = vec![1.0 / 6.0; 6];
        let mut hot = vec![0.0; 6];
        hot[2] = 1.0;
        let align = [word("a", 0, 2), word("b", 2, 4), word("c", 4, 6)];
        let w = word_attention(&map(vec![uniform, hot]), &align, HeadSelect::Mean).unwrap();
        // (1/6 + 1/2) / 2 on the hot word's average vs 1/12 elsewhere
        assert!((w[1] - (1.0 / 6.0 + 0.5) / 2.0).abs() < 1e-12);
        assert!(w[1] > w[0] && w[1] > w[2]);
    }

    #[test]
    fn bad_alignments_are_rejected() {
        let m = map(vec![vec![0.25; 4]]);
        assert!(word_attention(&m, &[word("a", 0, 3), word("b", 2, 4)], HeadSelect::Mean).is_err());
        assert!(word_attention(&m, &[word("a", 0, 5)], HeadSelect::Mean).is_err());
        assert!(word_attention(&m, &[word("a", 0, 4)], HeadSelect::Head(1)).is_err());
        let w = word_attention(&m, &[word("a", 0, 4), word("gap", 4, 4)], HeadSelect::Mean).unwrap();
        assert_eq!(w[1], 0.0);
    }

    #[test]
    fn tercile_bins() {
        let b = quantize_bins(&[0.2, 0.5, 0.3]);
        assert_eq!(b, vec![0, 2, 1]);
        assert_eq!(quantize_bins(&[0.4; 5]), vec![0; 5]);
        let six = quantize_bins(&[0.05, 0.30, 0.10, 0.25, 0.20, 0.10]);
        // sorted: .05 .10 .10 .20 .25 .30; the tied .10s both rank 1
        assert_eq!(six, vec![0, 2, 0, 2, 1, 0]);
        assert_eq!(quantize_bins(&[1.0]), vec![0]);
    }

    #[test]
    fn render_formats() {
        assert_eq!(render::<&str>(&[], &[], RenderFormat::Html).unwrap(), "");
        let html = render(&["a<b", "ok"], &[2, 0], RenderFormat::Html).unwrap();
        assert_eq!(
            html,
            "<span class=\"att-high\">a&lt;b</span> <span class=\"att-low\">ok</span>"
        );
        assert_eq!(html.matches("att-high").count(), 1);
        let ansi = render(&["x"], &[1], RenderFormat::Ansi).unwrap();
        assert_eq!(ansi, "\x1b[48;5;215mx\x1b[0m");
        assert!(render(&["x"], &[], RenderFormat::Ansi).is_err());
        assert!(render(&["x"], &[3], RenderFormat::Ansi).is_err());
    }

    #[test]
    fn word_times_round_to_frames() {
        let words = [
            TimedWord {
                token: "hi".into(),
                start: 0.0,
                end: 0.24,
            },
            TimedWord {
                token: "there".into(),
                start: 0.24,
                end: 0.4,
            },
        ];
        let f = words_to_frames(&words, 0.08).unwrap();
        assert_eq!((f[0].start, f[0].end, f[1].start, f[1].end), (0, 3, 3, 5));
    }
}
