//! Coupling-coefficient heatmaps for routing aggregators.
//!
//! Each routed sequence becomes a [`Section`]: an `L × M` coupling matrix
//! plus the token shown at each position. Sections are written as TSV
//! (exact values) and as a self-contained HTML page with one row per
//! output capsule.

use std::fmt::Write as _;

use crate::aggregation::{RoutingState, ROUTING_TSV_HEADER};
use crate::autodiff::Tensor;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::Model;

/// How raw `c_ij` map to display intensity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Normalization {
    /// Divide by the largest value in the capsule's row.
    #[default]
    Row,
    /// Divide by the largest value in the section.
    Global,
}

impl std::str::FromStr for Normalization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" => Ok(Normalization::Row),
            "global" => Ok(Normalization::Global),
            _ => Err(Error::config(format!(
                "unknown normalization `{s}` (row|global)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Section {
    /// `word`, `word:<s>` (sentence `s` of a document) or `sentence`.
    pub level: String,
    pub tokens: Vec<String>,
    pub state: RoutingState,
}

impl Section {
    pub fn coupling(&self, iteration: Option<usize>) -> Result<&Tensor> {
        self.state.coupling_at(iteration)
    }
}

/// Routing states of one input, with the model's prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Visualization {
    pub sentences: Vec<Vec<String>>,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub sections: Vec<Section>,
}

/// Runs `model` on tokenized input and collects every routing state it
/// produced. Fails when the model routes nowhere.
pub fn visualize(
    model: &Model,
    vocab: &Vocabulary,
    sentences: &[Vec<String>],
) -> Result<Visualization> {
    if sentences.is_empty() || sentences.iter().any(Vec::is_empty) {
        return Err(Error::contract("nothing to visualize in an empty input"));
    }
    let ids: Vec<u32> = sentences.iter().flatten().map(|t| vocab.id(t)).collect();
    let mut spans = Vec::with_capacity(sentences.len());
    let mut start = 0;
    for s in sentences {
        spans.push((start, s.len()));
        start += s.len();
    }
    let (probs, word_states, sentence_state) = model.predict(&ids, &spans)?;
    let hierarchical = model.sentence_aggregator.is_some();
    let mut sections = Vec::new();
    for (s, state) in word_states.into_iter().enumerate() {
        let Some(state) = state else { continue };
        let (level, tokens) = if hierarchical {
            (format!("word:{s}"), sentences[s].clone())
        } else {
            ("word".to_string(), sentences.concat())
        };
        sections.push(Section {
            level,
            tokens,
            state,
        });
    }
    if let Some(state) = sentence_state {
        let tokens = (0..sentences.len()).map(|s| format!("<s{s}>")).collect();
        sections.push(Section {
            level: "sentence".into(),
            tokens,
            state,
        });
    }
    if sections.is_empty() {
        return Err(Error::config("no routing state to visualize"));
    }
    let predicted =
        (0..probs.len()).fold(0, |best, k| if probs[k] > probs[best] { k } else { best });
    Ok(Visualization {
        sentences: sentences.to_vec(),
        probs,
        predicted,
        sections,
    })
}

/// Rows for every section of every input. The level column is prefixed
/// with the 1-based position in `items`, e.g. `2/word:0`.
pub fn routing_tsv(items: &[Visualization], iteration: Option<usize>) -> Result<String> {
    let mut out = Vec::new();
    out.extend_from_slice(ROUTING_TSV_HEADER.as_bytes());
    out.push(b'\n');
    for (n, item) in items.iter().enumerate() {
        for sec in &item.sections {
            let level = format!("{}/{}", n + 1, sec.level);
            sec.state
                .write_tsv(&mut out, &level, &sec.tokens, iteration)?;
        }
    }
    Ok(String::from_utf8(out).expect("tokens are UTF-8"))
}

/// Display intensities in `[0, 1]`, indexed `[capsule][position]`.
pub fn intensities(coupling: &Tensor, norm: Normalization) -> Vec<Vec<f64>> {
    let (len, m) = (coupling.shape()[0], coupling.shape()[1]);
    let rows: Vec<Vec<f64>> = (0..m)
        .map(|j| (0..len).map(|i| coupling.at2(i, j)).collect())
        .collect();
    let global = coupling.data().iter().copied().fold(0.0, f64::max);
    rows.into_iter()
        .map(|row| {
            let scale = match norm {
                Normalization::Row => row.iter().copied().fold(0.0, f64::max),
                Normalization::Global => global,
            };
            row.iter()
                .map(|&c| if scale > 0.0 { c / scale } else { 0.0 })
                .collect()
        })
        .collect()
}

pub fn escape_html(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

const STYLE: &str = "body{font-family:sans-serif;margin:2em}\
table{border-collapse:collapse;margin-bottom:1.5em}\
td{padding:2px 4px;border:1px solid #eee}\
th{text-align:right;padding-right:8px;font-weight:normal;color:#555}\
h2{font-size:1.1em}h3{font-size:1em;color:#333}";

/// Standalone page: one table per section, one row per capsule. Cell
/// backgrounds scale with the normalized coupling; the `title` attribute
/// carries the raw value. `labels` names the classes in prediction order.
pub fn render_html(
    items: &[Visualization],
    labels: &[String],
    iteration: Option<usize>,
    norm: Normalization,
) -> Result<String> {
    let mut h = String::new();
    h.push_str(
        "<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>routing weights</title>",
    );
    let _ = writeln!(h, "<style>{STYLE}</style></head><body>");
    for (n, item) in items.iter().enumerate() {
        let text = item
            .sentences
            .iter()
            .map(|s| s.join(" "))
            .collect::<Vec<_>>()
            .join(" | ");
        let label = labels
            .get(item.predicted)
            .cloned()
            .unwrap_or_else(|| item.predicted.to_string());
        let _ = writeln!(
            h,
            "<h2>#{} {} <small>(predicted {}, p={:.3})</small></h2>",
            n + 1,
            escape_html(&text),
            escape_html(&label),
            item.probs[item.predicted]
        );
        for sec in &item.sections {
            let c = sec.coupling(iteration)?;
            let _ = writeln!(h, "<h3>{}</h3>\n<table>", escape_html(&sec.level));
            for (j, row) in intensities(c, norm).iter().enumerate() {
                let _ = write!(h, "<tr><th>capsule {j}</th>");
                for (i, &a) in row.iter().enumerate() {
                    let _ = write!(
                        h,
                        "<td style=\"background:rgba(178,24,43,{a:.4})\" title=\"c[{i},{j}] = {}\">{}</td>",
                        c.at2(i, j),
                        escape_html(&sec.tokens[i])
                    );
                }
                h.push_str("</tr>\n");
            }
            h.push_str("</table>\n");
        }
    }
    h.push_str("</body></html>\n");
    Ok(h)
}
