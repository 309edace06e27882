//! Time-truncated prefix predictions: run the model on every growing block
//! prefix of a document to localize which text triggers which label.
//!
//! Row `i` of the prefix matrix is the prediction over blocks `1..=i`; the
//! last row is exactly the full-document prediction. Block embeddings are
//! computed once and shared across rows, which changes nothing numerically
//! because heads are deterministic in eval mode and only ever read the
//! unmasked prefix.

use alloc::string::String;
use alloc::vec::Vec;

use crate::blocking::BlockedDocument;
use crate::embed::{EmbeddingBackend, EmbeddingCache};
use crate::model::{HydranetModel, ModelError};

#[derive(Debug, Clone, PartialEq)]
pub enum ExplainError {
    EmptyDocument,
    Model(ModelError),
}

impl From<ModelError> for ExplainError {
    fn from(e: ModelError) -> Self {
        ExplainError::Model(e)
    }
}

impl core::fmt::Display for ExplainError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ExplainError::EmptyDocument => write!(f, "document has no non-empty blocks"),
            ExplainError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl core::error::Error for ExplainError {}

/// `n_t x K` probabilities over growing prefixes, plus the label order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixPredictionMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl PrefixPredictionMatrix {
    /// Number of prefixes (non-empty blocks), never the padded capacity.
    pub fn prefixes(&self) -> usize {
        self.values.len()
    }

    pub fn label_count(&self) -> usize {
        self.labels.len()
    }
}

/// The prefix expansion of a blocked document: row `i` keeps blocks `1..=i`
/// and pads the rest with empty strings.
pub fn prefix_matrix(doc: &BlockedDocument) -> Result<Vec<BlockedDocument>, ExplainError> {
    let n_t = doc.real_blocks();
    if n_t == 0 {
        return Err(ExplainError::EmptyDocument);
    }
    Ok((1..=n_t).map(|i| doc.truncate_blocks(i)).collect())
}

/// Predict every prefix of `text`. Embeddings are computed once; row `i` is
/// bit-identical to `predict` on the i-block truncation of the text.
pub fn time_distributed_predict<B: EmbeddingBackend + ?Sized>(
    model: &HydranetModel,
    text: &str,
    backend: &B,
    cache: Option<&mut dyn EmbeddingCache>,
) -> Result<PrefixPredictionMatrix, ExplainError> {
    let (features, mask) = model.featurize(text, backend, cache)?;
    let n_t = mask.iter().filter(|&&m| m).count();
    if n_t == 0 {
        return Err(ExplainError::EmptyDocument);
    }
    let mut values = Vec::with_capacity(n_t);
    let mut prefix_mask = alloc::vec![false; mask.len()];
    for i in 0..n_t {
        prefix_mask[i] = true;
        values.push(model.predict_features(&features, &prefix_mask)?);
    }
    Ok(PrefixPredictionMatrix {
        labels: model.labels().iter().map(|&s| String::from(s)).collect(),
        values,
    })
}

/// A block where a label's probability first rises above 0.5.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct TriggerSpan {
    pub label: String,
    /// 1-based index of the triggering block.
    pub block: usize,
    /// Character offsets of that block within the (truncated) document.
    pub char_start: usize,
    pub char_end: usize,
}

/// Rising-edge trigger spans: for each label, the blocks where the prefix
/// probability first crosses 0.5 upward. `text_chars` bounds the last span.
pub fn trigger_spans(
    matrix: &PrefixPredictionMatrix,
    block_size_chars: usize,
    text_chars: usize,
) -> Vec<TriggerSpan> {
    let mut spans = Vec::new();
    for (k, label) in matrix.labels.iter().enumerate() {
        let mut prev = 0.0;
        for (i, row) in matrix.values.iter().enumerate() {
            let p = row[k];
            if p > 0.5 && prev <= 0.5 {
                let char_start = i * block_size_chars;
                let char_end = ((i + 1) * block_size_chars).min(text_chars);
                spans.push(TriggerSpan {
                    label: label.clone(),
                    block: i + 1,
                    char_start,
                    char_end,
                });
            }
            prev = p;
        }
    }
    spans
}

/// CSV rendering: header `prefix_blocks,<label>...`, then one row per prefix
/// with probabilities at 6 decimal places.
pub fn heatmap_csv(matrix: &PrefixPredictionMatrix) -> String {
    let mut out = String::from("prefix_blocks");
    for label in &matrix.labels {
        out.push(',');
        out.push_str(label);
    }
    out.push('\n');
    for (i, row) in matrix.values.iter().enumerate() {
        out.push_str(&alloc::format!("{}", i + 1));
        for v in row {
            out.push_str(&alloc::format!(",{v:.6}"));
        }
        out.push('\n');
    }
    out
}

/// Linear white-to-red ramp on [0, 1]: 0.0 is `#FFFFFF`, 1.0 is `#FF0000`.
pub fn heat_color(value: f64) -> String {
    let v = value.clamp(0.0, 1.0);
    let gb = libm::round(255.0 * (1.0 - v)) as u8;
    alloc::format!("#FF{gb:02X}{gb:02X}")
}

const CELL: usize = 24;
const LEFT: usize = 64;
const TOP: usize = 40;

/// SVG rendering: an `n_t x K` grid of fixed 24px cells on the white-to-red
/// ramp, with prefix-length row labels and label column headers.
pub fn heatmap_svg(matrix: &PrefixPredictionMatrix) -> String {
    let rows = matrix.prefixes();
    let cols = matrix.label_count();
    let width = LEFT + cols * CELL + 8;
    let height = TOP + rows * CELL + 8;
    let mut out = String::new();
    out.push_str(&alloc::format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\">\n"
    ));
    out.push_str("<style>text{font-family:monospace;font-size:11px;fill:#333}</style>\n");
    for (c, label) in matrix.labels.iter().enumerate() {
        let x = LEFT + c * CELL + CELL / 2;
        out.push_str(&alloc::format!(
            "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            TOP - 8,
            xml_escape(label)
        ));
    }
    for (r, row) in matrix.values.iter().enumerate() {
        let y = TOP + r * CELL;
        out.push_str(&alloc::format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 6,
            y + CELL / 2 + 4,
            r + 1
        ));
        for (c, &v) in row.iter().enumerate() {
            let x = LEFT + c * CELL;
            out.push_str(&alloc::format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{}\" \
                 stroke=\"#CCCCCC\"><title>{:.6}</title></rect>\n",
                heat_color(v),
                v
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '&' => out.push_str("&amp;"),
            '"' => out.push_str("&quot;"),
            other => out.push(other),
        }
    }
    out
}
