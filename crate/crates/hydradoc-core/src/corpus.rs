//! Labeled document collections: the in-memory corpus type, stratified
//! splitting, and a synthetic keyword-corpus generator for desk-scale tests.
//!
//! File loaders (directory-of-class-folders, delimited records) live in the
//! std companion crate; they all funnel into [`Corpus::new`].

use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::params::seeding;

#[derive(Debug, Clone, PartialEq)]
pub enum CorpusError {
    EmptyText { index: usize },
    UnlabeledDocument { index: usize },
    InvalidFraction(f64),
    Stratification(String),
    TooFewClasses { got: usize },
    OverlappingKeywords(String),
    EmptyKeywordList(String),
}

impl core::fmt::Display for CorpusError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            CorpusError::EmptyText { index } => write!(f, "document {index} has empty text"),
            CorpusError::UnlabeledDocument { index } => {
                write!(f, "document {index} has no labels")
            }
            CorpusError::InvalidFraction(v) => {
                write!(f, "test fraction must be in (0, 1), got {v}")
            }
            CorpusError::Stratification(msg) => write!(f, "stratification failed: {msg}"),
            CorpusError::TooFewClasses { got } => {
                write!(f, "synthetic corpus needs at least 2 classes, got {got}")
            }
            CorpusError::OverlappingKeywords(kw) => {
                write!(f, "keyword `{kw}` appears in more than one class")
            }
            CorpusError::EmptyKeywordList(class) => {
                write!(f, "class `{class}` has no keywords")
            }
        }
    }
}

impl core::error::Error for CorpusError {}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub text: String,
    pub labels: Vec<String>,
}

/// An immutable labeled collection with a sorted label vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    documents: Vec<Document>,
    labels: Vec<String>,
    provenance: String,
}

impl Corpus {
    /// Build a corpus, deriving the (sorted) label vocabulary. Documents must
    /// have non-empty text and at least one label.
    pub fn new(documents: Vec<Document>, provenance: impl Into<String>) -> Result<Self, CorpusError> {
        let mut labels: Vec<String> = Vec::new();
        for (index, doc) in documents.iter().enumerate() {
            if doc.text.is_empty() {
                return Err(CorpusError::EmptyText { index });
            }
            if doc.labels.is_empty() {
                return Err(CorpusError::UnlabeledDocument { index });
            }
            for l in &doc.labels {
                if !labels.contains(l) {
                    labels.push(l.clone());
                }
            }
        }
        labels.sort();
        Ok(Corpus {
            documents,
            labels,
            provenance: provenance.into(),
        })
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }
}

fn signature(labels: &[String]) -> String {
    let mut sorted: Vec<&str> = labels.iter().map(String::as_str).collect();
    sorted.sort_unstable();
    sorted.join("\u{1f}")
}

/// Label-stratified split into (train, test): disjoint, exhaustive, and
/// seeded. Every label-set group must land at least one document on each
/// side, otherwise stratification fails.
pub fn split(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<(Corpus, Corpus), CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(test_fraction));
    }
    // Group document indices by label-set signature, in a deterministic order.
    let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
    for (i, doc) in corpus.documents().iter().enumerate() {
        let sig = signature(&doc.labels);
        match groups.iter_mut().find(|(s, _)| *s == sig) {
            Some((_, idxs)) => idxs.push(i),
            None => groups.push((sig, alloc::vec![i])),
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));

    let mut train_docs = Vec::new();
    let mut test_docs = Vec::new();
    for (gi, (sig, idxs)) in groups.iter().enumerate() {
        let n = idxs.len();
        let n_test = libm::round(n as f64 * test_fraction) as usize;
        if n_test == 0 || n_test >= n {
            return Err(CorpusError::Stratification(alloc::format!(
                "label set `{}` ({} docs) would put {} docs in the test split",
                sig.replace('\u{1f}', "+"),
                n,
                n_test
            )));
        }
        let mut shuffled = idxs.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::mix(seed, gi as u64));
        shuffled.shuffle(&mut rng);
        for (pos, &doc_idx) in shuffled.iter().enumerate() {
            let doc = corpus.documents()[doc_idx].clone();
            if pos < n_test {
                test_docs.push((doc_idx, doc));
            } else {
                train_docs.push((doc_idx, doc));
            }
        }
    }
    // Keep the original document order within each side.
    train_docs.sort_by_key(|(i, _)| *i);
    test_docs.sort_by_key(|(i, _)| *i);
    let train = Corpus::new(
        train_docs.into_iter().map(|(_, d)| d).collect(),
        alloc::format!("{} [train]", corpus.provenance()),
    )?;
    let test = Corpus::new(
        test_docs.into_iter().map(|(_, d)| d).collect(),
        alloc::format!("{} [test]", corpus.provenance()),
    )?;
    Ok((train, test))
}

/// One synthetic class: a name and the keywords that mark it.
#[derive(Debug, Clone)]
pub struct SyntheticClass {
    pub name: String,
    pub keywords: Vec<String>,
}

impl SyntheticClass {
    pub fn new(name: impl Into<String>, keywords: &[&str]) -> Self {
        SyntheticClass {
            name: name.into(),
            keywords: keywords.iter().map(|&k| String::from(k)).collect(),
        }
    }
}

const FILLER_WORDS: &[&str] = &[
    "the", "a", "of", "to", "and", "in", "that", "for", "with", "was", "were", "been", "have",
    "has", "this", "from", "they", "there", "about", "after", "before", "during", "report",
    "said", "today", "week", "year", "people", "group", "meeting", "early", "later", "public",
    "general", "record", "note", "update", "review", "offer", "plan",
];

fn validate_classes(classes: &[SyntheticClass]) -> Result<(), CorpusError> {
    if classes.len() < 2 {
        return Err(CorpusError::TooFewClasses { got: classes.len() });
    }
    let mut seen: Vec<String> = Vec::new();
    for class in classes {
        if class.keywords.is_empty() {
            return Err(CorpusError::EmptyKeywordList(class.name.clone()));
        }
        for kw in &class.keywords {
            let lower = kw.to_lowercase();
            if seen.contains(&lower) {
                return Err(CorpusError::OverlappingKeywords(kw.clone()));
            }
            seen.push(lower);
        }
    }
    Ok(())
}

fn synthetic_text(
    class: &SyntheticClass,
    target_chars: usize,
    rng: &mut ChaCha8Rng,
) -> String {
    let mut text = String::with_capacity(target_chars + 16);
    let mut keywords_planted = 0usize;
    loop {
        let plant = keywords_planted < 3 && text.len() * 3 > target_chars * 2;
        let word = if plant || rng.gen_bool(0.4) {
            keywords_planted += 1;
            class.keywords[rng.gen_range(0..class.keywords.len())].as_str()
        } else {
            FILLER_WORDS[rng.gen_range(0..FILLER_WORDS.len())]
        };
        if !text.is_empty() {
            text.push(' ');
        }
        text.push_str(word);
        if text.chars().count() >= target_chars {
            break;
        }
    }
    text
}

/// Generate `docs_per_class` single-label documents per class: filler words
/// with class keywords planted at random positions (at least 3 per document),
/// each roughly `doc_len_chars` long. Fully seeded.
pub fn synthetic_corpus(
    classes: &[SyntheticClass],
    docs_per_class: usize,
    doc_len_chars: usize,
    seed: u64,
) -> Result<Corpus, CorpusError> {
    validate_classes(classes)?;
    let mut documents = Vec::with_capacity(classes.len() * docs_per_class);
    for (ci, class) in classes.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seeding::mix(seed, ci as u64));
        for _ in 0..docs_per_class {
            // Lengths vary so truncated prefixes also look like real inputs.
            let target = doc_len_chars * rng.gen_range(75..=100) / 100;
            let text = synthetic_text(class, target.max(16), &mut rng);
            documents.push(Document {
                text,
                labels: alloc::vec![class.name.clone()],
            });
        }
    }
    Corpus::new(documents, "synthetic")
}

/// A two-class concatenation: class A text followed by class B text, labeled
/// with both. `boundary_chars` is the character offset where B begins.
#[derive(Debug, Clone)]
pub struct ConcatDocument {
    pub text: String,
    pub labels: (String, String),
    pub boundary_chars: usize,
}

/// Generate concatenated two-class documents (A then B), each half roughly
/// `half_len_chars` long, mirroring a document that changes topic midway.
pub fn synthetic_concat_docs(
    class_a: &SyntheticClass,
    class_b: &SyntheticClass,
    count: usize,
    half_len_chars: usize,
    seed: u64,
) -> Result<Vec<ConcatDocument>, CorpusError> {
    validate_classes(&[class_a.clone(), class_b.clone()])?;
    let mut out = Vec::with_capacity(count);
    let mut rng = ChaCha8Rng::seed_from_u64(seeding::mix(seed, 0x0c0c));
    for _ in 0..count {
        let a = synthetic_text(class_a, half_len_chars, &mut rng);
        let b = synthetic_text(class_b, half_len_chars, &mut rng);
        let boundary_chars = a.chars().count() + 1;
        let mut text = a;
        text.push(' ');
        text.push_str(&b);
        out.push(ConcatDocument {
            text,
            labels: (class_a.name.clone(), class_b.name.clone()),
            boundary_chars,
        });
    }
    Ok(out)
}
