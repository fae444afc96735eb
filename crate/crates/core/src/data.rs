//! Word-level tokenization, vocabulary, CSV ingestion, a synthetic sentiment
//! corpus, and padded mini-batches.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Mask;

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const DEFAULT_MIN_FREQUENCY: usize = 2;

/// Lowercases, isolates ASCII punctuation as standalone tokens, and splits
/// on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                tokens.push(std::mem::take(&mut cur));
            }
            tokens.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        tokens.push(cur);
    }
    tokens
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    pub min_frequency: usize,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, min_frequency: usize) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            index,
            min_frequency,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// SHA-256 over the newline-joined token list.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One token per line; the line index is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = s.lines().map(str::to_owned).collect();
        if tokens.len() < 2 || tokens[PAD_ID] != PAD_TOKEN || tokens[UNK_ID] != UNK_TOKEN {
            return Err(Error::Data {
                path: path.display().to_string(),
                line: 1,
                message: "vocabulary must start with <pad> and <unk>".into(),
            });
        }
        Ok(Self::from_tokens(tokens, 0))
    }
}

/// Vocabulary over tokens with count ≥ `min_frequency`, ordered by
/// descending count then lexicographically; ids 0 and 1 are PAD and UNK.
pub fn build_vocab<S: AsRef<str>>(train_texts: &[S], min_frequency: usize) -> Result<Vocab> {
    if train_texts.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for t in train_texts {
        for tok in tokenize(t.as_ref()) {
            *counts.entry(tok).or_default() += 1;
        }
    }
    let mut kept: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_frequency.max(1) && t != PAD_TOKEN && t != UNK_TOKEN)
        .collect();
    kept.sort_by(|(ta, ca), (tb, cb)| cb.cmp(ca).then_with(|| ta.cmp(tb)));
    let tokens = [PAD_TOKEN.to_owned(), UNK_TOKEN.to_owned()]
        .into_iter()
        .chain(kept.into_iter().map(|(t, _)| t))
        .collect();
    Ok(Vocab::from_tokens(tokens, min_frequency))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.csv",
            Split::Val => "val.csv",
            Split::Test => "test.csv",
        }
    }
}

/// Raw labelled texts of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct TextDataset {
    pub texts: Vec<String>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub split: Split,
}

impl TextDataset {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub label: usize,
}

/// Token-id sequences with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub n_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

/// Encodes texts, truncating to `max_seq_len`; an empty text becomes `[UNK]`.
pub fn encode_dataset(text: &TextDataset, vocab: &Vocab, max_seq_len: usize) -> Dataset {
    let examples = text
        .texts
        .iter()
        .zip(&text.labels)
        .map(|(t, &label)| {
            let mut ids = vocab.encode(t);
            ids.truncate(max_seq_len);
            if ids.is_empty() {
                ids.push(UNK_ID);
            }
            Example { ids, label }
        })
        .collect();
    Dataset {
        examples,
        n_classes: text.n_classes,
        split: text.split,
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CsvSchema {
    /// Labels must fall in `0..n_classes`; inferred as `max + 1` when unset.
    pub n_classes: Option<usize>,
}

/// Reads a `text,label` CSV (RFC 4180 quoting).
pub fn load_csv(path: &Path, schema: CsvSchema, split: Split) -> Result<TextDataset> {
    let shown = path.display().to_string();
    let data_err = |line: u64, message: String| Error::Data {
        path: shown.clone(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| data_err(0, e.to_string()))?;
    let headers = rdr.headers().map_err(|e| data_err(1, e.to_string()))?.clone();
    if headers.len() != 2 || &headers[0] != "text" || &headers[1] != "label" {
        return Err(data_err(1, format!("expected header 'text,label', got {headers:?}")));
    }
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            data_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(data_err(line, format!("expected 2 fields, got {}", rec.len())));
        }
        let label: usize = rec[1]
            .trim()
            .parse()
            .map_err(|_| data_err(line, format!("label '{}' is not a non-negative integer", &rec[1])))?;
        if let Some(c) = schema.n_classes {
            if label >= c {
                return Err(data_err(line, format!("label {label} outside 0..{c}")));
            }
        }
        texts.push(rec[0].to_owned());
        labels.push(label);
    }
    let n_classes = schema
        .n_classes
        .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Ok(TextDataset {
        texts,
        labels,
        n_classes,
        split,
    })
}

pub fn write_csv(path: &Path, data: &TextDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    let io = |e: csv::Error| Error::Data {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    };
    w.write_record(["text", "label"]).map_err(io)?;
    for (t, l) in data.texts.iter().zip(&data.labels) {
        w.write_record([t.as_str(), &l.to_string()]).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Train, validation and test splits.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: TextDataset,
    pub val: TextDataset,
    pub test: TextDataset,
}

/// Where a run's data comes from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    /// `synthetic:<n_classes>:<n>`
    Synthetic { n_classes: usize, n: usize },
    /// Directory holding `train.csv`, `val.csv`, `test.csv`.
    Dir(PathBuf),
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(rest) = s.strip_prefix("synthetic:") {
            let parts: Vec<&str> = rest.split(':').collect();
            let parse = |p: &str| {
                p.parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad synthetic spec '{s}', expected synthetic:<classes>:<n>")))
            };
            if parts.len() != 2 {
                return Err(Error::Config(format!(
                    "bad synthetic spec '{s}', expected synthetic:<classes>:<n>"
                )));
            }
            let (n_classes, n) = (parse(parts[0])?, parse(parts[1])?);
            if ![2, 3, 5].contains(&n_classes) || n < 30 {
                return Err(Error::Config(format!(
                    "synthetic data needs classes in {{2,3,5}} and n >= 30, got {n_classes} and {n}"
                )));
            }
            Ok(DataSource::Synthetic { n_classes, n })
        } else {
            Ok(DataSource::Dir(PathBuf::from(s)))
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataSource::Synthetic { n_classes, n } => write!(f, "synthetic:{n_classes}:{n}"),
            DataSource::Dir(p) => write!(f, "{}", p.display()),
        }
    }
}

impl DataSource {
    pub fn load(&self, seed: u64) -> Result<Splits> {
        match self {
            DataSource::Synthetic { n_classes, n } => synth_sentiment(*n, *n_classes, seed),
            DataSource::Dir(dir) => {
                let train = load_csv(&dir.join(Split::Train.file_name()), CsvSchema::default(), Split::Train)?;
                if train.is_empty() {
                    return Err(Error::Config(format!("{}: empty training split", dir.display())));
                }
                let schema = CsvSchema {
                    n_classes: Some(train.n_classes),
                };
                let val = load_csv(&dir.join(Split::Val.file_name()), schema, Split::Val)?;
                let test = load_csv(&dir.join(Split::Test.file_name()), schema, Split::Test)?;
                let n_classes = train.n_classes.max(2);
                let fix = |mut d: TextDataset| {
                    d.n_classes = n_classes;
                    d
                };
                Ok(Splits {
                    train: fix(train),
                    val: fix(val),
                    test: fix(test),
                })
            }
        }
    }
}

mod lexicon {
    pub const STRONG_POS: &[&str] = &["excellent", "amazing", "wonderful", "fantastic", "superb", "brilliant"];
    pub const MILD_POS: &[&str] = &["good", "nice", "enjoyable", "pleasant", "solid", "decent"];
    pub const NEUTRAL: &[&str] = &["okay", "average", "ordinary", "acceptable", "standard", "typical"];
    pub const MILD_NEG: &[&str] = &["bad", "poor", "dull", "boring", "weak", "mediocre"];
    pub const STRONG_NEG: &[&str] = &["terrible", "awful", "horrible", "dreadful", "atrocious", "abysmal"];
    pub const SUBJECTS: &[&str] = &[
        "the movie", "the film", "the plot", "the acting", "the food", "the service", "the book",
        "the story", "the hotel", "the product", "this place", "the ending", "the music", "the staff",
    ];
    pub const VERBS: &[&str] = &["was", "is", "seemed", "felt", "looked"];
    pub const INTENSIFIERS: &[&str] = &["really", "truly", "very", "quite"];
    pub const DISTRACTORS: &[&str] = &[
        "i watched it on tuesday",
        "my friend came along",
        "we arrived early",
        "it was raining outside",
        "the tickets were cheap",
        "there were many people",
        "we sat near the back",
        "i read about it online",
        "the parking lot was full",
        "my sister recommended it",
        "we went there after work",
        "it lasted about two hours",
    ];
}

/// Probability that a mild sentiment clause is expressed by negating the
/// opposite polarity ("not good" for negative).
const NEGATION_RATE: f64 = 0.12;

fn pick<'a>(rng: &mut ChaCha8Rng, words: &[&'a str]) -> &'a str {
    words[rng.random_range(0..words.len())]
}

/// Sentiment level of each class: −2 (very negative) ..= 2 (very positive).
fn class_levels(n_classes: usize) -> &'static [i32] {
    match n_classes {
        2 => &[-1, 1],
        3 => &[-1, 0, 1],
        _ => &[-2, -1, 0, 1, 2],
    }
}

fn sentiment_phrase(rng: &mut ChaCha8Rng, level: i32, allow_strong_in_mild: bool) -> String {
    use lexicon::*;
    match level {
        0 => pick(rng, NEUTRAL).to_owned(),
        2 => format!("{} {}", pick(rng, INTENSIFIERS), pick(rng, STRONG_POS)),
        -2 => format!("{} {}", pick(rng, INTENSIFIERS), pick(rng, STRONG_NEG)),
        l => {
            let negate = rng.random_bool(NEGATION_RATE);
            let positive = (l > 0) != negate;
            let pool: Vec<&str> = match (positive, allow_strong_in_mild && !negate) {
                (true, true) => MILD_POS.iter().chain(STRONG_POS).copied().collect(),
                (true, false) => MILD_POS.to_vec(),
                (false, true) => MILD_NEG.iter().chain(STRONG_NEG).copied().collect(),
                (false, false) => MILD_NEG.to_vec(),
            };
            let w = pick(rng, &pool);
            if negate {
                format!("not {w}")
            } else {
                w.to_owned()
            }
        }
    }
}

fn synth_text(rng: &mut ChaCha8Rng, level: i32, n_classes: usize) -> String {
    use lexicon::*;
    let allow_strong = n_classes < 5;
    let mut clauses = vec![format!(
        "{} {} {}",
        pick(rng, SUBJECTS),
        pick(rng, VERBS),
        sentiment_phrase(rng, level, allow_strong)
    )];
    if rng.random_bool(0.4) {
        clauses.push(format!(
            "{} {} {}",
            pick(rng, SUBJECTS),
            pick(rng, VERBS),
            sentiment_phrase(rng, level, allow_strong)
        ));
    }
    for _ in 0..rng.random_range(0..=2) {
        let pos = rng.random_range(0..=clauses.len());
        clauses.insert(pos, pick(rng, DISTRACTORS).to_owned());
    }
    let mut text = clauses.join(" . ");
    text.push_str(" .");
    text
}

/// Template-generated sentiment corpus split 70/15/15.
///
/// Labels cycle through the classes, so every split is balanced within ±1.
/// Mild classes are sometimes expressed through negation of the opposite
/// polarity, which a bag-of-words model cannot resolve.
pub fn synth_sentiment(n: usize, n_classes: usize, seed: u64) -> Result<Splits> {
    if ![2, 3, 5].contains(&n_classes) {
        return Err(Error::Config(format!("synthetic data supports 2, 3 or 5 classes, got {n_classes}")));
    }
    if n < 30 {
        return Err(Error::Config(format!("synthetic data needs n >= 30, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let levels = class_levels(n_classes);
    let n_train = (n as f64 * 0.70).round() as usize;
    let n_val = (n as f64 * 0.15).round() as usize;
    let bounds = [(0, n_train, Split::Train), (n_train, n_train + n_val, Split::Val), (n_train + n_val, n, Split::Test)];
    let mut out = Vec::with_capacity(3);
    for (lo, hi, split) in bounds {
        let mut rows: Vec<(String, usize)> = (lo..hi)
            .map(|i| {
                let label = i % n_classes;
                (synth_text(&mut rng, levels[label], n_classes), label)
            })
            .collect();
        rows.shuffle(&mut rng);
        let (texts, labels) = rows.into_iter().unzip();
        out.push(TextDataset {
            texts,
            labels,
            n_classes,
            split,
        });
    }
    let test = out.pop().unwrap();
    let val = out.pop().unwrap();
    let train = out.pop().unwrap();
    Ok(Splits { train, val, test })
}

/// Padded mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Row-major `[batch_size, seq_len]` token ids, PAD-filled.
    pub ids: Vec<usize>,
    /// True exactly on real tokens.
    pub mask: Mask,
    pub labels: Vec<usize>,
    /// Dataset indices of the rows.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.mask.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.mask.shape()[1]
    }
}

/// Builds a batch from dataset rows, truncating at `max_seq_len`.
pub fn collate(dataset: &Dataset, indices: &[usize], max_seq_len: usize) -> Batch {
    let seq = indices
        .iter()
        .map(|&i| dataset.examples[i].ids.len().min(max_seq_len))
        .max()
        .unwrap_or(1)
        .max(1);
    let mut ids = vec![PAD_ID; indices.len() * seq];
    let mut mask = vec![false; indices.len() * seq];
    for (r, &i) in indices.iter().enumerate() {
        let ex = &dataset.examples[i].ids;
        for (j, &t) in ex.iter().take(seq).enumerate() {
            ids[r * seq + j] = t;
            mask[r * seq + j] = true;
        }
    }
    Batch {
        ids,
        mask: Mask::new(vec![indices.len(), seq], mask).expect("consistent mask"),
        labels: indices.iter().map(|&i| dataset.examples[i].label).collect(),
        indices: indices.to_vec(),
    }
}

/// Splits a dataset into batches; `shuffle_seed` permutes the order
/// (training), `None` keeps dataset order (evaluation).
pub fn make_batches(dataset: &Dataset, batch_size: usize, max_seq_len: usize, shuffle_seed: Option<u64>) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
        .chunks(batch_size.max(1))
        .map(|c| collate(dataset, c, max_seq_len))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(seqs: &[&[usize]]) -> Dataset {
        Dataset {
            examples: seqs
                .iter()
                .map(|s| Example {
                    ids: s.to_vec(),
                    label: 0,
                })
                .collect(),
            n_classes: 2,
            split: Split::Train,
        }
    }

    #[test]
    fn tokenize_examples() {
        assert_eq!(tokenize("Good!"), ["good", "!"]);
        assert!(tokenize("").is_empty());
        assert_eq!(tokenize("It's FINE."), ["it", "'", "s", "fine", "."]);
    }

    #[test]
    fn tokenize_is_idempotent_on_joined_tokens() {
        let toks = tokenize("Wow -- that's (really) NOT good, is it?");
        assert_eq!(tokenize(&toks.join(" ")), toks);
    }

    #[test]
    fn vocab_cutoff_and_reserved_ids() {
        let v = build_vocab(&["a a b"], 2).unwrap();
        assert_eq!(v.tokens(), [PAD_TOKEN, UNK_TOKEN, "a"]);
        assert_eq!(v.id("b"), UNK_ID);
        let v = build_vocab(&["a a b", "c"], 1).unwrap();
        assert!(["a", "b", "c"].iter().all(|t| v.contains(t)));
    }

    #[test]
    fn vocab_ties_break_lexicographically() {
        let v = build_vocab(&["zeta alpha mid mid"], 1).unwrap();
        assert_eq!(v.tokens(), [PAD_TOKEN, UNK_TOKEN, "mid", "alpha", "zeta"]);
    }

    #[test]
    fn vocab_empty_corpus_is_error() {
        assert!(build_vocab::<&str>(&[], 1).is_err());
    }

    #[test]
    fn vocab_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = build_vocab(&["the cat sat on the mat"], 1).unwrap();
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        let back = Vocab::load(&p).unwrap();
        assert_eq!(back.tokens(), v.tokens());
        assert_eq!(back.fingerprint(), v.fingerprint());
    }

    #[test]
    fn batches_sizes_and_padding() {
        let d = ds(&[&[2, 3], &[4], &[5, 6, 7], &[8], &[9, 9]]);
        let b = make_batches(&d, 2, 16, None);
        assert_eq!(b.iter().map(Batch::batch_size).collect::<Vec<_>>(), [2, 2, 1]);
        assert_eq!(b[0].ids, [2, 3, 4, PAD_ID]);
        assert_eq!(b[0].mask.data(), &[true, true, true, false]);

        let d = ds(&[&[2, 3, 4], &[5, 6, 7]]);
        let b = make_batches(&d, 8, 16, None);
        assert!(b[0].mask.data().iter().all(|&m| m));
    }

    #[test]
    fn truncation_is_token_exact() {
        let seq: Vec<usize> = (2..40).collect();
        let d = ds(&[&seq]);
        let b = make_batches(&d, 1, 5, None);
        assert_eq!(b[0].ids, &seq[..5]);
        assert_eq!(b[0].seq_len(), 5);
    }

    #[test]
    fn shuffled_batches_cover_every_example_once() {
        let seqs: Vec<Vec<usize>> = (0..23).map(|i| vec![i + 2]).collect();
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let d = ds(&refs);
        let b = make_batches(&d, 4, 8, Some(3));
        let mut seen: Vec<usize> = b.iter().flat_map(|x| x.indices.clone()).collect();
        assert_ne!(seen, (0..23).collect::<Vec<_>>());
        seen.sort_unstable();
        assert_eq!(seen, (0..23).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        for c in [2, 3, 5] {
            let a = synth_sentiment(200, c, 4).unwrap();
            let b = synth_sentiment(200, c, 4).unwrap();
            assert_eq!(a.train, b.train);
            assert_eq!(a.test, b.test);
            for split in [&a.train, &a.val, &a.test] {
                let mut counts = vec![0usize; c];
                split.labels.iter().for_each(|&l| counts[l] += 1);
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                assert!(hi - lo <= 1, "{counts:?}");
            }
            assert_eq!(a.train.len() + a.val.len() + a.test.len(), 200);
            assert_eq!(a.train.len(), 140);
        }
        assert_ne!(synth_sentiment(100, 2, 1).unwrap().train, synth_sentiment(100, 2, 2).unwrap().train);
    }

    #[test]
    fn synthetic_rejects_bad_arguments() {
        assert!(synth_sentiment(10, 2, 0).is_err());
        assert!(synth_sentiment(100, 4, 0).is_err());
        assert!("synthetic:4:100".parse::<DataSource>().is_err());
        assert_eq!(
            "synthetic:2:512".parse::<DataSource>().unwrap(),
            DataSource::Synthetic { n_classes: 2, n: 512 }
        );
    }

    #[test]
    fn synthetic_contains_negations() {
        let s = synth_sentiment(600, 2, 0).unwrap();
        let negated = s.train.texts.iter().filter(|t| t.contains(" not ")).count();
        assert!(negated > 20, "{negated}");
    }

    #[test]
    fn vocab_ignores_val_and_test_contents() {
        let s = synth_sentiment(300, 2, 8).unwrap();
        let v1 = build_vocab(&s.train.texts, 2).unwrap();
        let mut altered = s.clone();
        altered.val.texts.iter_mut().for_each(|t| t.push_str(" zebra"));
        altered.test.texts = vec!["completely different words".into()];
        let v2 = build_vocab(&altered.train.texts, 2).unwrap();
        assert_eq!(v1, v2);
    }

    #[test]
    fn csv_round_trip_with_quoting() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.csv");
        let data = TextDataset {
            texts: vec!["plain".into(), "has, comma".into(), "say \"hi\"\nnext line".into()],
            labels: vec![0, 1, 1],
            n_classes: 2,
            split: Split::Train,
        };
        write_csv(&path, &data).unwrap();
        let back = load_csv(&path, CsvSchema::default(), Split::Train).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn csv_errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        std::fs::write(&path, "text,label\ngood,1\nbad,7\n").unwrap();
        let err = load_csv(&path, CsvSchema { n_classes: Some(2) }, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Data { line: 3, .. }), "{err}");
        std::fs::write(&path, "text,label\nfine,0\nno label here\n").unwrap();
        let err = load_csv(&path, CsvSchema::default(), Split::Train).unwrap_err();
        assert!(matches!(err, Error::Data { line: 3, .. }), "{err}");
        std::fs::write(&path, "sentence,y\na,0\n").unwrap();
        assert!(load_csv(&path, CsvSchema::default(), Split::Train).is_err());
        std::fs::write(&path, "text,label\nx,-1\n").unwrap();
        assert!(load_csv(&path, CsvSchema::default(), Split::Train).is_err());
        let ok = "text,label\n\"a, b\",0\nc,1\n";
        std::fs::write(&path, ok).unwrap();
        assert_eq!(load_csv(&path, CsvSchema { n_classes: Some(2) }, Split::Train).unwrap().len(), 2);
    }

    #[test]
    fn bag_of_words_baseline_learns_synthetic_binary() {
        let s = synth_sentiment(1000, 2, 0).unwrap();
        let vocab = build_vocab(&s.train.texts, DEFAULT_MIN_FREQUENCY).unwrap();
        let feats = |t: &TextDataset| -> Vec<Vec<f64>> {
            t.texts
                .iter()
                .map(|x| {
                    let mut f = vec![0.0; vocab.len()];
                    for id in vocab.encode(x) {
                        f[id] += 1.0;
                    }
                    f
                })
                .collect()
        };
        let (xtr, xte) = (feats(&s.train), feats(&s.test));
        let mut w = vec![0.0; vocab.len()];
        let mut b = 0.0;
        for _ in 0..200 {
            for (x, &y) in xtr.iter().zip(&s.train.labels) {
                let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                let err = 1.0 / (1.0 + (-z).exp()) - y as f64;
                for (wi, xi) in w.iter_mut().zip(x) {
                    *wi -= 0.05 * err * xi;
                }
                b -= 0.05 * err;
            }
        }
        let correct = xte
            .iter()
            .zip(&s.test.labels)
            .filter(|(x, &y)| {
                let z: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
                (z > 0.0) as usize == y
            })
            .count();
        let acc = correct as f64 / xte.len() as f64;
        assert!(acc >= 0.85, "bag-of-words accuracy {acc}");
    }
}
