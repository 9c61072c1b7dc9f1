//! Labelled corpora in the `label<TAB>text` interchange format.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};

/// Records with a dense label index in first-appearance order.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledCorpus {
    pub name: String,
    labels: Vec<String>,
    index: HashMap<String, usize>,
    texts: Vec<String>,
    targets: Vec<usize>,
}

impl LabeledCorpus {
    pub fn new(name: impl Into<String>) -> Self {
        LabeledCorpus {
            name: name.into(),
            labels: Vec::new(),
            index: HashMap::new(),
            texts: Vec::new(),
            targets: Vec::new(),
        }
    }

    /// An empty corpus whose class ids follow `labels`.
    pub fn with_labels(name: impl Into<String>, labels: &[String]) -> Result<Self> {
        let mut c = LabeledCorpus::new(name);
        for label in labels {
            if label.is_empty() || c.index.contains_key(label) {
                return Err(Error::InvalidArgument(format!("empty or repeated label `{label}`")));
            }
            c.index.insert(label.clone(), c.labels.len());
            c.labels.push(label.clone());
        }
        Ok(c)
    }

    /// An empty corpus sharing `self`'s label index.
    pub fn empty_like(&self, name: impl Into<String>) -> Self {
        LabeledCorpus {
            name: name.into(),
            labels: self.labels.clone(),
            index: self.index.clone(),
            texts: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn push(&mut self, label: &str, text: impl Into<String>) -> Result<usize> {
        if label.is_empty() {
            return Err(Error::InvalidArgument("empty label".into()));
        }
        let id = match self.index.get(label) {
            Some(&id) => id,
            None => {
                self.labels.push(label.to_string());
                self.index.insert(label.to_string(), self.labels.len() - 1);
                self.labels.len() - 1
            }
        };
        self.texts.push(text.into());
        self.targets.push(id);
        Ok(id)
    }

    pub fn from_pairs<'a>(name: &str, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = LabeledCorpus::new(name);
        for (label, text) in pairs {
            c.push(label, text)?;
        }
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }

    /// Size of the label index, which may exceed the labels present after a split.
    pub fn class_count(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn class_id(&self, label: &str) -> Option<usize> {
        self.index.get(label).copied()
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn record(&self, i: usize) -> (&str, &str) {
        (&self.labels[self.targets[i]], &self.texts[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        (0..self.len()).map(move |i| self.record(i))
    }

    pub fn require_non_empty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyCorpus(self.name.clone()))
        } else {
            Ok(())
        }
    }

    fn subset(&self, name: &str, indices: &[usize]) -> Self {
        let mut out = self.empty_like(name);
        for &i in indices {
            out.texts.push(self.texts[i].clone());
            out.targets.push(self.targets[i]);
        }
        out
    }

    fn map_texts(&self, f: impl Fn(&str) -> String) -> Self {
        let mut out = self.clone();
        out.texts = self.texts.iter().map(|t| f(t)).collect();
        out
    }

    /// Applies [`crate::encoding::preprocess`] to every text.
    pub fn preprocessed(&self, options: crate::encoding::PreprocessOptions) -> Self {
        self.map_texts(|t| crate::encoding::preprocess(t, options))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for (label, text) in self.iter() {
            out.push_str(label);
            out.push('\t');
            out.extend(text.chars().map(|c| if c == '\t' || c == '\n' || c == '\r' { ' ' } else { c }));
            out.push('\n');
        }
        out
    }
}

/// Parses `label<TAB>text` lines. `source` names the input in errors.
pub fn parse_tsv(name: &str, source: &str, content: &str) -> Result<LabeledCorpus> {
    let mut corpus = LabeledCorpus::new(name);
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: &str| Error::Parse {
            path: source.to_string(),
            line: i + 1,
            msg: msg.to_string(),
        };
        let (label, text) = line.split_once('\t').ok_or_else(|| parse("missing tab between label and text"))?;
        let label = label.trim();
        if label.is_empty() {
            return Err(parse("empty label"));
        }
        corpus.push(label, text.trim_end_matches('\r'))?;
    }
    corpus.require_non_empty()?;
    Ok(corpus)
}

pub fn load_tsv(path: impl AsRef<Path>) -> Result<LabeledCorpus> {
    let path = path.as_ref();
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    parse_tsv(&name, &path.display().to_string(), &content)
}

pub fn save_tsv(corpus: &LabeledCorpus, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, corpus.to_tsv()).map_err(|e| Error::io(path, e))
}

/// Lowercased whitespace tokens.
pub fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusStats {
    pub name: String,
    pub size: usize,
    pub vocabulary: usize,
    pub total_words: usize,
    /// Mean sentence length in tokens.
    pub mst: f64,
    pub classes: usize,
}

impl CorpusStats {
    pub const CSV_HEADER: &'static str = "name,size,vocabulary,total_words,mst,classes";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.4},{}",
            self.name, self.size, self.vocabulary, self.total_words, self.mst, self.classes
        )
    }

    pub fn table(rows: &[CorpusStats]) -> String {
        let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(4);
        let mut out = format!(
            "{:<width$}  {:>8}  {:>10}  {:>11}  {:>7}  {:>7}\n",
            "name", "size", "vocabulary", "total_words", "mst", "classes"
        );
        for r in rows {
            out.push_str(&format!(
                "{:<width$}  {:>8}  {:>10}  {:>11}  {:>7.2}  {:>7}\n",
                r.name, r.size, r.vocabulary, r.total_words, r.mst, r.classes
            ));
        }
        out
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&CorpusStats::table(std::slice::from_ref(self)))
    }
}

pub fn stats(corpus: &LabeledCorpus) -> Result<CorpusStats> {
    corpus.require_non_empty()?;
    let mut vocab = HashSet::new();
    let mut total = 0;
    for text in corpus.texts() {
        for t in tokens(text) {
            total += 1;
            vocab.insert(t);
        }
    }
    let classes = corpus.targets().iter().collect::<HashSet<_>>().len();
    Ok(CorpusStats {
        name: corpus.name.clone(),
        size: corpus.len(),
        vocabulary: vocab.len(),
        total_words: total,
        mst: total as f64 / corpus.len() as f64,
        classes,
    })
}

/// Thresholds for the bag-of-words path.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterOptions {
    /// Tokens seen fewer times than this across the corpus are dropped.
    pub min_freq: usize,
    /// Records are cut to this many tokens; `None` keeps them whole.
    pub max_len: Option<usize>,
}

impl Default for FilterOptions {
    fn default() -> Self {
        FilterOptions {
            min_freq: 10,
            max_len: Some(500),
        }
    }
}

/// Cuts every record to at most `max_len` whitespace tokens. Used for the character path.
pub fn truncate(corpus: &LabeledCorpus, max_len: usize) -> LabeledCorpus {
    corpus.map_texts(|t| {
        if t.split_whitespace().nth(max_len).is_none() {
            t.to_string()
        } else {
            t.split_whitespace().take(max_len).collect::<Vec<_>>().join(" ")
        }
    })
}

/// Truncates, then drops tokens whose corpus frequency (lowercased) is below `min_freq`.
///
/// Frequencies are counted after truncation, which keeps the operation idempotent.
pub fn filter(corpus: &LabeledCorpus, options: FilterOptions) -> LabeledCorpus {
    let cut = match options.max_len {
        Some(n) => truncate(corpus, n),
        None => corpus.clone(),
    };
    if options.min_freq <= 1 {
        return cut;
    }
    let mut freq: HashMap<String, usize> = HashMap::new();
    for text in cut.texts() {
        for t in tokens(text) {
            *freq.entry(t).or_default() += 1;
        }
    }
    cut.map_texts(|t| {
        t.split_whitespace()
            .filter(|w| freq.get(&w.to_lowercase()).copied().unwrap_or(0) >= options.min_freq)
            .collect::<Vec<_>>()
            .join(" ")
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitPlan {
    pub train_count: usize,
    pub test_count: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl SplitPlan {
    pub fn qc(seed: u64) -> Self {
        SplitPlan {
            train_count: 5000,
            test_count: 500,
            batch_size: 250,
            seed,
        }
    }

    pub fn twenty(seed: u64) -> Self {
        SplitPlan {
            train_count: 1000,
            test_count: 100,
            batch_size: 50,
            seed,
        }
    }

    pub fn validate(&self, size: usize) -> Result<()> {
        if self.train_count == 0 || self.test_count == 0 || self.batch_size == 0 {
            return Err(Error::Config("train_count, test_count and batch_size must be positive".into()));
        }
        if self.train_count + self.test_count > size {
            return Err(Error::Config(format!(
                "split needs {} + {} records, corpus has {size}",
                self.train_count, self.test_count
            )));
        }
        Ok(())
    }
}

/// Seeded shuffle, then the first `train_count` records train and the next `test_count` test.
pub fn split(corpus: &LabeledCorpus, plan: &SplitPlan) -> Result<(LabeledCorpus, LabeledCorpus)> {
    plan.validate(corpus.len())?;
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut stream(plan.seed, Stream::Split));
    let train = corpus.subset(&format!("{}-train", corpus.name), &order[..plan.train_count]);
    let test = corpus.subset(
        &format!("{}-test", corpus.name),
        &order[plan.train_count..plan.train_count + plan.test_count],
    );
    Ok((train, test))
}

/// Two classes told apart by disjoint three-letter motifs embedded in shared filler.
pub fn synthetic_motifs(count: usize, seed: u64) -> LabeledCorpus {
    const FILLER: &[u8] = b"aeiou ";
    const MOTIFS: [&str; 2] = ["xqz", "kvj"];
    let mut rng = stream(seed, Stream::Synthetic);
    let mut corpus = LabeledCorpus::new("motifs");
    for i in 0..count {
        let class = i % 2;
        let len = rng.gen_range(12..24);
        let mut text: String = (0..len).map(|_| FILLER[rng.gen_range(0..FILLER.len())] as char).collect();
        for _ in 0..rng.gen_range(1..=2) {
            let at = rng.gen_range(0..=text.len());
            text.insert_str(at, MOTIFS[class]);
        }
        corpus.push(["motif_a", "motif_b"][class], text).expect("non-empty label");
    }
    corpus
}

/// Synthetic stand-in for the news-snippet corpus: 55 classes, 2066 records, about 24 tokens each.
///
/// Each class owns a small word list; records mix class words with shared words.
pub fn synthetic_news(seed: u64) -> LabeledCorpus {
    const CLASSES: usize = 55;
    const RECORDS: usize = 2066;
    let mut rng = stream(seed, Stream::Synthetic);
    let word = |rng: &mut rand_chacha::ChaCha8Rng| -> String {
        let len = rng.gen_range(3..9);
        (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect()
    };
    let shared: Vec<String> = (0..400).map(|_| word(&mut rng)).collect();
    let own: Vec<Vec<String>> = (0..CLASSES).map(|_| (0..40).map(|_| word(&mut rng)).collect()).collect();
    let mut corpus = LabeledCorpus::new("synthetic-news");
    for i in 0..RECORDS {
        let class = i % CLASSES;
        let len = rng.gen_range(16..=32);
        let text: Vec<&str> = (0..len)
            .map(|_| {
                if rng.gen_bool(0.6) {
                    own[class][rng.gen_range(0..40)].as_str()
                } else {
                    shared[rng.gen_range(0..shared.len())].as_str()
                }
            })
            .collect();
        corpus.push(&format!("synthetic_{class:02}"), text.join(" ")).expect("non-empty label");
    }
    corpus
}
