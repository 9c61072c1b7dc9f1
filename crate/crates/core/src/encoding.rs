//! Character quantization and text preprocessing.
//!
//! Text is mapped onto a fixed 70-symbol alphabet: the 26 lowercase letters, the
//! 10 digits and 34 punctuation symbols. Every character outside the alphabet,
//! including whitespace, becomes an all-zero row.

use std::collections::HashSet;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ALPHABET_SIZE: usize = 70;

/// Default padded sequence length.
pub const DEFAULT_LENGTH: usize = 500;

const LETTERS: &str = "abcdefghijklmnopqrstuvwxyz";
const DIGITS: &str = "0123456789";
// The 32 printable ASCII punctuation marks followed by the two typographic
// single quotes, which is what brings the set to 34.
const PUNCTUATION: &str = "-,;.!?:'\"/\\|_@#$%^&*~`+=<>()[]{}\u{2018}\u{2019}";

#[derive(Clone, Debug)]
pub struct Alphabet {
    symbols: Vec<char>,
    ascii: [Option<u8>; 128],
}

impl Alphabet {
    pub fn new() -> Self {
        let symbols: Vec<char> = LETTERS.chars().chain(DIGITS.chars()).chain(PUNCTUATION.chars()).collect();
        assert_eq!(symbols.len(), ALPHABET_SIZE);
        let mut ascii = [None; 128];
        for (i, &c) in symbols.iter().enumerate() {
            if c.is_ascii() {
                ascii[c as usize] = Some(i as u8);
            }
        }
        Alphabet { symbols, ascii }
    }

    /// Shared instance.
    pub fn standard() -> &'static Alphabet {
        static ALPHABET: OnceLock<Alphabet> = OnceLock::new();
        ALPHABET.get_or_init(Alphabet::new)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }

    /// Position of `c` in the alphabet. Case-sensitive; callers lowercase first.
    pub fn position(&self, c: char) -> Option<usize> {
        if c.is_ascii() {
            self.ascii[c as usize].map(usize::from)
        } else {
            match c {
                '\u{2018}' => Some(ALPHABET_SIZE - 2),
                '\u{2019}' => Some(ALPHABET_SIZE - 1),
                _ => None,
            }
        }
    }

    pub fn symbol(&self, index: usize) -> Option<char> {
        self.symbols.get(index).copied()
    }

    /// Quantizes `text` into `length` one-hot rows.
    ///
    /// ASCII letters are folded to lowercase, the first `length` characters are
    /// encoded, anything outside the alphabet becomes a zero row and short texts
    /// are zero-padded on the right.
    pub fn encode(&self, text: &str, length: usize) -> Result<CharMatrix> {
        if length == 0 {
            return Err(Error::InvalidArgument("sequence length must be positive".into()));
        }
        let mut indices = Vec::with_capacity(length);
        let mut original_length = 0;
        for c in text.chars() {
            if indices.len() < length {
                indices.push(self.position(c.to_ascii_lowercase()).map(|i| i as u8));
            }
            original_length += 1;
        }
        indices.resize(length, None);
        Ok(CharMatrix {
            indices,
            original_length,
        })
    }

    /// Like [`Alphabet::encode`] for arbitrary bytes; invalid UTF-8 becomes zero rows.
    pub fn encode_bytes(&self, bytes: &[u8], length: usize) -> Result<CharMatrix> {
        self.encode(&String::from_utf8_lossy(bytes), length)
    }
}

impl Default for Alphabet {
    fn default() -> Self {
        Self::new()
    }
}

/// One-hot `length × 70` quantization of a text, stored as per-row symbol indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharMatrix {
    indices: Vec<Option<u8>>,
    original_length: usize,
}

impl CharMatrix {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Number of characters in the text before truncation or padding.
    pub fn original_length(&self) -> usize {
        self.original_length
    }

    /// Hot column of each row; `None` for zero rows.
    pub fn indices(&self) -> &[Option<u8>] {
        &self.indices
    }

    /// The `{0,1}` row at `i`.
    pub fn row(&self, i: usize) -> [u8; ALPHABET_SIZE] {
        let mut row = [0; ALPHABET_SIZE];
        if let Some(c) = self.indices[i] {
            row[c as usize] = 1;
        }
        row
    }

    pub fn to_tensor(&self) -> Tensor {
        let mut data = vec![0.0; self.len() * ALPHABET_SIZE];
        self.write_dense(&mut data);
        Tensor::new(&[self.len(), ALPHABET_SIZE], data).expect("non-empty matrix")
    }

    pub(crate) fn write_dense(&self, out: &mut [f64]) {
        for (row, c) in out.chunks_mut(ALPHABET_SIZE).zip(&self.indices) {
            if let Some(c) = c {
                row[*c as usize] = 1.0;
            }
        }
    }

    /// Characters of the encoded (non-padding) prefix; `None` marks an
    /// out-of-alphabet character.
    pub fn decode(&self, alphabet: &Alphabet) -> Vec<Option<char>> {
        let kept = self.original_length.min(self.len());
        self.indices[..kept]
            .iter()
            .map(|c| c.and_then(|c| alphabet.symbol(c as usize)))
            .collect()
    }
}

/// Stacks equal-length matrices into a dense `[B, n, 70]` tensor.
pub fn batch_tensor(batch: &[&CharMatrix]) -> Result<Tensor> {
    let n = batch
        .first()
        .map(|m| m.len())
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    if batch.iter().any(|m| m.len() != n) {
        return Err(Error::InvalidArgument("batch mixes sequence lengths".into()));
    }
    let mut data = vec![0.0; batch.len() * n * ALPHABET_SIZE];
    for (m, chunk) in batch.iter().zip(data.chunks_mut(n * ALPHABET_SIZE)) {
        m.write_dense(chunk);
    }
    Tensor::new(&[batch.len(), n, ALPHABET_SIZE], data)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PreprocessOptions {
    pub strip_metadata: bool,
    pub remove_stopwords: bool,
}

pub fn stopwords() -> &'static HashSet<&'static str> {
    static WORDS: OnceLock<HashSet<&'static str>> = OnceLock::new();
    WORDS.get_or_init(|| {
        include_str!("../data/stopwords.txt")
            .lines()
            .map(str::trim)
            .filter(|w| !w.is_empty())
            .collect()
    })
}

fn is_header_line(line: &str) -> bool {
    match line.split_once(':') {
        Some((key, rest)) => {
            !key.is_empty()
                && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
                && (rest.is_empty() || rest.starts_with(' '))
        }
        None => false,
    }
}

/// Drops a leading `Key: value` header block, `>` quoted lines and the
/// signature that follows a line equal to `--`.
pub fn strip_metadata(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let mut start = 0;
    if let Some(blank) = lines.iter().position(|l| l.trim().is_empty()) {
        let head = &lines[..blank];
        let headerish = head
            .iter()
            .enumerate()
            .all(|(i, l)| is_header_line(l) || (i > 0 && l.starts_with([' ', '\t'])));
        if blank > 0 && headerish {
            start = blank + 1;
        }
    }
    let body = &lines[start..];
    let end = body.iter().position(|l| l.trim_end() == "--").unwrap_or(body.len());
    body[..end]
        .iter()
        .filter(|l| !l.trim_start().starts_with('>'))
        .copied()
        .collect::<Vec<_>>()
        .join("\n")
        .trim()
        .to_string()
}

pub fn remove_stopwords(text: &str) -> String {
    let words = stopwords();
    text.split_whitespace()
        .filter(|t| !words.contains(t.to_lowercase().as_str()))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn preprocess(text: &str, options: PreprocessOptions) -> String {
    let mut out = if options.strip_metadata {
        strip_metadata(text)
    } else {
        text.to_string()
    };
    if options.remove_stopwords {
        out = remove_stopwords(&out);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn alphabet_layout() {
        let a = Alphabet::standard();
        assert_eq!(a.len(), 70);
        assert_eq!(a.position('a'), Some(0));
        assert_eq!(a.position('z'), Some(25));
        assert_eq!(a.position('0'), Some(26));
        assert_eq!(a.position('9'), Some(35));
        assert_eq!(a.position('-'), Some(36));
        assert_eq!(a.position(' '), None);
        assert_eq!(a.position('\n'), None);
        assert_eq!(a.position('A'), None);
        let unique: HashSet<char> = a.symbols().iter().copied().collect();
        assert_eq!(unique.len(), 70);
        assert!(a.symbols().iter().all(|c| !c.is_whitespace()));
        for (i, &c) in a.symbols().iter().enumerate() {
            assert_eq!(a.position(c), Some(i));
        }
    }

    #[test]
    fn encode_examples() {
        let a = Alphabet::standard();
        let m = a.encode("a", 3).unwrap();
        assert_eq!(m.indices(), &[Some(0), None, None]);
        assert_eq!(m.original_length(), 1);

        let m = a.encode("A b", 3).unwrap();
        assert_eq!(m.indices(), &[Some(0), None, Some(1)]);

        let long = "x".repeat(501);
        let m = a.encode(&long, 500).unwrap();
        assert_eq!(m.len(), 500);
        assert_eq!(m.original_length(), 501);

        assert!(a.encode("abc", 0).is_err());
    }

    #[test]
    fn dense_rows_are_one_hot() {
        let m = Alphabet::standard().encode("Hi, é!", 8).unwrap();
        let t = m.to_tensor();
        assert_eq!(t.dims(), &[8, 70]);
        let sums: Vec<f64> = t.rows().map(|r| r.iter().sum()).collect();
        assert_eq!(sums, vec![1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(m.row(0)[7], 1);
    }

    #[test]
    fn preprocess_examples() {
        let strip = PreprocessOptions {
            strip_metadata: true,
            remove_stopwords: false,
        };
        assert_eq!(preprocess("From: x@y\n\nbody", strip), "body");
        let stop = PreprocessOptions {
            strip_metadata: false,
            remove_stopwords: true,
        };
        assert_eq!(preprocess("the cat", stop), "cat");
        assert_eq!(preprocess("", PreprocessOptions { strip_metadata: true, remove_stopwords: true }), "");
    }

    #[test]
    fn strips_quotes_and_signature() {
        let post = "From: a@b.c\nSubject: Re: engines\nLines: 4\n\n> earlier text\nI agree.\nThanks\n--\nJohn\nphone 555";
        assert_eq!(strip_metadata(post), "I agree.\nThanks");
        // No header block: a leading sentence with a colon is kept.
        assert_eq!(strip_metadata("Note this\n\nbody"), "Note this\n\nbody");
    }

    proptest! {
        #[test]
        fn decode_restores_in_alphabet_prefix(s in "\\PC{0,40}", n in 1usize..50) {
            let a = Alphabet::standard();
            let m = a.encode(&s, n).unwrap();
            let expected: Vec<Option<char>> = s
                .chars()
                .take(n)
                .map(|c| c.to_ascii_lowercase())
                .map(|c| a.position(c).map(|_| c))
                .collect();
            prop_assert_eq!(m.decode(a), expected);
            prop_assert_eq!(m.len(), n);
        }

        #[test]
        fn encode_is_total_over_bytes(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let m = Alphabet::standard().encode_bytes(&bytes, 16).unwrap();
            let t = m.to_tensor();
            prop_assert_eq!(t.dims(), &[16, 70]);
            for row in t.rows() {
                let s: f64 = row.iter().sum();
                prop_assert!(s == 0.0 || s == 1.0);
            }
        }
    }
}
