//! Adapters from native corpus layouts to [`LabeledCorpus`].

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::LabeledCorpus;
use crate::encoding::{preprocess, PreprocessOptions};
use crate::error::{Error, Result};

fn read_lossy(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

/// Question-classification files: one `COARSE:fine question` per line.
///
/// The fine label (`COARSE:fine`) is kept, giving up to 50 classes. Files are
/// read as lossy UTF-8 since the originals contain a few stray Latin-1 bytes.
pub fn qc_files(paths: &[PathBuf]) -> Result<LabeledCorpus> {
    let mut corpus = LabeledCorpus::new("qc");
    for path in paths {
        for (i, line) in read_lossy(path)?.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (label, text) = line.split_once(' ').unwrap_or((line, ""));
            if !label.contains(':') {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected COARSE:fine label, found `{label}`"),
                });
            }
            corpus.push(label, text.trim())?;
        }
    }
    corpus.require_non_empty()?;
    Ok(corpus)
}

/// Category names keyed by the letter of the conventional Brown file ids (`ca01`, `cr09`).
pub const BROWN_CATEGORIES: [(char, &str); 15] = [
    ('a', "news"),
    ('b', "editorial"),
    ('c', "reviews"),
    ('d', "religion"),
    ('e', "hobbies"),
    ('f', "lore"),
    ('g', "belles_lettres"),
    ('h', "government"),
    ('j', "learned"),
    ('k', "fiction"),
    ('l', "mystery"),
    ('m', "science_fiction"),
    ('n', "adventure"),
    ('p', "romance"),
    ('r', "humor"),
];

/// Brown corpus directory: tagged files named `c<letter><nn>`, optional `cats.txt`.
///
/// Each non-blank line is one sentence; `word/tag` tokens lose their tag.
pub fn brown_dir(dir: &Path) -> Result<LabeledCorpus> {
    let mut cats: HashMap<String, String> = HashMap::new();
    let cats_path = dir.join("cats.txt");
    if cats_path.exists() {
        for line in read_lossy(&cats_path)?.lines() {
            let mut parts = line.split_whitespace();
            if let (Some(id), Some(cat)) = (parts.next(), parts.next()) {
                cats.insert(id.to_string(), cat.to_string());
            }
        }
    }
    let letters: HashMap<char, &str> = BROWN_CATEGORIES.into_iter().collect();
    let mut corpus = LabeledCorpus::new("brown");
    for path in sorted_entries(dir)? {
        let Some(id) = path.file_name().and_then(|n| n.to_str()).map(str::to_string) else {
            continue;
        };
        let by_letter = id
            .strip_prefix('c')
            .and_then(|rest| rest.chars().next())
            .filter(|_| id.len() == 4 && id[2..].chars().all(|c| c.is_ascii_digit()))
            .and_then(|c| letters.get(&c).map(|s| s.to_string()));
        let Some(category) = cats.get(&id).cloned().or(by_letter) else {
            continue;
        };
        for line in read_lossy(&path)?.lines() {
            let words: Vec<&str> = line
                .split_whitespace()
                .map(|tok| tok.rsplit_once('/').map_or(tok, |(w, _)| w))
                .collect();
            if !words.is_empty() {
                corpus.push(&category, words.join(" "))?;
            }
        }
    }
    corpus.require_non_empty()?;
    Ok(corpus)
}

/// Newsgroup layout: one sub-directory per group, one message per file.
pub fn newsgroups_dir(dir: &Path, options: PreprocessOptions) -> Result<LabeledCorpus> {
    let mut corpus = LabeledCorpus::new("twenty");
    for group in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
        let label = group.file_name().unwrap().to_string_lossy().into_owned();
        for file in sorted_entries(&group)?.into_iter().filter(|p| p.is_file()) {
            let text = preprocess(&read_lossy(&file)?, options);
            corpus.push(&label, text.split_whitespace().collect::<Vec<_>>().join(" "))?;
        }
    }
    corpus.require_non_empty()?;
    Ok(corpus)
}
