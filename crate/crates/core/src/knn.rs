//! k-nearest-neighbour baseline over normalized bag-of-words vectors.

use std::collections::HashMap;
use std::str::FromStr;

use crate::corpus::{tokens, LabeledCorpus};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Representation {
    /// L2-normalized term frequencies.
    Bow,
    /// L2-normalized `tf * ln(N / df)`.
    Tfidf,
}

impl FromStr for Representation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bow" => Ok(Representation::Bow),
            "tfidf" => Ok(Representation::Tfidf),
            _ => Err(Error::InvalidArgument(format!("unknown representation `{s}` (bow, tfidf)"))),
        }
    }
}

/// Sparse unit vector, sorted by term id.
type SparseVec = Vec<(usize, f64)>;

pub struct KnnIndex {
    vocab: HashMap<String, usize>,
    idf: Vec<f64>,
    train: Vec<SparseVec>,
    targets: Vec<usize>,
    representation: Representation,
}

fn dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (mut i, mut j, mut s) = (0, 0, 0.0);
    while i < a.len() && j < b.len() {
        match a[i].0.cmp(&b[j].0) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                s += a[i].1 * b[j].1;
                i += 1;
                j += 1;
            }
        }
    }
    s
}

impl KnnIndex {
    pub fn fit(train: &LabeledCorpus, representation: Representation) -> Result<Self> {
        train.require_non_empty()?;
        let mut vocab = HashMap::new();
        let mut df: Vec<usize> = Vec::new();
        for text in train.texts() {
            let mut seen: Vec<usize> = tokens(text)
                .map(|t| {
                    let next = vocab.len();
                    *vocab.entry(t).or_insert(next)
                })
                .collect();
            seen.sort_unstable();
            seen.dedup();
            for id in seen {
                if id >= df.len() {
                    df.resize(id + 1, 0);
                }
                df[id] += 1;
            }
        }
        let n = train.len() as f64;
        let idf = df.iter().map(|&d| (n / d as f64).ln()).collect();
        let mut index = KnnIndex {
            vocab,
            idf,
            train: Vec::new(),
            targets: train.targets().to_vec(),
            representation,
        };
        index.train = train.texts().iter().map(|t| index.vectorize(t)).collect();
        Ok(index)
    }

    /// Unknown tokens are ignored; an all-unknown text is the zero vector.
    pub fn vectorize(&self, text: &str) -> SparseVec {
        let mut tf: HashMap<usize, f64> = HashMap::new();
        for t in tokens(text) {
            if let Some(&id) = self.vocab.get(&t) {
                *tf.entry(id).or_default() += 1.0;
            }
        }
        let mut v: SparseVec = tf
            .into_iter()
            .map(|(id, c)| match self.representation {
                Representation::Bow => (id, c),
                Representation::Tfidf => (id, c * self.idf[id]),
            })
            .filter(|&(_, w)| w != 0.0)
            .collect();
        v.sort_unstable_by_key(|&(id, _)| id);
        let norm = v.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        if norm > 0.0 {
            for (_, w) in &mut v {
                *w /= norm;
            }
        }
        v
    }

    /// Cosine similarity of `text` to every training record.
    pub fn similarities(&self, text: &str) -> Vec<f64> {
        let q = self.vectorize(text);
        self.train.iter().map(|d| dot(&q, d)).collect()
    }

    /// Majority vote over the `k` most similar records; ties go to the larger summed
    /// similarity, then the lower class id. Neighbours with equal similarity are taken
    /// in training order.
    pub fn predict(&self, text: &str, k: usize) -> usize {
        let sims = self.similarities(text);
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        let mut votes: HashMap<usize, (usize, f64)> = HashMap::new();
        for &i in order.iter().take(k.min(order.len())) {
            let e = votes.entry(self.targets[i]).or_default();
            e.0 += 1;
            e.1 += sims[i];
        }
        votes
            .into_iter()
            .max_by(|(ca, (va, sa)), (cb, (vb, sb))| va.cmp(vb).then(sa.total_cmp(sb)).then(cb.cmp(ca)))
            .map(|(c, _)| c)
            .unwrap_or(0)
    }
}

/// Fits on `train`, predicts `test`, and scores with macro metrics.
pub fn knn_baseline(train: &LabeledCorpus, test: &LabeledCorpus, k: usize, representation: Representation) -> Result<MetricsReport> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let index = KnnIndex::fit(train, representation)?;
    let k = if k > train.len() {
        log::warn!("k = {k} exceeds the {} training records; using {}", train.len(), train.len());
        train.len()
    } else {
        k
    };
    // Train and test may carry different label indices; compare through label strings.
    // A predicted label the test index lacks lands in an extra slot, counting as a miss.
    let classes = test.class_count();
    let predicted: Vec<usize> = test
        .iter()
        .map(|(_, text)| {
            let p = index.predict(text, k);
            test.class_id(&train.labels()[p]).unwrap_or(classes)
        })
        .collect();
    let mut report = MetricsReport::from_predictions(classes + 1, test.targets(), &predicted)?;
    report.per_class.truncate(classes);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LabeledCorpus {
        LabeledCorpus::from_pairs(
            "toy",
            [("a", "red red apple"), ("a", "red cherry"), ("b", "green apple"), ("b", "green green leaf")],
        )
        .unwrap()
    }

    #[test]
    fn identical_point_k1() {
        let train = toy();
        let idx = KnnIndex::fit(&train, Representation::Bow).unwrap();
        for (i, text) in train.texts().iter().enumerate() {
            assert_eq!(idx.predict(text, 1), train.targets()[i]);
        }
    }

    /// All-pairs brute force on the toy set: the query "red green apple" as a BOW unit vector.
    #[test]
    fn hand_computed_vote_k3() {
        let train = toy();
        let idx = KnnIndex::fit(&train, Representation::Bow).unwrap();
        let q = "red green apple";
        let s = idx.similarities(q);
        let r3 = 1.0 / 3f64.sqrt();
        let expected = [
            // (2 red + 1 apple) / (sqrt(3) * sqrt(5))
            3.0 * r3 / 5f64.sqrt(),
            // 1 red / (sqrt(3) * sqrt(2))
            r3 / 2f64.sqrt(),
            // (1 green + 1 apple) / (sqrt(3) * sqrt(2))
            2.0 * r3 / 2f64.sqrt(),
            // 2 green / (sqrt(3) * sqrt(5))
            2.0 * r3 / 5f64.sqrt(),
        ];
        for (got, want) in s.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12);
        }
        // Top three: record 2 (b, 0.816), record 0 (a, 0.775), record 3 (b, 0.516) -> b wins 2:1.
        assert_eq!(idx.predict(q, 3), 1);
        // Top one is record 2.
        assert_eq!(idx.predict(q, 1), 1);
    }

    #[test]
    fn vote_tie_goes_to_larger_similarity_then_lower_class() {
        let train = LabeledCorpus::from_pairs("t", [("a", "x y"), ("b", "x")]).unwrap();
        let idx = KnnIndex::fit(&train, Representation::Bow).unwrap();
        // 1:1 vote, "x" is closer to record 1.
        assert_eq!(idx.predict("x", 2), 1);
        // Zero vector: every similarity is 0, so the lower class wins.
        assert_eq!(idx.predict("unknown", 2), 0);
    }

    #[test]
    fn tfidf_ignores_terms_in_every_document() {
        let train = LabeledCorpus::from_pairs("t", [("a", "the cat"), ("b", "the dog")]).unwrap();
        let idx = KnnIndex::fit(&train, Representation::Tfidf).unwrap();
        assert_eq!(idx.vectorize("the"), vec![]);
        assert_eq!(idx.predict("the dog", 1), 1);
    }

    #[test]
    fn memorizes_training_set() {
        let train = toy();
        for rep in [Representation::Bow, Representation::Tfidf] {
            let r = knn_baseline(&train, &train, 1, rep).unwrap();
            assert_eq!((r.macro_precision, r.macro_recall, r.macro_f1), (1.0, 1.0, 1.0));
        }
    }

    #[test]
    fn k_is_clamped_and_empty_train_rejected() {
        let train = toy();
        assert!(knn_baseline(&train, &train, 99, Representation::Bow).is_ok());
        assert!(knn_baseline(&train, &train, 0, Representation::Bow).is_err());
        let empty = LabeledCorpus::new("e");
        assert!(matches!(knn_baseline(&empty, &train, 1, Representation::Bow), Err(Error::EmptyCorpus(_))));
    }
}
