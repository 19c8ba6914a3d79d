//! Bag-of-words encoding of instructions.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercased alphanumeric tokens of `text`.
pub fn tokenize(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    terms: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

    fn try_from(terms: Vec<String>) -> Result<Self> {
        Vocabulary::from_terms(terms)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.terms
    }
}

impl Vocabulary {
    pub fn from_terms(terms: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(terms.len());
        for (i, t) in terms.iter().enumerate() {
            if t.is_empty() || *t != t.to_lowercase() {
                return Err(Error::Invariant(format!("vocabulary term `{t}` is not a lowercase token")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Invariant(format!("duplicate vocabulary term `{t}`")));
            }
        }
        Ok(Vocabulary { terms, index })
    }

    /// Sorted set of all tokens in `texts`.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(tokenize).collect();
        Vocabulary::from_terms(set.into_iter().collect()).expect("tokens are unique and lowercase")
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn get(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WordBag {
    pub counts: Vec<f64>,
}

impl WordBag {
    pub fn cosine(&self, o: &WordBag) -> f64 {
        let dot: f64 = self.counts.iter().zip(&o.counts).map(|(a, b)| a * b).sum();
        let na = self.counts.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = o.counts.iter().map(|a| a * a).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

pub fn bag_of_words(text: &str, vocab: &Vocabulary) -> WordBag {
    let mut counts = vec![0.0; vocab.len()];
    let mut seen = 0usize;
    let mut known = 0usize;
    for t in tokenize(text) {
        seen += 1;
        if let Some(i) = vocab.get(&t) {
            counts[i] += 1.0;
            known += 1;
        }
    }
    if seen > 0 && known == 0 {
        log::warn!("instruction has no in-vocabulary terms: {text:?}");
    }
    WordBag { counts }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(terms: &[&str]) -> Vocabulary {
        Vocabulary::from_terms(terms.iter().map(|s| s.to_string()).collect()).unwrap()
    }

    #[test]
    fn counts_in_vocabulary_terms() {
        let v = vocab(&["turn", "knob"]);
        assert_eq!(bag_of_words("Turn the knob, turn!", &v).counts, vec![2.0, 1.0]);
        assert_eq!(bag_of_words("", &v).counts, vec![0.0, 0.0]);
        assert_eq!(bag_of_words("push lever", &v).counts, vec![0.0, 0.0]);
    }

    #[test]
    fn build_is_sorted_and_unique() {
        let v = Vocabulary::build(["Pull the handle", "the KNOB"]);
        assert_eq!(v.terms(), ["handle", "knob", "pull", "the"]);
        assert!(Vocabulary::from_terms(vec!["a".into(), "a".into()]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn unknown_words_change_nothing(picks in proptest::collection::vec(0usize..4, 0..12), noise in proptest::collection::vec("[x-z]{5,8}", 0..6)) {
            let v = vocab(&["turn", "knob", "pull", "handle"]);
            let known: Vec<&str> = picks.iter().map(|&k| v.terms()[k].as_str()).collect();
            let clean = bag_of_words(&known.join(" "), &v);
            let mixed = bag_of_words(&format!("{} {}", known.join(" "), noise.join(" ")), &v);
            proptest::prop_assert!(clean.counts.iter().all(|&c| c >= 0.0));
            proptest::prop_assert_eq!(clean, mixed);
        }
    }
}
