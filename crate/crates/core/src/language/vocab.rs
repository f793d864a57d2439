use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::sim::words;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
const SPECIALS: [&str; 3] = ["<pad>", "<bos>", "<eos>"];

/// Word-level vocabulary: the three specials followed by the corpus words
/// in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::Config("vocabulary must start with <pad>, <bos>, <eos>".into()));
        }
        let index: HashMap<String, usize> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::Config("vocabulary has duplicate tokens".into()));
        }
        Ok(Self { tokens, index })
    }

    pub fn from_corpus<S: AsRef<str>>(corpus: &[S]) -> Self {
        let words: BTreeSet<String> = corpus.iter().flat_map(|s| words(s.as_ref())).collect();
        let tokens = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("specials first, words unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[BOS, words..., EOS]`; unknown words are rejected by name.
    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = vec![BOS];
        for w in words(text) {
            ids.push(self.id(&w).ok_or(Error::UnknownWord(w))?);
        }
        ids.push(EOS);
        Ok(ids)
    }

    /// The words of `ids`, skipping specials.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= SPECIALS.len())
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{InstructionBank, Split};

    #[test]
    fn encodes_with_specials() {
        let v = Vocabulary::from_corpus(&["Lift the red cube"]);
        let ids = v.encode("Lift the red cube").unwrap();
        assert_eq!(ids.len(), 6);
        assert_eq!((ids[0], ids[5]), (BOS, EOS));
        assert_eq!(v.decode(&ids), "lift the red cube");
        assert_eq!(v.encode("").unwrap(), [BOS, EOS]);
        match v.encode("lift the purple cube") {
            Err(Error::UnknownWord(w)) => assert_eq!(w, "purple"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corpus_round_trips_losslessly() {
        let bank = InstructionBank::new();
        let v = Vocabulary::from_corpus(&bank.corpus(Split::Train));
        for split in [Split::Train, Split::HeldOut] {
            for s in bank.corpus(split) {
                assert_eq!(v.decode(&v.encode(&s).unwrap()), words(&s).join(" "));
            }
        }
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = Vocabulary::from_corpus(&["pick up the blue block"]);
        let p = dir.path().join("vocab.txt");
        v.save(&p).unwrap();
        assert_eq!(Vocabulary::load(&p).unwrap(), v);
    }
}
