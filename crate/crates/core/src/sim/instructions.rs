//! Instruction templates and their paraphrases.
//!
//! Each task has four training templates and two held-out paraphrases that
//! vary the verb, the noun and the adverb. Held-out sentences reuse only
//! words that also occur in training sentences, so the frozen language
//! model never meets an unknown token.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Color, Task};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    HeldOut,
}

const LIFT_TRAIN: &[&str] =
    &["lift the {a} cube", "pick up the {a} block", "raise the {a} cube slowly", "grab the {a} block and lift it up"];
const LIFT_HELD: &[&str] = &["slowly lift up the {a} block", "pick the {a} cube up and raise it"];
const ROLL_TRAIN: &[&str] =
    &["roll the {a} cube", "push the {a} block forward", "roll the {a} block away", "slide the {a} cube forward gently"];
const ROLL_HELD: &[&str] = &["gently push the {a} cube away", "roll the {a} block forward slowly"];
const STACK_TRAIN: &[&str] = &[
    "stack the {a} cube to the {b}",
    "put the {a} block on the {b} cube",
    "place the {a} cube on top of the {b} block",
    "stack the {a} block onto the {b} one",
];
const STACK_HELD: &[&str] = &["gently place the {a} block onto the {b} cube", "put the {a} cube on top of the {b} one"];

/// Lowercases, strips punctuation and splits on whitespace.
pub fn words(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|w| w.chars().filter(|c| c.is_alphanumeric()).collect::<String>().to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct InstructionBank;

impl InstructionBank {
    pub fn new() -> Self {
        Self
    }

    pub fn templates(&self, task: Task, split: Split) -> &'static [&'static str] {
        match (task, split) {
            (Task::Lift, Split::Train) => LIFT_TRAIN,
            (Task::Lift, Split::HeldOut) => LIFT_HELD,
            (Task::Roll, Split::Train) => ROLL_TRAIN,
            (Task::Roll, Split::HeldOut) => ROLL_HELD,
            (Task::Stack, Split::Train) => STACK_TRAIN,
            (Task::Stack, Split::HeldOut) => STACK_HELD,
        }
    }

    pub fn fill(template: &str, target: Color, destination: Option<Color>) -> String {
        let s = template.replace("{a}", target.name());
        match destination {
            Some(d) => s.replace("{b}", d.name()),
            None => s,
        }
    }

    /// Template `index` of the split, filled in.
    pub fn sentence(&self, task: Task, split: Split, index: usize, target: Color, destination: Option<Color>) -> String {
        let t = self.templates(task, split);
        Self::fill(t[index % t.len()], target, destination)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, task: Task, split: Split, target: Color, destination: Option<Color>) -> String {
        let n = self.templates(task, split).len();
        self.sentence(task, split, rng.random_range(0..n), target, destination)
    }

    /// Every sentence of a split over all colour assignments.
    pub fn corpus(&self, split: Split) -> Vec<String> {
        let mut out = Vec::new();
        for task in Task::ALL {
            for t in self.templates(task, split) {
                for a in Color::ALL {
                    if task == Task::Stack {
                        for b in Color::ALL.into_iter().filter(|&b| b != a) {
                            out.push(Self::fill(t, a, Some(b)));
                        }
                    } else {
                        out.push(Self::fill(t, a, None));
                    }
                }
            }
        }
        out
    }

    /// Recovers the task and referenced colours of a sentence produced by
    /// any template of either split.
    pub fn parse(&self, sentence: &str) -> Option<(Task, Color, Option<Color>)> {
        let w = words(sentence);
        let colors: Vec<Color> = w.iter().filter_map(|x| Color::from_word(x)).collect();
        for task in Task::ALL {
            for split in [Split::Train, Split::HeldOut] {
                for t in self.templates(task, split) {
                    let tw = words(t);
                    if tw.len() != w.len() {
                        continue;
                    }
                    // slots `{a}` and `{b}` normalise to the bare words `a` and `b`
                    let matches = tw
                        .iter()
                        .zip(&w)
                        .all(|(p, x)| p == x || (p == "a" || p == "b") && Color::from_word(x).is_some());
                    if !matches {
                        continue;
                    }
                    return match (task, colors.as_slice()) {
                        (Task::Stack, [a, b]) if a != b => Some((task, *a, Some(*b))),
                        (Task::Lift | Task::Roll, [a]) => Some((task, *a, None)),
                        _ => None,
                    };
                }
            }
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn splits_are_disjoint() {
        let bank = InstructionBank::new();
        let train: HashSet<String> = bank.corpus(Split::Train).into_iter().collect();
        assert!(bank.corpus(Split::HeldOut).iter().all(|s| !train.contains(s)));
    }

    #[test]
    fn held_out_words_occur_in_training() {
        let bank = InstructionBank::new();
        let vocab: HashSet<String> = bank.corpus(Split::Train).iter().flat_map(|s| words(s)).collect();
        for s in bank.corpus(Split::HeldOut) {
            for w in words(&s) {
                assert!(vocab.contains(&w), "`{w}` in `{s}`");
            }
        }
    }

    #[test]
    fn every_sentence_parses_back() {
        let bank = InstructionBank::new();
        for task in Task::ALL {
            for split in [Split::Train, Split::HeldOut] {
                for i in 0..bank.templates(task, split).len() {
                    let dest = (task == Task::Stack).then_some(Color::Blue);
                    let s = bank.sentence(task, split, i, Color::Red, dest);
                    assert_eq!(bank.parse(&s), Some((task, Color::Red, dest)), "{s}");
                }
            }
        }
        assert_eq!(bank.parse("dance with the red cube"), None);
    }

    #[test]
    fn word_split_normalises() {
        assert_eq!(words("  Lift the RED cube! "), ["lift", "the", "red", "cube"]);
    }
}
