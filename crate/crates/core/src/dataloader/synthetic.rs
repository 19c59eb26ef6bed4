//! A small agreement grammar used as a stand-in corpus for desk-scale runs.
//!
//! Every sentence is `subject verb [modifier].` where the subject is one of
//! three shapes: a plain noun phrase, a noun phrase with a prepositional
//! attractor of the opposite number, or a noun phrase whose determiner is
//! marked for number. Minimal pairs break agreement in exactly one place.

use std::collections::HashSet;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evaluation::pairs::MinimalPair;
use crate::rng::{keyed, Purpose};

pub const PHENOMENA: [&str; 3] = ["subject_verb", "attractor", "determiner_noun"];

const NOUNS: [(&str, &str); 20] = [
    ("dog", "dogs"),
    ("cat", "cats"),
    ("bird", "birds"),
    ("child", "children"),
    ("teacher", "teachers"),
    ("farmer", "farmers"),
    ("horse", "horses"),
    ("girl", "girls"),
    ("boy", "boys"),
    ("doctor", "doctors"),
    ("friend", "friends"),
    ("baby", "babies"),
    ("mouse", "mice"),
    ("fox", "foxes"),
    ("king", "kings"),
    ("student", "students"),
    ("woman", "women"),
    ("man", "men"),
    ("wolf", "wolves"),
    ("sailor", "sailors"),
];

const VERBS: [(&str, &str); 18] = [
    ("runs", "run"),
    ("sleeps", "sleep"),
    ("sings", "sing"),
    ("jumps", "jump"),
    ("eats", "eat"),
    ("walks", "walk"),
    ("laughs", "laugh"),
    ("cries", "cry"),
    ("waits", "wait"),
    ("plays", "play"),
    ("swims", "swim"),
    ("reads", "read"),
    ("falls", "fall"),
    ("smiles", "smile"),
    ("works", "work"),
    ("watches", "watch"),
    ("goes", "go"),
    ("hides", "hide"),
];

const ADJECTIVES: [&str; 10] = ["big", "small", "old", "young", "happy", "tired", "little", "brown", "quiet", "clever"];
const MODIFIERS: [&str; 8] = ["", "quickly", "today", "in the park", "at night", "again", "happily", "near the river"];
const PREPOSITIONS: [&str; 4] = ["near", "behind", "with", "beside"];
/// Number-marked determiners, (singular, plural).
const MARKED_DETS: [(&str, &str); 2] = [("this", "these"), ("that", "those")];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SyntheticSpec {
    pub n_sentences: usize,
    pub n_dev_sentences: usize,
    pub n_pairs: usize,
}

impl SyntheticSpec {
    pub fn new(n_sentences: usize) -> Self {
        Self {
            n_sentences,
            n_dev_sentences: (n_sentences / 10).max(1),
            n_pairs: 400,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    /// One sentence per line.
    pub train: String,
    pub dev: String,
    pub pairs: Vec<MinimalPair>,
}

struct Gen {
    rng: ChaCha8Rng,
}

impl Gen {
    fn pick<'a, T>(&mut self, items: &'a [T]) -> &'a T {
        &items[self.rng.random_range(0..items.len() as u64) as usize]
    }

    fn coin(&mut self, p: f64) -> bool {
        self.rng.random_bool(p)
    }

    fn noun_phrase(&mut self, plural: bool) -> String {
        let (sg, pl) = *self.pick(&NOUNS);
        let noun = if plural { pl } else { sg };
        if self.coin(0.3) {
            format!("the {} {noun}", self.pick(&ADJECTIVES))
        } else {
            format!("the {noun}")
        }
    }

    /// Returns (subject, subject is plural) for the given phenomenon shape.
    fn subject(&mut self, shape: usize, plural: bool) -> (String, Option<(String, String)>) {
        match shape {
            0 => (self.noun_phrase(plural), None),
            1 => {
                let head = self.noun_phrase(plural);
                let prep = self.pick(&PREPOSITIONS);
                let attractor = self.noun_phrase(!plural);
                (format!("{head} {prep} {attractor}"), None)
            }
            _ => {
                let (dsg, dpl) = *self.pick(&MARKED_DETS);
                let (nsg, npl) = *self.pick(&NOUNS);
                let noun = if plural { npl } else { nsg };
                let (det, wrong) = if plural { (dpl, dsg) } else { (dsg, dpl) };
                let good = format!("{det} {noun}");
                let bad = format!("{wrong} {noun}");
                (good.clone(), Some((good, bad)))
            }
        }
    }

    /// A grammatical sentence and, when requested, its agreement violation.
    fn sentence(&mut self, shape: usize, plural: bool) -> (String, String) {
        let (subject, det_variant) = self.subject(shape, plural);
        let (vsg, vpl) = *self.pick(&VERBS);
        let (verb, wrong_verb) = if plural { (vpl, vsg) } else { (vsg, vpl) };
        let modifier = *self.pick(&MODIFIERS);
        let tail = |v: &str| {
            if modifier.is_empty() {
                format!("{v}.")
            } else {
                format!("{v} {modifier}.")
            }
        };
        let good = format!("{subject} {}", tail(verb));
        let bad = match det_variant {
            Some((g, b)) => format!("{b}{}", &good[g.len()..]),
            None => format!("{subject} {}", tail(wrong_verb)),
        };
        (good, bad)
    }

    fn random_sentence(&mut self) -> String {
        let shape = self.rng.random_range(0..3u64) as usize;
        let plural = self.coin(0.5);
        self.sentence(shape, plural).0
    }
}

/// Generates train text, dev text and agreement minimal pairs from `seed`.
pub fn generate_synthetic_corpus(seed: u64, n_sentences: usize) -> Result<SyntheticCorpus> {
    generate_with(seed, SyntheticSpec::new(n_sentences))
}

pub fn generate_with(seed: u64, spec: SyntheticSpec) -> Result<SyntheticCorpus> {
    if spec.n_sentences == 0 {
        return Err(Error::config("n_sentences must be >= 1"));
    }
    let mut gen = Gen {
        rng: keyed(seed, 0, Purpose::Synthetic),
    };
    let train: Vec<String> = (0..spec.n_sentences).map(|_| gen.random_sentence()).collect();
    let dev: Vec<String> = (0..spec.n_dev_sentences).map(|_| gen.random_sentence()).collect();
    let seen: HashSet<&str> = train.iter().map(String::as_str).collect();

    let mut pairs = Vec::with_capacity(spec.n_pairs);
    let mut used = HashSet::new();
    let mut attempts = 0usize;
    while pairs.len() < spec.n_pairs {
        attempts += 1;
        if attempts > 1000 * spec.n_pairs.max(1) {
            return Err(Error::Degenerate("could not draw enough unseen minimal pairs".into()));
        }
        let i = pairs.len();
        let shape = i % PHENOMENA.len();
        let plural = (i / PHENOMENA.len()) % 2 == 1;
        let (good, bad) = gen.sentence(shape, plural);
        if seen.contains(good.as_str()) || !used.insert(good.clone()) {
            continue;
        }
        pairs.push(MinimalPair::new(PHENOMENA[shape], good, bad)?);
    }

    let join = |v: &[String]| v.iter().map(|s| format!("{s}\n")).collect::<String>();
    Ok(SyntheticCorpus {
        train: join(&train),
        dev: join(&dev),
        pairs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn agrees(sentence: &str) -> bool {
        let words: Vec<&str> = sentence.trim_end_matches('.').split(' ').collect();
        let number_of_noun = |w: &str| {
            NOUNS.iter().find_map(|&(s, p)| {
                if w == s {
                    Some(false)
                } else if w == p {
                    Some(true)
                } else {
                    None
                }
            })
        };
        let head = words.iter().find_map(|w| number_of_noun(w)).unwrap();
        let verb = words
            .iter()
            .find_map(|w| VERBS.iter().find_map(|&(s, p)| if *w == s { Some(false) } else if *w == p { Some(true) } else { None }))
            .unwrap();
        let det_ok = MARKED_DETS.iter().all(|&(s, p)| {
            !(words[0] == s && head || words[0] == p && !head)
        });
        head == verb && det_ok
    }

    #[test]
    fn grammatical_sentences_agree() {
        let c = generate_synthetic_corpus(3, 500).unwrap();
        assert_eq!(c.train.lines().count(), 500);
        assert_eq!(c.dev.lines().count(), 50);
        assert!(c.train.lines().chain(c.dev.lines()).all(agrees));
        for p in &c.pairs {
            assert!(agrees(&p.good), "{}", p.good);
            assert!(!agrees(&p.bad), "{}", p.bad);
            assert_eq!(p.good.split(' ').count(), p.bad.split(' ').count());
        }
    }

    #[test]
    fn seeded_and_disjoint_from_train() {
        let a = generate_synthetic_corpus(11, 2000).unwrap();
        assert_eq!(a, generate_synthetic_corpus(11, 2000).unwrap());
        assert_ne!(a.train, generate_synthetic_corpus(12, 2000).unwrap().train);
        let train: HashSet<&str> = a.train.lines().collect();
        assert_eq!(a.pairs.len(), 400);
        assert!(a.pairs.iter().all(|p| !train.contains(p.good.as_str()) && !train.contains(p.bad.as_str())));
        for ph in PHENOMENA {
            let n = a.pairs.iter().filter(|p| p.phenomenon == ph).count();
            assert!((133..=134).contains(&n));
        }
        assert!(generate_synthetic_corpus(1, 0).is_err());
    }
}
