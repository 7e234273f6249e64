//! Synthetic eight-domain instruction corpus over a fixed character vocabulary.
//!
//! Every example is `<tag> prompt <sep> response .` where the tag names the
//! domain. Only the response (and the terminating `.`) is scored. Raw text
//! separates with `|`; instruction text uses `?`, a marker the pretraining
//! split never places there, so fine-tuning has a format shift to learn the
//! way instruction tuning does on top of a raw pretrained model.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::Rng;

/// Size of the character vocabulary every model must use.
pub const VOCAB_SIZE: usize = 64;

/// Longest example any domain generates, separator and `.` included.
pub const MAX_EXAMPLE_TOKENS: usize = 15;

const EOS: char = '.';

const ALPHABET: &str = concat!(
    "|.",
    "0123456789",
    "abcdefghijklmnopqrstuvwxyz",
    "CRSBAPNQ",
    "()[]{}<>+=?",
);

pub fn encode_char(c: char) -> Option<usize> {
    ALPHABET.chars().position(|a| a == c)
}

pub fn decode_token(t: usize) -> Option<char> {
    ALPHABET.chars().nth(t)
}

pub fn encode(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| encode_char(c).ok_or_else(|| Error::Input(format!("character {c:?} is not in the vocabulary"))))
        .collect()
}

pub fn decode(tokens: &[usize]) -> String {
    tokens.iter().map(|&t| decode_token(t).unwrap_or('�')).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Copy,
    Reverse,
    SortDigits,
    Brackets,
    Arithmetic,
    Palindrome,
    Counting,
    Template,
}

impl Domain {
    pub const ALL: [Domain; 8] = [
        Domain::Copy,
        Domain::Reverse,
        Domain::SortDigits,
        Domain::Brackets,
        Domain::Arithmetic,
        Domain::Palindrome,
        Domain::Counting,
        Domain::Template,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::Copy => "copy",
            Domain::Reverse => "reverse",
            Domain::SortDigits => "sort_digits",
            Domain::Brackets => "brackets",
            Domain::Arithmetic => "arithmetic",
            Domain::Palindrome => "palindrome",
            Domain::Counting => "counting",
            Domain::Template => "template",
        }
    }

    fn tag(self) -> char {
        b"CRSBAPNQ"[self.index()] as char
    }

    /// Draws one `(prompt, response)` pair.
    fn generate(self, rng: &mut Rng) -> (String, String) {
        let letters = |rng: &mut Rng, lo: usize, hi: usize| -> String {
            let n = lo + rng.below(hi - lo + 1);
            (0..n).map(|_| (b'a' + rng.below(26) as u8) as char).collect()
        };
        match self {
            Domain::Copy => {
                let s = letters(rng, 3, 6);
                (s.clone(), s)
            }
            Domain::Reverse => {
                let s = letters(rng, 3, 6);
                (s.clone(), s.chars().rev().collect())
            }
            Domain::SortDigits => {
                let n = 3 + rng.below(4);
                let s: String = (0..n).map(|_| (b'0' + rng.below(10) as u8) as char).collect();
                let mut sorted: Vec<char> = s.chars().collect();
                sorted.sort_unstable();
                (s, sorted.into_iter().collect())
            }
            Domain::Brackets => {
                let n = 2 + rng.below(4);
                let open = ['(', '[', '{', '<'];
                let close = [')', ']', '}', '>'];
                let picks: Vec<usize> = (0..n).map(|_| rng.below(4)).collect();
                let prompt = picks.iter().map(|&i| open[i]).collect();
                let response = picks.iter().rev().map(|&i| close[i]).collect();
                (prompt, response)
            }
            Domain::Arithmetic => {
                let a = rng.below(50);
                let b = rng.below(50);
                (format!("{a}+{b}"), format!("{}", a + b))
            }
            Domain::Palindrome => {
                let s = letters(rng, 2, 5);
                let tail: String = s.chars().rev().skip(1).collect();
                (s, tail)
            }
            Domain::Counting => {
                let n = 2 + rng.below(8);
                let s: String = (0..n).map(|_| if rng.bernoulli(0.5) { 'a' } else { 'b' }).collect();
                let count = s.chars().filter(|&c| c == 'a').count();
                (s, count.to_string())
            }
            Domain::Template => {
                let key = letters(rng, 2, 2);
                let shifted: String = key.bytes().map(|b| (b'a' + (b - b'a' + 1) % 26) as char).collect();
                (format!("?{key}="), shifted)
            }
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Domain::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown domain {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// Pretraining text.
    #[default]
    Raw,
    /// Fine-tuning and evaluation text.
    Instruction,
}

impl Format {
    pub fn separator(self) -> char {
        match self {
            Format::Raw => '|',
            Format::Instruction => '?',
        }
    }
}

/// One encoded example.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Example {
    pub domain: Domain,
    pub tokens: Vec<usize>,
    /// Index of the first response token in `tokens`.
    pub response_start: usize,
}

impl Example {
    /// A raw-format example.
    pub fn new(domain: Domain, prompt: &str, response: &str) -> Result<Self> {
        Self::with_format(domain, prompt, response, Format::Raw)
    }

    pub fn with_format(domain: Domain, prompt: &str, response: &str, format: Format) -> Result<Self> {
        let text = format!("{}{prompt}{}{response}{EOS}", domain.tag(), format.separator());
        let tokens = encode(&text)?;
        let response_start = tokens.len() - response.chars().count() - 1;
        Ok(Self {
            domain,
            tokens,
            response_start,
        })
    }

    /// Model inputs: every token except the last.
    pub fn inputs(&self) -> &[usize] {
        &self.tokens[..self.tokens.len() - 1]
    }

    /// Next-token targets aligned with [`inputs`](Self::inputs); only
    /// response positions are scored.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (1..self.tokens.len())
            .map(|i| (i >= self.response_start).then_some(self.tokens[i]))
            .collect()
    }

    pub fn scored_tokens(&self) -> usize {
        self.tokens.len() - self.response_start
    }

    pub fn text(&self) -> String {
        decode(&self.tokens)
    }
}

/// Per-domain example counts for each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub pretrain_per_domain: usize,
    pub finetune_per_domain: usize,
    pub heldout_per_domain: usize,
    pub reference_per_domain: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            pretrain_per_domain: 256,
            finetune_per_domain: 96,
            heldout_per_domain: 32,
            reference_per_domain: 32,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.pretrain_per_domain == 0 {
            errors.push("corpus.pretrain_per_domain must be at least 1".into());
        }
        if self.finetune_per_domain == 0 {
            errors.push("corpus.finetune_per_domain must be at least 1".into());
        }
        if self.heldout_per_domain == 0 {
            errors.push("corpus.heldout_per_domain must be at least 1".into());
        }
        if self.reference_per_domain == 0 {
            errors.push("corpus.reference_per_domain must be at least 1".into());
        }
    }
}

/// Examples grouped by domain, indexed by [`Domain::index`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DomainSplit {
    pub by_domain: Vec<Vec<Example>>,
}

impl DomainSplit {
    pub fn flatten(&self) -> Vec<Example> {
        self.by_domain.iter().flatten().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.by_domain.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Disjoint splits. `finetune` and `heldout` are instruction-format;
/// `pretrain` and `reference` are raw. `reference` measures what pruning
/// costs the base on its own distribution.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub pretrain: DomainSplit,
    pub finetune: DomainSplit,
    pub heldout: DomainSplit,
    pub reference: DomainSplit,
}

impl Corpus {
    /// Draws unique examples per domain; no example appears in two splits.
    pub fn generate(spec: &CorpusSpec, rng: &Rng) -> Result<Self> {
        let mut pretrain = DomainSplit::default();
        let mut finetune = DomainSplit::default();
        let mut heldout = DomainSplit::default();
        let mut reference = DomainSplit::default();
        let need =
            spec.pretrain_per_domain + spec.finetune_per_domain + spec.heldout_per_domain + spec.reference_per_domain;
        for domain in Domain::ALL {
            let mut drng = rng.fork_named(domain.name());
            let mut seen = HashSet::new();
            let mut pool = Vec::with_capacity(need);
            let mut attempts = 0usize;
            while pool.len() < need {
                attempts += 1;
                if attempts > need * 200 {
                    return Err(Error::Input(format!(
                        "domain {domain} cannot supply {need} distinct examples"
                    )));
                }
                let (p, r) = domain.generate(&mut drng);
                if seen.insert(p.clone()) {
                    pool.push((p, r));
                }
            }
            // Draw order: heldout, finetune, pretrain, reference.
            let build = |pairs: &[(String, String)], format| -> Result<Vec<Example>> {
                pairs
                    .iter()
                    .map(|(p, r)| Example::with_format(domain, p, r, format))
                    .collect()
            };
            let (h, rest) = pool.split_at(spec.heldout_per_domain);
            let (f, rest) = rest.split_at(spec.finetune_per_domain);
            let (p, r) = rest.split_at(spec.pretrain_per_domain);
            heldout.by_domain.push(build(h, Format::Instruction)?);
            finetune.by_domain.push(build(f, Format::Instruction)?);
            pretrain.by_domain.push(build(p, Format::Raw)?);
            reference.by_domain.push(build(r, Format::Raw)?);
        }
        Ok(Self {
            pretrain,
            finetune,
            heldout,
            reference,
        })
    }

    /// Deterministic calibration sample drawn round-robin across domains.
    pub fn calibration_sample(&self, n: usize) -> Vec<Example> {
        let mut out = Vec::with_capacity(n);
        let mut i = 0;
        while out.len() < n {
            let mut progressed = false;
            for d in &self.pretrain.by_domain {
                if let Some(e) = d.get(i) {
                    out.push(e.clone());
                    progressed = true;
                    if out.len() == n {
                        break;
                    }
                }
            }
            if !progressed {
                break;
            }
            i += 1;
        }
        out
    }
}
