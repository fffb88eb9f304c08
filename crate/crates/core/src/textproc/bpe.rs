use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_SPECIALS: usize = 4;
pub const SPECIALS: [&str; NUM_SPECIALS] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Appended to every word before merging so decoding can restore spaces.
const END_OF_WORD: &str = "</w>";
const FILE_HEADER: &str = "#fewsum-bpe v1";

/// A sequence of subword ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
}

impl TokenSeq {
    pub fn new(ids: Vec<usize>) -> Self {
        TokenSeq { ids }
    }

    /// Number of non-PAD tokens.
    pub fn length(&self) -> usize {
        self.ids.iter().filter(|&&i| i != PAD).count()
    }
}

/// Word-internal byte-pair encoding over Unicode characters.
#[derive(Clone, Debug, PartialEq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    symbols: Vec<String>,
    vocab: HashMap<String, usize>,
    alphabet_len: usize,
}

fn word_symbols(word: &str) -> Vec<String> {
    let mut s: Vec<String> = word.chars().map(|c| c.to_string()).collect();
    s.push(END_OF_WORD.to_string());
    s
}

fn merge_pair(symbols: &[String], left: &str, right: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
            out.push(format!("{left}{right}"));
            i += 2;
        } else {
            out.push(symbols[i].clone());
            i += 1;
        }
    }
    out
}

impl BpeModel {
    /// Frequency-greedy BPE. Each step merges the most frequent adjacent pair
    /// (ties go to the lexicographically smallest pair). Stops early when no
    /// pair is left.
    pub fn train<I, S>(corpus: I, merges: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut word_counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut any = false;
        for line in corpus {
            any = true;
            for w in line.as_ref().split_whitespace() {
                *word_counts.entry(w.to_string()).or_default() += 1;
            }
        }
        if !any || word_counts.is_empty() {
            return Err(Error::Empty("BPE training corpus".into()));
        }

        let mut alphabet: BTreeSet<String> = BTreeSet::new();
        alphabet.insert(END_OF_WORD.to_string());
        let mut words: Vec<(Vec<String>, usize)> = word_counts
            .iter()
            .map(|(w, &c)| {
                for ch in w.chars() {
                    alphabet.insert(ch.to_string());
                }
                (word_symbols(w), c)
            })
            .collect();

        let mut learned = Vec::with_capacity(merges);
        for _ in 0..merges {
            let mut counts: HashMap<(&str, &str), usize> = HashMap::new();
            for (syms, c) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((pair[0].as_str(), pair[1].as_str())).or_default() += c;
                }
            }
            let best = counts
                .into_iter()
                .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)))
                .map(|((a, b), _)| (a.to_string(), b.to_string()));
            let Some((left, right)) = best else { break };
            for (syms, _) in words.iter_mut() {
                if syms.len() > 1 {
                    *syms = merge_pair(syms, &left, &right);
                }
            }
            learned.push((left, right));
        }
        Ok(Self::from_parts(alphabet.into_iter().collect(), learned))
    }

    /// Trains with as many merges as fit into `vocab_size` symbols,
    /// specials and the character alphabet included.
    pub fn train_to_vocab<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Self> {
        let base = Self::train(corpus.iter().map(|s| s.as_ref()), 0)?.vocab_size();
        if vocab_size < base {
            return Err(Error::config(
                "model.vocab_size",
                format!("{vocab_size} is below the {base} specials and characters of the corpus"),
            ));
        }
        Self::train(corpus.iter().map(|s| s.as_ref()), vocab_size - base)
    }

    fn from_parts(alphabet: Vec<String>, merges: Vec<(String, String)>) -> Self {
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut vocab: HashMap<String, usize> = HashMap::new();
        for (i, s) in symbols.iter().enumerate() {
            vocab.insert(s.clone(), i);
        }
        let alphabet_len = alphabet.len();
        for sym in alphabet.into_iter().chain(merges.iter().map(|(a, b)| format!("{a}{b}"))) {
            if !vocab.contains_key(&sym) {
                vocab.insert(sym.clone(), symbols.len());
                symbols.push(sym);
            }
        }
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(i, p)| (p.clone(), i))
            .collect();
        BpeModel {
            merges,
            ranks,
            symbols,
            vocab,
            alphabet_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Number of initial symbols (characters plus the end-of-word marker).
    pub fn alphabet_len(&self) -> usize {
        self.alphabet_len
    }

    pub fn symbol(&self, id: usize) -> Option<&str> {
        self.symbols.get(id).map(String::as_str)
    }

    pub fn id(&self, symbol: &str) -> Option<usize> {
        self.vocab.get(symbol).copied()
    }

    pub fn is_special(id: usize) -> bool {
        id < NUM_SPECIALS
    }

    fn encode_word(&self, word: &str, out: &mut Vec<usize>) {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, p)| (p[0].clone(), p[1].clone()));
            match best {
                Some((l, r)) => syms = merge_pair(&syms, &l, &r),
                None => break,
            }
        }
        out.extend(syms.iter().map(|s| self.vocab.get(s).copied().unwrap_or(UNK)));
    }

    /// Encodes whitespace-separated words. Characters outside the training
    /// alphabet become UNK.
    pub fn encode(&self, text: &str, add_bos_eos: bool) -> TokenSeq {
        let mut ids = Vec::new();
        if add_bos_eos {
            ids.push(BOS);
        }
        for w in text.split_whitespace() {
            self.encode_word(w, &mut ids);
        }
        if add_bos_eos {
            ids.push(EOS);
        }
        TokenSeq { ids }
    }

    /// Inverse of `encode` on whitespace-normalised text; special tokens
    /// (including UNK) are dropped.
    pub fn decode(&self, seq: &TokenSeq) -> Result<String> {
        self.decode_ids(&seq.ids)
    }

    pub fn decode_ids(&self, ids: &[usize]) -> Result<String> {
        let mut s = String::new();
        for (position, &id) in ids.iter().enumerate() {
            if id >= self.symbols.len() {
                return Err(Error::TokenOutOfRange {
                    id,
                    position,
                    vocab: self.symbols.len(),
                });
            }
            if Self::is_special(id) {
                continue;
            }
            s.push_str(&self.symbols[id]);
        }
        let s = s.replace(END_OF_WORD, " ");
        Ok(s.trim_end().to_string())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let alphabet = &self.symbols[NUM_SPECIALS..NUM_SPECIALS + self.alphabet_len];
        writeln!(s, "{FILE_HEADER}").unwrap();
        writeln!(s, "#specials {}", SPECIALS.join(" ")).unwrap();
        writeln!(s, "#alphabet {}", alphabet.len()).unwrap();
        for a in alphabet {
            writeln!(s, "{a}").unwrap();
        }
        writeln!(s, "#merges {}", self.merges.len()).unwrap();
        for (l, r) in &self.merges {
            writeln!(s, "{l} {r}").unwrap();
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    message: format!("unexpected end of BPE file, expected {what}"),
                })
        };
        let (_, header) = next("header")?;
        if header != FILE_HEADER {
            return Err(Error::Parse {
                line: 1,
                message: format!("bad BPE header `{header}`"),
            });
        }
        let (ln, specials) = next("specials")?;
        if specials != format!("#specials {}", SPECIALS.join(" ")) {
            return Err(Error::Parse {
                line: ln + 1,
                message: "unsupported special tokens".into(),
            });
        }
        let count = |line: (usize, &str), tag: &str| -> Result<usize> {
            line.1
                .strip_prefix(tag)
                .and_then(|n| n.trim().parse().ok())
                .ok_or_else(|| Error::Parse {
                    line: line.0 + 1,
                    message: format!("expected `{tag} <count>`"),
                })
        };
        let n_alpha = count(next("alphabet count")?, "#alphabet")?;
        let mut alphabet = Vec::with_capacity(n_alpha);
        for _ in 0..n_alpha {
            alphabet.push(next("alphabet symbol")?.1.to_string());
        }
        let n_merges = count(next("merge count")?, "#merges")?;
        let mut merges = Vec::with_capacity(n_merges);
        for _ in 0..n_merges {
            let (ln, l) = next("merge")?;
            let (a, b) = l.split_once(' ').ok_or_else(|| Error::Parse {
                line: ln + 1,
                message: format!("bad merge line `{l}`"),
            })?;
            merges.push((a.to_string(), b.to_string()));
        }
        Ok(Self::from_parts(alphabet, merges))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}
