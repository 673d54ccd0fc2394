//! Synthetic parallel corpora, vocabularies and corpus files.
//!
//! Source token `sN` always translates to target token `tN`; both get the
//! same id, so gold alignments can be read straight off the ids.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Length ranges are multiplied by this factor in long mode.
pub const LONG_MODE_FACTOR: usize = 6;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid split ratios {0:?}")]
    Ratios([f64; 3]),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Reverse,
    BlockSwap,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Copy => "copy",
            TaskKind::Reverse => "reverse",
            TaskKind::BlockSwap => "block_swap",
        })
    }
}

impl FromStr for TaskKind {
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "copy" => Ok(TaskKind::Copy),
            "reverse" => Ok(TaskKind::Reverse),
            "block_swap" => Ok(TaskKind::BlockSwap),
            other => Err(DataError::Spec(format!("unknown task '{other}' (expected copy, reverse or block_swap)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub min_chunks: usize,
    pub max_chunks: usize,
    pub min_chunk_len: usize,
    pub max_chunk_len: usize,
    pub swap_prob: f64,
    pub long_mode: bool,
    pub seed: u64,
    pub size: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            kind: TaskKind::BlockSwap,
            vocab_size: 200,
            min_chunks: 3,
            max_chunks: 6,
            min_chunk_len: 2,
            max_chunk_len: 4,
            swap_prob: 0.3,
            long_mode: false,
            seed: 1,
            size: 11000,
        }
    }
}

impl TaskSpec {
    /// Chunk length range after the long-mode multiplier.
    pub fn chunk_len_range(&self) -> (usize, usize) {
        let f = if self.long_mode { LONG_MODE_FACTOR } else { 1 };
        (self.min_chunk_len * f, self.max_chunk_len * f)
    }

    pub fn max_source_len(&self) -> usize {
        self.max_chunks * self.chunk_len_range().1
    }

    /// Tokens reserved for displaced blocks in `block_swap`: the top fifth of
    /// the vocabulary. They never occur outside a displaced block, which makes
    /// the reordering decision recoverable from the source alone.
    pub fn cue_vocab(&self) -> usize {
        match self.kind {
            TaskKind::BlockSwap => self.vocab_size / 5,
            _ => 0,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let err = |m: String| Err(DataError::Spec(m));
        if self.min_chunks == 0 || self.min_chunk_len == 0 {
            return err("chunk counts and lengths must be positive".into());
        }
        if self.max_chunks < self.min_chunks || self.max_chunk_len < self.min_chunk_len {
            return err("max must be >= min for chunk counts and lengths".into());
        }
        if !(0.0..=1.0).contains(&self.swap_prob) {
            return err(format!("swap_prob {} outside [0, 1]", self.swap_prob));
        }
        if self.size == 0 {
            return err("corpus size must be positive".into());
        }
        let regular = self.vocab_size - self.cue_vocab();
        if regular < self.max_source_len() {
            return err(format!(
                "vocab of {} regular tokens cannot fill a {}-token sentence without repeats",
                regular,
                self.max_source_len()
            ));
        }
        if self.kind == TaskKind::BlockSwap && self.cue_vocab() < self.chunk_len_range().1 {
            return err(format!(
                "cue vocabulary of {} tokens is smaller than the longest chunk ({})",
                self.cue_vocab(),
                self.chunk_len_range().1
            ));
        }
        Ok(())
    }
}

/// Token strings ↔ ids. Ids 0–3 are reserved; entry `i` of the token list
/// gets id `i + 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self, DataError> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if RESERVED.contains(&t.as_str()) || t.is_empty() || t.contains(char::is_whitespace) {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: format!("invalid vocabulary entry '{t}'"),
                });
            }
            if index.insert(t.clone(), i + NUM_RESERVED).is_some() {
                return Err(DataError::Parse {
                    line: i + 1,
                    message: format!("duplicate vocabulary entry '{t}'"),
                });
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// `prefix1 .. prefixN`.
    pub fn numbered(prefix: &str, n: usize) -> Self {
        Vocab::new((1..=n).map(|i| format!("{prefix}{i}")).collect()).expect("numbered tokens are unique")
    }

    /// Total id range including reserved ids.
    pub fn size(&self) -> usize {
        self.tokens.len() + NUM_RESERVED
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        if let Some(r) = RESERVED.iter().position(|&t| t == token) {
            return Some(r);
        }
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> &str {
        if id < NUM_RESERVED {
            RESERVED[id]
        } else {
            self.tokens.get(id - NUM_RESERVED).map_or(RESERVED[UNK], String::as_str)
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(w, "{t}")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path)?;
        Vocab::new(text.lines().map(str::to_owned).collect())
    }
}

pub fn source_vocab(vocab_size: usize) -> Vocab {
    Vocab::numbered("s", vocab_size)
}

pub fn target_vocab(vocab_size: usize) -> Vocab {
    Vocab::numbered("t", vocab_size)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CorpusPair {
    pub source: Vec<TokenId>,
    /// EOS-terminated.
    pub target: Vec<TokenId>,
}

impl CorpusPair {
    /// Target without the trailing EOS.
    pub fn target_tokens(&self) -> &[TokenId] {
        match self.target.last() {
            Some(&EOS) => &self.target[..self.target.len() - 1],
            _ => &self.target,
        }
    }

    /// Source position of each target token, via the `sN -> tN` bijection.
    /// `None` when a target token has no counterpart in the source.
    pub fn alignment(&self) -> Option<Vec<usize>> {
        self.target_tokens()
            .iter()
            .map(|t| self.source.iter().position(|s| s == t))
            .collect()
    }

    /// True when the gold alignment is strictly increasing.
    pub fn is_monotone(&self) -> bool {
        self.alignment().is_some_and(|a| a.windows(2).all(|w| w[0] < w[1]))
    }
}

/// Draws one sentence as its chunk decomposition; returns the pair and the
/// (1-based) index of the displaced chunk, if any.
fn draw_pair(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> (CorpusPair, Option<usize>) {
    let (lo, hi) = spec.chunk_len_range();
    let k = rng.gen_range(spec.min_chunks..=spec.max_chunks);
    let lens: Vec<usize> = (0..k).map(|_| rng.gen_range(lo..=hi)).collect();
    let swapped = spec.kind == TaskKind::BlockSwap && k >= 2 && rng.gen_bool(spec.swap_prob);
    let j = if swapped { Some(rng.gen_range(2..=k)) } else { None };

    let regular = spec.vocab_size - spec.cue_vocab();
    let total: usize = lens.iter().sum();
    let displaced_len = j.map_or(0, |j| lens[j - 1]);
    let mut plain = sample(rng, regular, total - displaced_len).into_iter();
    let mut cue = sample(rng, spec.cue_vocab().max(1), displaced_len).into_iter();

    let mut chunks: Vec<Vec<TokenId>> = Vec::with_capacity(k);
    for (c, &len) in lens.iter().enumerate() {
        let chunk = if Some(c + 1) == j {
            (0..len).map(|_| NUM_RESERVED + regular + cue.next().unwrap()).collect()
        } else {
            (0..len).map(|_| NUM_RESERVED + plain.next().unwrap()).collect()
        };
        chunks.push(chunk);
    }
    (make_pair(spec.kind, &chunks, j), j)
}

/// Applies the task rule to an explicit chunk decomposition. `displaced` is
/// the 1-based chunk index moved to the front (block_swap only).
pub fn make_pair(kind: TaskKind, chunks: &[Vec<TokenId>], displaced: Option<usize>) -> CorpusPair {
    let source: Vec<TokenId> = chunks.concat();
    // f(sN) = tN shares the id, so translation is the identity on ids
    let mut target: Vec<TokenId> = match kind {
        TaskKind::Copy => source.clone(),
        TaskKind::Reverse => source.iter().rev().copied().collect(),
        TaskKind::BlockSwap => match displaced {
            Some(j) => {
                let mut t = chunks[j - 1].clone();
                for (c, chunk) in chunks.iter().enumerate() {
                    if c + 1 != j {
                        t.extend_from_slice(chunk);
                    }
                }
                t
            }
            None => source.clone(),
        },
    };
    target.push(EOS);
    CorpusPair { source, target }
}

pub fn generate(spec: &TaskSpec) -> Result<Vec<CorpusPair>, DataError> {
    spec.validate()?;
    Ok((0..spec.size)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            draw_pair(spec, &mut rng).0
        })
        .collect())
}

pub fn save_corpus(pairs: &[CorpusPair], src: &Vocab, tgt: &Vocab, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_corpus(pairs, src, tgt, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_corpus(pairs: &[CorpusPair], src: &Vocab, tgt: &Vocab, w: &mut impl Write) -> io::Result<()> {
    for p in pairs {
        let s: Vec<&str> = p.source.iter().map(|&t| src.token(t)).collect();
        let t: Vec<&str> = p.target_tokens().iter().map(|&t| tgt.token(t)).collect();
        writeln!(w, "{}\t{}", s.join(" "), t.join(" "))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCorpus {
    pub pairs: Vec<CorpusPair>,
    /// Tokens absent from the vocabularies, replaced by UNK.
    pub unknown_tokens: usize,
}

pub fn load_corpus(path: &Path, src: &Vocab, tgt: &Vocab) -> Result<LoadedCorpus, DataError> {
    parse_corpus(&fs::read_to_string(path)?, src, tgt)
}

pub fn parse_corpus(text: &str, src: &Vocab, tgt: &Vocab) -> Result<LoadedCorpus, DataError> {
    let mut pairs = Vec::new();
    let mut unknown = 0;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let Some((s, t)) = line.split_once('\t') else {
            return Err(DataError::Parse {
                line: line_no,
                message: "missing tab separator".into(),
            });
        };
        let mut lookup = |v: &Vocab, tok: &str| {
            v.id(tok).unwrap_or_else(|| {
                unknown += 1;
                UNK
            })
        };
        let source: Vec<TokenId> = s.split_whitespace().map(|tok| lookup(src, tok)).collect();
        let mut target: Vec<TokenId> = t.split_whitespace().map(|tok| lookup(tgt, tok)).collect();
        if source.is_empty() || target.is_empty() {
            return Err(DataError::Parse {
                line: line_no,
                message: "empty source or target".into(),
            });
        }
        target.push(EOS);
        pairs.push(CorpusPair { source, target });
    }
    Ok(LoadedCorpus {
        pairs,
        unknown_tokens: unknown,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<CorpusPair>,
    pub dev: Vec<CorpusPair>,
    pub test: Vec<CorpusPair>,
}

/// Seeded disjoint partition. Each part gets `floor(ratio * n)` pairs and the
/// remainder goes to train.
pub fn split(pairs: &[CorpusPair], ratios: [f64; 3], seed: u64) -> Result<Split, DataError> {
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Ratios(ratios));
    }
    let n = pairs.len();
    let dev_n = (ratios[1] * n as f64).floor() as usize;
    let test_n = (ratios[2] * n as f64).floor() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    let take = |idx: &[usize]| idx.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    let train_n = n - dev_n - test_n;
    Ok(Split {
        train: take(&order[..train_n]),
        dev: take(&order[train_n..train_n + dev_n]),
        test: take(&order[train_n + dev_n..]),
    })
}

/// Fixed-size splits taken in generation order (e.g. 10000/500/500).
pub fn split_sizes(pairs: &[CorpusPair], train: usize, dev: usize) -> Split {
    let (a, rest) = pairs.split_at(train.min(pairs.len()));
    let (b, c) = rest.split_at(dev.min(rest.len()));
    Split {
        train: a.to_vec(),
        dev: b.to_vec(),
        test: c.to_vec(),
    }
}

pub fn mean_source_len(pairs: &[CorpusPair]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|p| p.source.len() as f64).sum::<f64>() / pairs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: TaskKind) -> TaskSpec {
        TaskSpec {
            kind,
            size: 300,
            seed: 11,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn copy_rule() {
        let p = make_pair(TaskKind::Copy, &[vec![4, 5, 6]], None);
        // s1 s2 s3 -> t1 t2 t3 EOS
        let tgt = target_vocab(10);
        let words: Vec<&str> = p.target.iter().map(|&t| tgt.token(t)).collect();
        assert_eq!(words, ["t1", "t2", "t3", "</s>"]);
    }

    #[test]
    fn block_swap_rules() {
        let no_swap = make_pair(TaskKind::BlockSwap, &[vec![4, 5], vec![6]], None);
        assert_eq!(no_swap.target, vec![4, 5, 6, EOS]);
        // chunks ([s1,s2],[s3,s4],[s5]), j = 2 -> t3 t4 t1 t2 t5
        let swap = make_pair(TaskKind::BlockSwap, &[vec![4, 5], vec![6, 7], vec![8]], Some(2));
        assert_eq!(swap.target, vec![6, 7, 4, 5, 8, EOS]);
        assert!(!swap.is_monotone());
        assert!(no_swap.is_monotone());
    }

    #[test]
    fn reverse_rule() {
        let p = make_pair(TaskKind::Reverse, &[vec![4, 5], vec![6]], None);
        assert_eq!(p.target, vec![6, 5, 4, EOS]);
    }

    #[test]
    fn generation_is_deterministic_and_bounded() {
        for kind in [TaskKind::Copy, TaskKind::Reverse, TaskKind::BlockSwap] {
            let s = spec(kind);
            let a = generate(&s).unwrap();
            assert_eq!(a, generate(&s).unwrap());
            for p in &a {
                assert!(p.source.len() >= 6 && p.source.len() <= s.max_source_len());
                assert_eq!(p.target.len(), p.source.len() + 1);
                assert!(p.source.iter().all(|&t| t >= NUM_RESERVED && t < s.vocab_size + NUM_RESERVED));
            }
        }
    }

    #[test]
    fn block_swap_displaces_exactly_one_cue_block() {
        let s = spec(TaskKind::BlockSwap);
        let cue_start = NUM_RESERVED + s.vocab_size - s.cue_vocab();
        let pairs = generate(&s).unwrap();
        let mut swaps = 0;
        for p in &pairs {
            let align = p.alignment().unwrap();
            let cue: Vec<bool> = p.source.iter().map(|&t| t >= cue_start).collect();
            let n_cue = cue.iter().filter(|&&c| c).count();
            if p.is_monotone() {
                assert_eq!(n_cue, 0);
                assert_eq!(align, (0..p.source.len()).collect::<Vec<_>>());
            } else {
                swaps += 1;
                // the cue run is contiguous, leads the target, and the rest stays in order
                let first = cue.iter().position(|&c| c).unwrap();
                assert!(cue[first..first + n_cue].iter().all(|&c| c));
                assert!(first > 0);
                let expected: Vec<usize> = (first..first + n_cue).chain((0..first).chain(first + n_cue..p.source.len())).collect();
                assert_eq!(align, expected);
            }
        }
        let rate = swaps as f64 / pairs.len() as f64;
        assert!((rate - 0.3).abs() < 0.08, "swap rate {rate}");
    }

    #[test]
    fn long_mode_scales_lengths() {
        let s = TaskSpec {
            long_mode: true,
            size: 50,
            ..TaskSpec::default()
        };
        let pairs = generate(&s).unwrap();
        assert!(pairs.iter().all(|p| p.source.len() >= 36 && p.source.len() <= 144));
        assert!(mean_source_len(&pairs) > 60.0);
    }

    #[test]
    fn small_vocab_is_rejected() {
        let s = TaskSpec {
            vocab_size: 20,
            ..TaskSpec::default()
        };
        assert!(matches!(generate(&s), Err(DataError::Spec(_))));
        assert!("shuffle".parse::<TaskKind>().is_err());
    }

    #[test]
    fn corpus_file_round_trip_and_errors() {
        let s = spec(TaskKind::BlockSwap);
        let pairs = generate(&s).unwrap();
        let (sv, tv) = (source_vocab(s.vocab_size), target_vocab(s.vocab_size));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.tsv");
        save_corpus(&pairs, &sv, &tv, &path).unwrap();
        let loaded = load_corpus(&path, &sv, &tv).unwrap();
        assert_eq!(loaded.pairs, pairs);
        assert_eq!(loaded.unknown_tokens, 0);

        let bad = parse_corpus("s1 s2\tt1 t2\ns3 s4 t3\n", &sv, &tv).unwrap_err();
        assert!(matches!(bad, DataError::Parse { line: 2, .. }));

        let unk = parse_corpus("s1 zz\tt1 qq\n", &sv, &tv).unwrap();
        assert_eq!(unk.pairs[0].source, vec![4, UNK]);
        assert_eq!(unk.pairs[0].target, vec![4, UNK, EOS]);
        assert_eq!(unk.unknown_tokens, 2);
    }

    #[test]
    fn vocab_file_ids_start_after_reserved() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.txt");
        fs::write(&path, "alpha\nbeta\n").unwrap();
        let v = Vocab::load(&path).unwrap();
        assert_eq!(v.id("alpha"), Some(4));
        assert_eq!(v.id("beta"), Some(5));
        assert_eq!(v.id("</s>"), Some(EOS));
        v.save(&dir.path().join("w.txt")).unwrap();
        assert_eq!(fs::read_to_string(dir.path().join("w.txt")).unwrap(), "alpha\nbeta\n");
    }

    #[test]
    fn split_rules() {
        let pairs = generate(&TaskSpec {
            size: 10,
            ..TaskSpec::default()
        })
        .unwrap();
        let all = split(&pairs, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(all.train.len(), 10);
        let s = split(&pairs, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (8, 1, 1));
        assert_eq!(s, split(&pairs, [0.8, 0.1, 0.1], 3).unwrap());
        let mut seen: Vec<_> = s.train.iter().chain(&s.dev).chain(&s.test).cloned().collect();
        let mut orig = pairs.clone();
        seen.sort_by(|a, b| a.source.cmp(&b.source));
        orig.sort_by(|a, b| a.source.cmp(&b.source));
        assert_eq!(seen, orig);
        // 7 pairs, (0.5, 0.25, 0.25): floors 1 and 1, remainder 5 to train
        let s = split(&pairs[..7], [0.5, 0.25, 0.25], 1).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (5, 1, 1));
        assert!(split(&pairs, [0.5, 0.5, 0.5], 3).is_err());
    }
}
