//! Corpus ingestion: vocabularies, tokenization, marginal statistics, the
//! rule-based toy generator and batch iteration.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::ops::Deref;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Surface string used for the pooled out-of-vocabulary category.
pub const UNK_TOKEN: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VocabKind {
    /// Every token is a single character; sequences render without separators.
    Char,
    /// Whitespace-delimited words.
    Word,
}

/// Bidirectional token/id mapping with the marginal category distribution.
///
/// Real categories occupy ids `0..V`; the absorbing mask state is `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    probs: Vec<f64>,
    index: HashMap<String, TokenId>,
    unk: Option<TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from tokens and (unnormalized) nonnegative weights.
    pub fn new(tokens: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyVocab);
        }
        if tokens.len() != weights.len() {
            return Err(Error::LengthMismatch(format!(
                "{} tokens but {} probabilities",
                tokens.len(),
                weights.len()
            )));
        }
        let mut probs = normalize(&weights)?;
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() <= 1e-12 {
            // already a distribution: keep values bit-exact across file round trips
            probs = weights;
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if tok.is_empty() || tok.contains(['\t', '\n', '\r']) {
                return Err(Error::InvalidConfig(format!("unusable token {tok:?}")));
            }
            if index.insert(tok.clone(), i as TokenId).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate token {tok:?}")));
            }
        }
        let unk = index.get(UNK_TOKEN).copied();
        Ok(Self { tokens, probs, index, unk })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id of the absorbing state, one past the last real category.
    pub fn mask_id(&self) -> TokenId {
        self.tokens.len() as TokenId
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.unk
    }

    pub fn kind(&self) -> VocabKind {
        if self.tokens.iter().all(|t| t.chars().count() == 1) {
            VocabKind::Char
        } else {
            VocabKind::Word
        }
    }

    /// Replaces the marginal with new weights (e.g. counts from a training split).
    pub fn with_probs(&self, weights: &[f64]) -> Result<Self> {
        Self::new(self.tokens.clone(), weights.to_vec())
    }

    /// Renders ids, drawing the mask as `?` (characters) or `<mask>` (words).
    pub fn render(&self, ids: &[TokenId]) -> String {
        let mask = self.mask_id();
        match self.kind() {
            VocabKind::Char => ids
                .iter()
                .map(|&id| if id == mask { "?" } else { self.token(id).unwrap_or("?") })
                .collect(),
            VocabKind::Word => ids
                .iter()
                .map(|&id| if id == mask { "<mask>" } else { self.token(id).unwrap_or("<mask>") })
                .collect::<Vec<_>>()
                .join(" "),
        }
    }

    /// Encodes a sequence of surface tokens; unknown words map to the unk
    /// category when one exists.
    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> Result<TokenSequence> {
        tokens
            .into_iter()
            .map(|t| {
                self.id(t)
                    .or(self.unk)
                    .ok_or_else(|| Error::UnknownToken(t.to_string()))
            })
            .collect::<Result<Vec<_>>>()
            .map(TokenSequence)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| {
                self.token(id).ok_or(Error::UnknownId { id, vocab: self.size() })
            })
            .collect()
    }

    /// One `token<TAB>probability` line per category; line number is the id.
    pub fn write_tsv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for (tok, p) in self.tokens.iter().zip(&self.probs) {
            writeln!(w, "{tok}\t{p}").map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        let mut probs = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.is_empty() {
                continue;
            }
            let (tok, p) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::Parse(format!("{}:{}: missing tab", path.display(), n + 1)))?;
            let p: f64 = p
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("{}:{}: bad probability", path.display(), n + 1)))?;
            tokens.push(tok.to_string());
            probs.push(p);
        }
        Self::new(tokens, probs)
    }
}

/// Validates nonnegativity and rescales to sum to one.
pub fn normalize(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::InvalidProbs("weights must be finite and nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::InvalidProbs("weights sum to zero".into()));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

/// A sequence of real category ids (never the mask).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn checked(ids: Vec<TokenId>, vocab_size: usize) -> Result<Self> {
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::UnknownId { id, vocab: vocab_size });
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }
}

impl Deref for TokenSequence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        Self(ids)
    }
}

fn is_text8_byte(b: u8) -> bool {
    b == b' ' || b.is_ascii_lowercase()
}

/// Character vocabulary over the distinct bytes of a text8-style corpus
/// (lowercase a–z and space). Ids follow byte order, so space is id 0.
pub fn build_char_vocab(text: &[u8]) -> Result<Vocab> {
    if text.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts = [0u64; 256];
    for (position, &byte) in text.iter().enumerate() {
        if !is_text8_byte(byte) {
            return Err(Error::InvalidByte { position, byte });
        }
        counts[byte as usize] += 1;
    }
    let (tokens, weights): (Vec<_>, Vec<_>) = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c > 0)
        .map(|(b, &c)| ((b as u8 as char).to_string(), c as f64))
        .unzip();
    Vocab::new(tokens, weights)
}

pub fn encode_chars(vocab: &Vocab, text: &[u8]) -> Result<TokenSequence> {
    let mut lut = [None; 256];
    for (id, tok) in vocab.tokens().iter().enumerate() {
        if let [b] = tok.as_bytes() {
            lut[*b as usize] = Some(id as TokenId);
        }
    }
    text.iter()
        .enumerate()
        .map(|(position, &byte)| lut[byte as usize].ok_or(Error::InvalidByte { position, byte }))
        .collect::<Result<Vec<_>>>()
        .map(TokenSequence)
}

/// Lowercased whitespace tokenization; punctuation stays attached.
pub fn word_tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split_whitespace().map(str::to_lowercase)
}

/// Keeps the `max_vocab` most frequent words (ties by lexicographic order) and
/// pools the rest, including literal `<unk>` tokens, into a final unk category.
pub fn build_word_vocab(text: &str, max_vocab: usize) -> Result<Vocab> {
    let mut counts: HashMap<String, u64> = HashMap::new();
    let mut total = 0u64;
    for tok in word_tokens(text) {
        *counts.entry(tok).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    let literal_unk = counts.remove(UNK_TOKEN).unwrap_or(0);
    let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let pooled: u64 = ranked.iter().skip(max_vocab).map(|(_, c)| c).sum::<u64>() + literal_unk;
    ranked.truncate(max_vocab);
    let (mut tokens, mut weights): (Vec<_>, Vec<_>) =
        ranked.into_iter().map(|(t, c)| (t, c as f64)).unzip();
    tokens.push(UNK_TOKEN.to_string());
    weights.push(pooled as f64);
    Vocab::new(tokens, weights)
}

pub fn encode_words(vocab: &Vocab, text: &str) -> Result<TokenSequence> {
    let toks: Vec<String> = word_tokens(text).collect();
    vocab.encode(toks.iter().map(String::as_str))
}

/// Empirical category distribution over a collection of sequences.
pub fn token_frequencies<'a, I>(sequences: I, vocab_size: usize) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [TokenId]>,
{
    let mut counts = vec![0u64; vocab_size];
    let mut total = 0u64;
    for seq in sequences {
        for &id in seq {
            let slot = counts
                .get_mut(id as usize)
                .ok_or(Error::UnknownId { id, vocab: vocab_size })?;
            *slot += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// Aligned windows of length `len` every `stride` tokens; partial tails are
/// dropped. Panics if `len` or `stride` is zero.
pub fn windows(ids: &[TokenId], len: usize, stride: usize) -> impl Iterator<Item = &[TokenId]> {
    ids.windows(len).step_by(stride)
}

/// The toy dataset: anchors `a`/`b` at even positions, fills determined by
/// the two neighbouring anchors.
pub mod toy {
    use super::*;

    pub const TOKENS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];
    pub const A: TokenId = 0;
    pub const B: TokenId = 1;
    pub const C: TokenId = 2;
    pub const D: TokenId = 3;
    pub const E: TokenId = 4;
    pub const F: TokenId = 5;

    /// Analytic marginal of long toy sequences. `f` is never produced.
    pub const MARGINAL: [f64; 6] = [0.25, 0.25, 0.25, 0.125, 0.125, 0.0];

    pub fn vocab() -> Vocab {
        Vocab::new(TOKENS.iter().map(|s| s.to_string()).collect(), MARGINAL.to_vec())
            .expect("toy vocabulary is valid")
    }

    /// `a?a→c`, `a?b→c`, `b?a→d`, `b?b→e`. `None` if either side is not an anchor.
    pub fn fill(left: TokenId, right: TokenId) -> Option<TokenId> {
        match (left, right) {
            (A, A) | (A, B) => Some(C),
            (B, A) => Some(D),
            (B, B) => Some(E),
            _ => None,
        }
    }

    pub fn is_anchor(id: TokenId) -> bool {
        id == A || id == B
    }

    pub fn from_anchors(anchors: &[TokenId]) -> Result<TokenSequence> {
        if anchors.len() < 2 {
            return Err(Error::ToyTooShort((anchors.len() * 2).saturating_sub(1)));
        }
        let mut ids = Vec::with_capacity(anchors.len() * 2 - 1);
        for (i, &a) in anchors.iter().enumerate() {
            if !is_anchor(a) {
                return Err(Error::NonToyInput(format!("anchor {a} is not a or b")));
            }
            if i > 0 {
                ids.push(fill(anchors[i - 1], a).expect("both anchors"));
            }
            ids.push(a);
        }
        Ok(TokenSequence(ids))
    }

    pub fn generate<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<TokenSequence> {
        if len.is_multiple_of(2) {
            return Err(Error::EvenLength(len));
        }
        if len < 3 {
            return Err(Error::ToyTooShort(len));
        }
        let anchors: Vec<TokenId> = (0..len / 2 + 1)
            .map(|_| if rng.gen_bool(0.5) { A } else { B })
            .collect();
        from_anchors(&anchors)
    }

    /// Number of positions breaking the toy grammar: non-anchors at even
    /// indices, and fills that disagree with their neighbours.
    pub fn violations(ids: &[TokenId]) -> usize {
        if ids.len().is_multiple_of(2) {
            return ids.len();
        }
        let mut bad = 0;
        for (i, &id) in ids.iter().enumerate() {
            let ok = if i % 2 == 0 {
                is_anchor(id)
            } else {
                fill(ids[i - 1], ids[i + 1]) == Some(id)
            };
            bad += usize::from(!ok);
        }
        bad
    }

    /// Entropy rate in bits per token: one bit per anchor, fills are free.
    pub fn entropy_bits_per_token(len: usize) -> f64 {
        (len / 2 + 1) as f64 / len as f64
    }
}

/// A tokenized corpus: one long stream (text8, Wikitext) or independent
/// fixed sequences (toy data).
#[derive(Debug, Clone, PartialEq)]
pub enum Corpus {
    Stream(Vec<TokenId>),
    Sequences(Vec<TokenSequence>),
}

const CORPUS_MAGIC: &[u8; 4] = b"ODTK";
const CORPUS_VERSION: u32 = 1;

/// Train/valid/test partition of a corpus (90/5/5, in order).
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

impl Corpus {
    pub fn token_count(&self) -> usize {
        match self {
            Corpus::Stream(ids) => ids.len(),
            Corpus::Sequences(seqs) => seqs.iter().map(|s| s.len()).sum(),
        }
    }

    pub fn slices(&self) -> Box<dyn Iterator<Item = &[TokenId]> + '_> {
        match self {
            Corpus::Stream(ids) => Box::new(std::iter::once(ids.as_slice())),
            Corpus::Sequences(seqs) => Box::new(seqs.iter().map(|s| s.ids())),
        }
    }

    pub fn frequencies(&self, vocab_size: usize) -> Result<Vec<f64>> {
        token_frequencies(self.slices(), vocab_size)
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for s in self.slices() {
            if let Some(&id) = s.iter().find(|&&id| id as usize >= vocab_size) {
                return Err(Error::UnknownId { id, vocab: vocab_size });
            }
        }
        Ok(())
    }

    /// Splits 90/5/5 in corpus order; the held-out tail is never sampled for
    /// training.
    pub fn split(&self) -> Splits {
        fn cut<T: Clone>(items: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
            let n = items.len();
            let a = n * 90 / 100;
            let b = n * 95 / 100;
            (items[..a].to_vec(), items[a..b].to_vec(), items[b..].to_vec())
        }
        match self {
            Corpus::Stream(ids) => {
                let (train, valid, test) = cut(ids);
                Splits {
                    train: Corpus::Stream(train),
                    valid: Corpus::Stream(valid),
                    test: Corpus::Stream(test),
                }
            }
            Corpus::Sequences(seqs) => {
                let (train, valid, test) = cut(seqs);
                Splits {
                    train: Corpus::Sequences(train),
                    valid: Corpus::Sequences(valid),
                    test: Corpus::Sequences(test),
                }
            }
        }
    }

    /// Deterministic evaluation set: consecutive non-overlapping crops of a
    /// stream, or the leading sequences of a sequence corpus.
    pub fn eval_sequences(&self, seq_len: usize, max_count: usize) -> Vec<TokenSequence> {
        match self {
            Corpus::Stream(ids) => windows(ids, seq_len, seq_len)
                .take(max_count)
                .map(|w| TokenSequence(w.to_vec()))
                .collect(),
            Corpus::Sequences(seqs) => seqs
                .iter()
                .filter(|s| s.len() >= seq_len)
                .take(max_count)
                .map(|s| TokenSequence(s[..seq_len].to_vec()))
                .collect(),
        }
    }

    /// Hex SHA-256 of the corpus contents, used to log which split was held out.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for s in self.slices() {
            h.update((s.len() as u64).to_le_bytes());
            for id in s {
                h.update(id.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
        put(CORPUS_MAGIC)?;
        put(&CORPUS_VERSION.to_le_bytes())?;
        match self {
            Corpus::Stream(ids) => {
                put(&0u32.to_le_bytes())?;
                put(&(ids.len() as u64).to_le_bytes())?;
                for id in ids {
                    put(&id.to_le_bytes())?;
                }
            }
            Corpus::Sequences(seqs) => {
                put(&1u32.to_le_bytes())?;
                put(&(seqs.len() as u64).to_le_bytes())?;
                for s in seqs {
                    put(&(s.len() as u32).to_le_bytes())?;
                    for id in s.iter() {
                        put(&id.to_le_bytes())?;
                    }
                }
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let mut cur = ByteCursor::new(&bytes);
        if cur.take(4)? != CORPUS_MAGIC {
            return Err(Error::CorruptFile(format!("{}: bad magic", path.display())));
        }
        let version = cur.u32()?;
        if version != CORPUS_VERSION {
            return Err(Error::VersionMismatch(format!(
                "corpus version {version}, expected {CORPUS_VERSION}"
            )));
        }
        let corpus = match cur.u32()? {
            0 => {
                let n = cur.u64()? as usize;
                Corpus::Stream((0..n).map(|_| cur.u32()).collect::<Result<_>>()?)
            }
            1 => {
                let n = cur.u64()? as usize;
                let mut seqs = Vec::with_capacity(n.min(1 << 20));
                for _ in 0..n {
                    let len = cur.u32()? as usize;
                    seqs.push(TokenSequence((0..len).map(|_| cur.u32()).collect::<Result<_>>()?));
                }
                Corpus::Sequences(seqs)
            }
            k => return Err(Error::CorruptFile(format!("unknown corpus kind {k}"))),
        };
        if !cur.is_empty() {
            return Err(Error::CorruptFile(format!("{}: trailing bytes", path.display())));
        }
        Ok(corpus)
    }
}

/// Little-endian reader over a byte slice.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptFile("unexpected end of file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

/// Uniformly positioned contiguous crops, deterministic for a given seed.
#[derive(Debug, Clone)]
pub struct BatchSampler<'a> {
    corpus: &'a Corpus,
    seq_len: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(corpus: &'a Corpus, seq_len: usize, batch: usize, seed: u64) -> Result<Self> {
        let len = match corpus {
            Corpus::Stream(ids) => ids.len(),
            Corpus::Sequences(seqs) => {
                if seqs.is_empty() {
                    0
                } else {
                    seqs.iter().map(|s| s.len()).min().unwrap_or(0)
                }
            }
        };
        if len < seq_len || seq_len == 0 {
            return Err(Error::CorpusTooShort { len, seq_len });
        }
        Ok(Self { corpus, seq_len, batch, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn next_batch(&mut self) -> Vec<TokenSequence> {
        (0..self.batch)
            .map(|_| {
                let src: &[TokenId] = match self.corpus {
                    Corpus::Stream(ids) => ids,
                    Corpus::Sequences(seqs) => &seqs[self.rng.gen_range(0..seqs.len())],
                };
                let start = self.rng.gen_range(0..=src.len() - self.seq_len);
                TokenSequence(src[start..start + self.seq_len].to_vec())
            })
            .collect()
    }
}

impl Iterator for BatchSampler<'_> {
    type Item = Vec<TokenSequence>;

    fn next(&mut self) -> Option<Self::Item> {
        Some(self.next_batch())
    }
}
