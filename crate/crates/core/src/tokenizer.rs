//! Byte-level BPE tokenizer with a reserved special-token region.
//!
//! Ids `0..256` are raw bytes, `256..base_size` are merges in training order
//! and `base_size..extended_size` are special tokens. Because every byte has
//! an id there is no unknown-token path: any input encodes, and decoding is
//! the exact inverse of encoding.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub const BYTE_ALPHABET: usize = 256;

pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const INST_OPEN: &str = "[INST]";
pub const INST_CLOSE: &str = "[/INST]";
pub const IMAGE: &str = "<image>";
pub const PAD: &str = "<pad>";

/// Special tokens every model vocabulary carries.
pub const CHAT_SPECIALS: [&str; 6] = [BOS, EOS, INST_OPEN, INST_CLOSE, IMAGE, PAD];

/// Published vocabulary sizes of third-party tokenizers. Reference metadata
/// only; nothing in the crate computes with these.
pub const REFERENCE_VOCAB_SIZES: [(&str, usize); 6] = [
    ("GPT-2, GPT-3 r50k-base", 50_257),
    ("GPT-3.5, GPT-4 cl100k-base", 100_256),
    ("GPT-4o o200k-base", 199_997),
    ("LLaMA-1, LLaMA-2", 32_000),
    ("LLaMA-3", 128_256),
    ("Mistral", 32_000),
];

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Vec<u8>>,
    token_to_id: HashMap<Vec<u8>, u32>,
    merges: Vec<(u32, u32)>,
    merge_rank: HashMap<(u32, u32), u32>,
    specials: Vec<(String, u32)>,
    base_size: usize,
    /// Set when training stopped before reaching the requested size.
    truncated: bool,
}

/// Token ids plus the byte span each token covers in the source.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Encoding {
    pub ids: Vec<u32>,
    pub offsets: Vec<(usize, usize)>,
}

/// Outcome of [`Vocabulary::add_special_tokens`]: the caller must grow any
/// embedding table from `old_size` to `new_size` rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbeddingResize {
    pub old_size: usize,
    pub new_size: usize,
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenizationReport {
    pub text: String,
    pub count: usize,
    pub tokens: Vec<String>,
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ByteClass {
    Letter,
    Digit,
    Space,
    Other,
}

fn class_of(b: u8) -> ByteClass {
    match b {
        b'a'..=b'z' | b'A'..=b'Z' | 0x80..=0xFF => ByteClass::Letter,
        b'0'..=b'9' => ByteClass::Digit,
        b' ' | b'\t' | b'\n' | b'\r' | 0x0B | 0x0C => ByteClass::Space,
        _ => ByteClass::Other,
    }
}

/// Split bytes into pre-tokenization chunks: an optional single leading space
/// followed by a run of letters, digits or punctuation; leftover whitespace
/// forms its own runs. Merges never cross chunk boundaries.
pub fn pretokenize(bytes: &[u8]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let start = i;
        let c = class_of(bytes[i]);
        if c == ByteClass::Space {
            let next = bytes.get(i + 1).map(|&b| class_of(b));
            if bytes[i] == b' ' && matches!(next, Some(n) if n != ByteClass::Space) {
                i += 1;
                let run = class_of(bytes[i]);
                while i < bytes.len() && class_of(bytes[i]) == run {
                    i += 1;
                }
            } else {
                // Whitespace run, leaving a final space to prefix the next word.
                while i < bytes.len() && class_of(bytes[i]) == ByteClass::Space {
                    if bytes[i] == b' '
                        && i > start
                        && matches!(bytes.get(i + 1).map(|&b| class_of(b)), Some(n) if n != ByteClass::Space)
                    {
                        break;
                    }
                    i += 1;
                }
            }
        } else {
            while i < bytes.len() && class_of(bytes[i]) == c {
                i += 1;
            }
        }
        out.push((start, i));
    }
    out
}

impl Vocabulary {
    /// The 256-entry byte alphabet with no merges.
    pub fn bytes_only() -> Self {
        let tokens: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        let token_to_id = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            token_to_id,
            merges: Vec::new(),
            merge_rank: HashMap::new(),
            specials: Vec::new(),
            base_size: BYTE_ALPHABET,
            truncated: false,
        }
    }

    /// Train merges greedily by pair frequency until `target_vocab_size` is
    /// reached or no pair occurs twice. Ties go to the lexicographically
    /// smallest `(left bytes, right bytes)`.
    pub fn train_bpe(corpus: &str, target_vocab_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(invalid("BPE corpus is empty"));
        }
        if target_vocab_size < BYTE_ALPHABET {
            return Err(invalid(format!(
                "target vocabulary size {target_vocab_size} is below the byte alphabet ({BYTE_ALPHABET})"
            )));
        }
        let mut vocab = Self::bytes_only();
        let bytes = corpus.as_bytes();

        let mut counts: HashMap<&[u8], usize> = HashMap::new();
        for (s, e) in pretokenize(bytes) {
            *counts.entry(&bytes[s..e]).or_default() += 1;
        }
        let mut words: Vec<(Vec<u32>, usize)> = counts
            .into_iter()
            .map(|(w, c)| (w.iter().map(|&b| b as u32).collect(), c))
            .collect();
        words.sort_unstable();

        while vocab.tokens.len() < target_vocab_size {
            let mut pairs: HashMap<(u32, u32), usize> = HashMap::new();
            for (w, c) in &words {
                for p in w.windows(2) {
                    *pairs.entry((p[0], p[1])).or_default() += c;
                }
            }
            let best = pairs
                .iter()
                .filter(|(_, &c)| c >= 2)
                .max_by(|(pa, ca), (pb, cb)| {
                    ca.cmp(cb).then_with(|| {
                        let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                        let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                        kb.cmp(&ka)
                    })
                })
                .map(|(&p, _)| p);
            let Some((l, r)) = best else {
                vocab.truncated = true;
                log::warn!(
                    "BPE training stopped at {} tokens (requested {target_vocab_size}): no pair repeats",
                    vocab.tokens.len()
                );
                break;
            };
            let new_id = vocab.push_merge(l, r);
            for (w, _) in words.iter_mut() {
                if w.len() < 2 {
                    continue;
                }
                let mut out = Vec::with_capacity(w.len());
                let mut i = 0;
                while i < w.len() {
                    if i + 1 < w.len() && w[i] == l && w[i + 1] == r {
                        out.push(new_id);
                        i += 2;
                    } else {
                        out.push(w[i]);
                        i += 1;
                    }
                }
                *w = out;
            }
        }
        vocab.base_size = vocab.tokens.len();
        Ok(vocab)
    }

    fn push_merge(&mut self, l: u32, r: u32) -> u32 {
        let id = self.tokens.len() as u32;
        let mut bytes = self.tokens[l as usize].clone();
        bytes.extend_from_slice(&self.tokens[r as usize]);
        // A byte string reachable by two merge paths keeps its first id.
        self.token_to_id.entry(bytes.clone()).or_insert(id);
        self.tokens.push(bytes);
        self.merge_rank.insert((l, r), self.merges.len() as u32);
        self.merges.push((l, r));
        id
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn extended_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    pub fn specials(&self) -> &[(String, u32)] {
        &self.specials
    }

    pub fn special_id(&self, name: &str) -> Option<u32> {
        self.specials
            .iter()
            .find(|(n, _)| n == name)
            .map(|&(_, id)| id)
    }

    /// Id of a special token that must exist.
    pub fn require_special(&self, name: &str) -> Result<u32> {
        self.special_id(name)
            .ok_or_else(|| invalid(format!("vocabulary lacks special token {name:?}")))
    }

    pub fn token_bytes(&self, id: u32) -> Result<&[u8]> {
        self.tokens
            .get(id as usize)
            .map(|t| t.as_slice())
            .ok_or(Error::UnknownTokenId(id))
    }

    /// Append one reserved id per name after the current vocabulary.
    pub fn add_special_tokens(&mut self, names: &[&str]) -> Result<EmbeddingResize> {
        if names.is_empty() {
            return Err(invalid("no special tokens given"));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(invalid("special token names must be non-empty"));
            }
            if self.special_id(n).is_some() || names[..i].contains(n) {
                return Err(Error::DuplicateSpecial(n.to_string()));
            }
        }
        let old_size = self.tokens.len();
        let mut ids = Vec::with_capacity(names.len());
        for n in names {
            let id = self.tokens.len() as u32;
            self.tokens.push(n.as_bytes().to_vec());
            self.specials.push((n.to_string(), id));
            ids.push(id);
        }
        Ok(EmbeddingResize {
            old_size,
            new_size: self.tokens.len(),
            ids,
        })
    }

    pub fn encode(&self, text: &str) -> Encoding {
        self.encode_bytes(text.as_bytes())
    }

    /// Special-token strings are matched first (longest match wins at the
    /// earliest position); the remaining spans go through BPE.
    pub fn encode_bytes(&self, bytes: &[u8]) -> Encoding {
        let mut enc = Encoding::default();
        let mut pos = 0;
        while pos < bytes.len() {
            match self.next_special(bytes, pos) {
                Some((at, len, id)) => {
                    self.encode_plain(bytes, pos, at, &mut enc);
                    enc.ids.push(id);
                    enc.offsets.push((at, at + len));
                    pos = at + len;
                }
                None => {
                    self.encode_plain(bytes, pos, bytes.len(), &mut enc);
                    pos = bytes.len();
                }
            }
        }
        enc
    }

    fn next_special(&self, bytes: &[u8], from: usize) -> Option<(usize, usize, u32)> {
        if self.specials.is_empty() {
            return None;
        }
        for at in from..bytes.len() {
            let best = self
                .specials
                .iter()
                .filter(|(n, _)| bytes[at..].starts_with(n.as_bytes()))
                .max_by_key(|(n, _)| n.len());
            if let Some((n, id)) = best {
                return Some((at, n.len(), *id));
            }
        }
        None
    }

    fn encode_plain(&self, bytes: &[u8], start: usize, end: usize, enc: &mut Encoding) {
        let seg = &bytes[start..end];
        for (s, e) in pretokenize(seg) {
            let mut syms: Vec<(u32, usize, usize)> = (s..e)
                .map(|i| (seg[i] as u32, start + i, start + i + 1))
                .collect();
            loop {
                let best = syms
                    .windows(2)
                    .enumerate()
                    .filter_map(|(i, w)| self.merge_rank.get(&(w[0].0, w[1].0)).map(|&r| (r, i)))
                    .min();
                let Some((rank, _)) = best else { break };
                let (l, r) = self.merges[rank as usize];
                let new_id = 256 + rank;
                let mut out = Vec::with_capacity(syms.len());
                let mut i = 0;
                while i < syms.len() {
                    if i + 1 < syms.len() && syms[i].0 == l && syms[i + 1].0 == r {
                        out.push((new_id, syms[i].1, syms[i + 1].2));
                        i += 2;
                    } else {
                        out.push(syms[i]);
                        i += 1;
                    }
                }
                syms = out;
            }
            for (id, a, b) in syms {
                enc.ids.push(id);
                enc.offsets.push((a, b));
            }
        }
    }

    pub fn decode_bytes(&self, ids: &[u32]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for &id in ids {
            out.extend_from_slice(self.token_bytes(id)?);
        }
        Ok(out)
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        String::from_utf8(bytes).map_err(|e| invalid(format!("decoded bytes are not UTF-8: {e}")))
    }

    /// As [`decode`](Self::decode), with invalid byte sequences replaced by
    /// U+FFFD. Generated text may stop in the middle of a character.
    pub fn decode_lossy(&self, ids: &[u32]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_bytes(ids)?).into_owned())
    }

    /// Token count, per-token strings and ids for `text`.
    pub fn tokenization_report(&self, text: &str) -> TokenizationReport {
        let enc = self.encode(text);
        let tokens = enc
            .offsets
            .iter()
            .map(|&(a, b)| String::from_utf8_lossy(&text.as_bytes()[a..b]).into_owned())
            .collect();
        TokenizationReport {
            text: text.to_string(),
            count: enc.ids.len(),
            tokens,
            ids: enc.ids,
        }
    }

    pub fn to_file(&self) -> VocabularyFile {
        VocabularyFile {
            merges: self.merges.iter().map(|&(l, r)| [l, r]).collect(),
            tokens: self
                .tokens
                .iter()
                .map(|t| String::from_utf8_lossy(t).into_owned())
                .collect(),
            special_tokens: self
                .specials
                .iter()
                .map(|(n, id)| SpecialEntry {
                    name: n.clone(),
                    id: *id,
                })
                .collect(),
            sizes: Sizes {
                base_size: self.base_size,
                extended_size: self.tokens.len(),
                truncated: self.truncated,
            },
        }
    }

    /// Rebuild from the file form; merges are authoritative and every size
    /// and id is validated against them.
    pub fn from_file(file: &VocabularyFile) -> Result<Self> {
        let mut v = Self::bytes_only();
        for (i, &[l, r]) in file.merges.iter().enumerate() {
            let known = v.tokens.len() as u32;
            if l >= known || r >= known {
                return Err(invalid(format!("merge {i} references unknown token ({l}, {r})")));
            }
            v.push_merge(l, r);
        }
        v.base_size = v.tokens.len();
        v.truncated = file.sizes.truncated;
        if v.base_size != file.sizes.base_size {
            return Err(invalid(format!(
                "vocabulary file declares base size {} but has {} tokens before specials",
                file.sizes.base_size, v.base_size
            )));
        }
        for (i, s) in file.special_tokens.iter().enumerate() {
            if s.id as usize != v.base_size + i {
                return Err(invalid(format!("special token {:?} has non-dense id {}", s.name, s.id)));
            }
        }
        if !file.special_tokens.is_empty() {
            let names: Vec<&str> = file.special_tokens.iter().map(|s| s.name.as_str()).collect();
            v.add_special_tokens(&names)?;
        }
        if v.tokens.len() != file.sizes.extended_size {
            return Err(invalid("vocabulary file extended size does not match its contents"));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: VocabularyFile = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_file(&file)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabularyFile {
    pub merges: Vec<[u32; 2]>,
    /// Informational; rebuilt from `merges` on load.
    pub tokens: Vec<String>,
    pub special_tokens: Vec<SpecialEntry>,
    pub sizes: Sizes,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecialEntry {
    pub name: String,
    pub id: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sizes {
    pub base_size: usize,
    pub extended_size: usize,
    pub truncated: bool,
}

/// The corpus shipped with the crate for tokenizer training and language
/// model pretraining.
pub const FIXTURE_CORPUS: &str = include_str!("../fixtures/corpus.txt");

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy() -> Vocabulary {
        Vocabulary::train_bpe(
            "the tank and the truck and the target near the tank; the track 123 4567",
            300,
        )
        .unwrap()
    }

    #[test]
    fn aaaa_gains_aa() {
        let v = Vocabulary::train_bpe("aaaa", 257).unwrap();
        assert_eq!(v.extended_size(), 257);
        assert_eq!(v.merges(), &[(b'a' as u32, b'a' as u32)]);
        assert_eq!(v.token_bytes(256).unwrap(), b"aa");
    }

    #[test]
    fn target_256_is_bytes_only() {
        let v = Vocabulary::train_bpe("anything at all", 256).unwrap();
        assert_eq!(v.extended_size(), 256);
        assert!(v.merges().is_empty());
    }

    #[test]
    fn small_target_or_empty_corpus_rejected() {
        assert!(Vocabulary::train_bpe("abc", 255).is_err());
        assert!(Vocabulary::train_bpe("", 300).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let a = toy();
        let b = toy();
        assert_eq!(a.merges(), b.merges());
    }

    #[test]
    fn exhausted_corpus_sets_warning() {
        let v = Vocabulary::train_bpe("abab", 10_000).unwrap();
        assert!(v.is_truncated());
        assert!(v.extended_size() < 10_000);
    }

    #[test]
    fn empty_text_encodes_to_nothing() {
        assert!(toy().encode("").ids.is_empty());
        assert_eq!(toy().tokenization_report("").count, 0);
    }

    #[test]
    fn unknown_id_rejected() {
        let v = toy();
        let bad = v.extended_size() as u32;
        assert!(matches!(v.decode(&[bad]), Err(Error::UnknownTokenId(id)) if id == bad));
    }

    #[test]
    fn partial_character_decodes_lossily() {
        let v = toy();
        let lead = (0..v.extended_size() as u32).find(|&i| v.decode_bytes(&[i]).unwrap() == [0xC3]).unwrap();
        assert!(v.decode(&[lead]).is_err());
        assert_eq!(v.decode_lossy(&[lead]).unwrap(), "\u{FFFD}");
    }

    #[test]
    fn special_token_becomes_single_id() {
        let mut v = toy();
        assert!(v.encode("SLICY").ids.len() >= 2);
        let before = v.extended_size();
        let resize = v.add_special_tokens(&["SLICY"]).unwrap();
        assert_eq!(resize.old_size, before);
        assert_eq!(resize.new_size, before + 1);
        assert_eq!(v.encode("SLICY").ids, vec![before as u32]);
        // Neighbours are not absorbed.
        let enc = v.encode("aSLICYb");
        assert_eq!(enc.ids.len(), 3);
        assert_eq!(v.decode(&enc.ids).unwrap(), "aSLICYb");
    }

    #[test]
    fn add_special_errors() {
        let mut v = toy();
        assert!(v.add_special_tokens(&[]).is_err());
        v.add_special_tokens(&["<x>"]).unwrap();
        assert!(matches!(v.add_special_tokens(&["<x>"]), Err(Error::DuplicateSpecial(_))));
        assert!(matches!(v.add_special_tokens(&["<y>", "<y>"]), Err(Error::DuplicateSpecial(_))));
    }

    #[test]
    fn offsets_cover_source() {
        let mut v = toy();
        v.add_special_tokens(&["[INST]"]).unwrap();
        let text = "[INST] the ZSU-23-4 tank [INST]";
        let enc = v.encode(text);
        let mut cursor = 0;
        for &(a, b) in &enc.offsets {
            assert_eq!(a, cursor);
            assert!(b > a);
            cursor = b;
        }
        assert_eq!(cursor, text.len());
    }

    #[test]
    fn file_round_trip() {
        let mut v = toy();
        v.add_special_tokens(&["<s>", "</s>"]).unwrap();
        let back = Vocabulary::from_file(&v.to_file()).unwrap();
        assert_eq!(back.merges(), v.merges());
        assert_eq!(back.specials(), v.specials());
        let text = "<s>the tank</s>";
        assert_eq!(back.encode(text), v.encode(text));
    }

    #[test]
    fn corrupt_file_rejected() {
        let mut f = toy().to_file();
        f.merges.push([9999, 1]);
        assert!(Vocabulary::from_file(&f).is_err());
    }

    proptest! {
        #[test]
        fn byte_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let v = toy();
            let enc = v.encode_bytes(&bytes);
            prop_assert_eq!(v.decode_bytes(&enc.ids).unwrap(), bytes);
        }

        #[test]
        fn text_round_trip(s in "\\PC{0,40}") {
            let mut v = toy();
            v.add_special_tokens(&["ZSU-23-4", "<s>"]).unwrap();
            prop_assert_eq!(v.decode(&v.encode(&s).ids).unwrap(), s);
        }
    }
}
