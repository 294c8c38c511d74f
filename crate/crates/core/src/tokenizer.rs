//! Shared multilingual byte-pair encoding.
//!
//! Words are split on whitespace and spelled as characters, with the last
//! character carrying the end-of-word marker `</w>`. Training greedily merges
//! the most frequent adjacent pair (ties go to the lexicographically smallest
//! pair) until the vocabulary reaches its target size or no pair occurs
//! twice. Language tags are reserved tokens and never take part in merges.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::LanguageId;
use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<s>";
pub const EOS: &str = "</s>";
pub const UNK: &str = "<unk>";
pub const END_OF_WORD: &str = "</w>";

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct BpeVocab {
    specials: Vec<String>,
    symbols: Vec<String>,
    merges: Vec<(String, String)>,
    target_size: usize,
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    merge_table: HashMap<(TokenId, TokenId), (usize, TokenId)>,
}

impl BpeVocab {
    fn assemble(
        specials: Vec<String>,
        symbols: Vec<String>,
        merges: Vec<(String, String)>,
        target_size: usize,
    ) -> Result<Self> {
        let mut id_to_token = Vec::new();
        let mut token_to_id = HashMap::new();
        fn add(
            ids: &mut Vec<String>,
            map: &mut HashMap<String, TokenId>,
            t: &str,
            allow_dup: bool,
        ) -> Result<TokenId> {
            if let Some(&id) = map.get(t) {
                if allow_dup {
                    return Ok(id);
                }
                return Err(Error::format(format!("duplicate token {t:?}")));
            }
            let id = ids.len() as TokenId;
            ids.push(t.to_string());
            map.insert(t.to_string(), id);
            Ok(id)
        }
        for s in specials.iter().chain(&symbols) {
            add(&mut id_to_token, &mut token_to_id, s, false)?;
        }
        let mut merge_table = HashMap::new();
        for (rank, (l, r)) in merges.iter().enumerate() {
            let merged = format!("{l}{r}");
            let id = add(&mut id_to_token, &mut token_to_id, &merged, true)?;
            let (Some(&li), Some(&ri)) = (token_to_id.get(l), token_to_id.get(r)) else {
                return Err(Error::format(format!("merge {l} {r} uses an unknown symbol")));
            };
            merge_table.entry((li, ri)).or_insert((rank, id));
        }
        Ok(BpeVocab {
            specials,
            symbols,
            merges,
            target_size,
            id_to_token,
            token_to_id,
            merge_table,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn pad(&self) -> TokenId {
        0
    }

    pub fn bos(&self) -> TokenId {
        1
    }

    pub fn eos(&self) -> TokenId {
        2
    }

    pub fn unk(&self) -> TokenId {
        3
    }

    /// Number of special tokens (the four control tokens plus language tags).
    pub fn num_specials(&self) -> usize {
        self.specials.len()
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < self.specials.len()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    /// Id of the tag token for `lang`, if the vocabulary reserves it.
    pub fn lang_tag(&self, lang: &LanguageId) -> Option<TokenId> {
        let tag = lang.tag_token();
        self.specials[4..]
            .iter()
            .position(|s| *s == tag)
            .map(|i| (i + 4) as TokenId)
    }

    /// Languages with a reserved tag, in id order.
    pub fn languages(&self) -> Vec<LanguageId> {
        self.specials[4..]
            .iter()
            .filter_map(|s| LanguageId::new(&s[2..s.len() - 2]).ok())
            .collect()
    }

    fn tag_id(&self, word: &str) -> Option<TokenId> {
        if crate::corpus::is_tag_token(word) {
            self.specials[4..]
                .iter()
                .position(|s| s == word)
                .map(|i| (i + 4) as TokenId)
        } else {
            None
        }
    }

    fn encode_word(&self, word: &str, out: &mut Vec<TokenId>) {
        if let Some(id) = self.tag_id(word) {
            out.push(id);
            return;
        }
        let chars: Vec<char> = word.chars().collect();
        let mut ids: Vec<TokenId> = chars
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let sym = if i + 1 == chars.len() {
                    format!("{c}{END_OF_WORD}")
                } else {
                    c.to_string()
                };
                self.id(&sym)
                    .filter(|&id| !self.is_special(id))
                    .unwrap_or(self.unk())
            })
            .collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|w| self.merge_table.get(&(w[0], w[1])).map(|&(rank, _)| (rank, w[0], w[1])))
                .min();
            let Some((_, l, r)) = best else { break };
            let merged = self.merge_table[&(l, r)].1;
            let mut next = Vec::with_capacity(ids.len());
            let mut i = 0;
            while i < ids.len() {
                if i + 1 < ids.len() && ids[i] == l && ids[i + 1] == r {
                    next.push(merged);
                    i += 2;
                } else {
                    next.push(ids[i]);
                    i += 1;
                }
            }
            ids = next;
        }
        out.extend(ids);
    }

    /// Serialises to the line-oriented vocabulary format.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "#version {FORMAT_VERSION}");
        let _ = writeln!(s, "#size {}", self.target_size);
        let _ = writeln!(s, "#specials {}", self.specials.len());
        for t in &self.specials {
            let _ = writeln!(s, "{t}");
        }
        let _ = writeln!(s, "#symbols {}", self.symbols.len());
        for t in &self.symbols {
            let _ = writeln!(s, "{t}");
        }
        let _ = writeln!(s, "#merges {}", self.merges.len());
        for (l, r) in &self.merges {
            let _ = writeln!(s, "{l} {r}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.split_terminator('\n');
        let mut header = |name: &str| -> Result<usize> {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(format!("vocabulary: missing #{name} header")))?;
            line.strip_prefix(&format!("#{name} "))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("vocabulary: bad #{name} header {line:?}")))
        };
        let version = header("version")?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::format(format!("vocabulary: unsupported version {version}")));
        }
        let target_size = header("size")?;
        let mut take = |name: &str| -> Result<Vec<String>> {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(format!("vocabulary: missing #{name} header")))?;
            let n: usize = line
                .strip_prefix(&format!("#{name} "))
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format(format!("vocabulary: bad #{name} header {line:?}")))?;
            (0..n)
                .map(|_| {
                    lines
                        .next()
                        .map(str::to_string)
                        .ok_or_else(|| Error::format(format!("vocabulary: truncated #{name} block")))
                })
                .collect()
        };
        let specials = take("specials")?;
        let symbols = take("symbols")?;
        let merges = take("merges")?
            .into_iter()
            .map(|l| {
                l.split_once(' ')
                    .map(|(a, b)| (a.to_string(), b.to_string()))
                    .ok_or_else(|| Error::format(format!("vocabulary: bad merge line {l:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if specials.len() < 4 || specials[..4] != [PAD, BOS, EOS, UNK] {
            return Err(Error::format("vocabulary: first specials must be <pad> <s> </s> <unk>"));
        }
        let vocab = BpeVocab::assemble(specials, symbols, merges, target_size)?;
        if vocab.to_text() != text {
            return Err(Error::format("vocabulary: file is not in canonical form"));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::from(e).context(path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(path.display()))?;
        BpeVocab::from_text(&text).map_err(|e| e.context(path.display()))
    }

    /// SHA-256 of the serialised vocabulary.
    pub fn fingerprint(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

/// Trains a vocabulary of at most `target_size` tokens over all `corpora`.
///
/// `languages` become reserved tag tokens directly after the four control
/// tokens.
pub fn bpe_train<C, S>(corpora: C, target_size: usize, languages: &[LanguageId]) -> Result<BpeVocab>
where
    C: IntoIterator,
    C::Item: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut specials: Vec<String> = [PAD, BOS, EOS, UNK].iter().map(|s| s.to_string()).collect();
    for l in languages {
        let tag = l.tag_token();
        if !specials.contains(&tag) {
            specials.push(tag);
        }
    }

    let mut word_counts: BTreeMap<String, u64> = BTreeMap::new();
    for stream in corpora {
        for line in stream {
            for w in line.as_ref().split_whitespace() {
                if crate::corpus::is_tag_token(w) {
                    continue;
                }
                *word_counts.entry(w.to_string()).or_insert(0) += 1;
            }
        }
    }
    if word_counts.is_empty() {
        return Err(Error::invalid("bpe_train: corpus is empty"));
    }

    // Symbols are interned as indices into `names` during training.
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, u32> = HashMap::new();
    let mut intern = |s: String, names: &mut Vec<String>| -> u32 {
        *index.entry(s.clone()).or_insert_with(|| {
            names.push(s);
            (names.len() - 1) as u32
        })
    };
    let mut words: Vec<(Vec<u32>, u64)> = Vec::with_capacity(word_counts.len());
    for (w, &n) in &word_counts {
        let chars: Vec<char> = w.chars().collect();
        let syms = chars
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let s = if i + 1 == chars.len() {
                    format!("{c}{END_OF_WORD}")
                } else {
                    c.to_string()
                };
                intern(s, &mut names)
            })
            .collect();
        words.push((syms, n));
    }
    let mut symbols = names.clone();
    symbols.sort();

    let base = specials.len() + symbols.len();
    if target_size < base {
        return Err(Error::invalid(format!(
            "bpe_train: target size {target_size} is below the {} specials plus {} initial symbols",
            specials.len(),
            symbols.len()
        )));
    }

    let mut vocab_tokens: std::collections::HashSet<String> =
        specials.iter().chain(symbols.iter()).cloned().collect();
    let mut merges: Vec<(String, String)> = Vec::new();
    let mut size = base;
    let mut banned: std::collections::HashSet<(u32, u32)> = std::collections::HashSet::new();
    while size < target_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (syms, n) in &words {
            for w in syms.windows(2) {
                *pairs.entry((w[0], w[1])).or_insert(0) += n;
            }
        }
        let best = pairs
            .iter()
            .filter(|(p, &c)| c >= 2 && !banned.contains(p))
            .max_by(|(pa, ca), (pb, cb)| {
                ca.cmp(cb).then_with(|| {
                    let ka = (&names[pa.0 as usize], &names[pa.1 as usize]);
                    let kb = (&names[pb.0 as usize], &names[pb.1 as usize]);
                    kb.cmp(&ka)
                })
            })
            .map(|(p, _)| *p);
        let Some((l, r)) = best else { break };
        let merged = format!("{}{}", names[l as usize], names[r as usize]);
        if specials.contains(&merged) {
            banned.insert((l, r));
            continue;
        }
        let m = intern(merged.clone(), &mut names);
        for (syms, _) in &mut words {
            if syms.len() < 2 {
                continue;
            }
            let mut out = Vec::with_capacity(syms.len());
            let mut i = 0;
            while i < syms.len() {
                if i + 1 < syms.len() && syms[i] == l && syms[i + 1] == r {
                    out.push(m);
                    i += 2;
                } else {
                    out.push(syms[i]);
                    i += 1;
                }
            }
            *syms = out;
        }
        merges.push((names[l as usize].clone(), names[r as usize].clone()));
        if vocab_tokens.insert(merged) {
            size += 1;
        }
    }
    BpeVocab::assemble(specials, symbols, merges, target_size)
}

/// Segments `sentence` into token ids.
pub fn bpe_encode(vocab: &BpeVocab, sentence: &str) -> Vec<TokenId> {
    let mut out = Vec::new();
    for w in sentence.split_whitespace() {
        vocab.encode_word(w, &mut out);
    }
    out
}

/// Joins tokens back into whitespace-normalised text. Control tokens are
/// dropped; language tags are kept as words.
pub fn bpe_decode(vocab: &BpeVocab, ids: &[TokenId]) -> Result<String> {
    let mut words: Vec<String> = Vec::new();
    let mut current = String::new();
    for &id in ids {
        let tok = vocab
            .token(id)
            .ok_or_else(|| Error::invalid(format!("bpe_decode: token id {id} is out of range")))?;
        if vocab.is_special(id) {
            if id >= 4 {
                if !current.is_empty() {
                    words.push(std::mem::take(&mut current));
                }
                words.push(tok.to_string());
            }
            continue;
        }
        match tok.strip_suffix(END_OF_WORD) {
            Some(stem) => {
                current.push_str(stem);
                words.push(std::mem::take(&mut current));
            }
            None => current.push_str(tok),
        }
    }
    if !current.is_empty() {
        words.push(current);
    }
    Ok(words.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn langs() -> Vec<LanguageId> {
        vec![LanguageId::new("id").unwrap(), LanguageId::new("jv").unwrap()]
    }

    #[test]
    fn first_merge_is_most_frequent_pair() {
        let v = bpe_train([["aa aa aa"]], 100, &langs()).unwrap();
        // Words "aa" x3 spell as (a, a</w>); that is the only pair.
        assert_eq!(v.merges()[0], ("a".to_string(), "a</w>".to_string()));
        assert_eq!(bpe_encode(&v, "aa"), vec![v.id("aa</w>").unwrap()]);
    }

    #[test]
    fn ties_break_lexicographically() {
        // "ab" and "cd" each occur twice: (a, b</w>) < (c, d</w>).
        let v = bpe_train([["ab cd ab cd"]], 100, &[]).unwrap();
        assert_eq!(v.merges()[0], ("a".to_string(), "b</w>".to_string()));
        assert_eq!(v.merges()[1], ("c".to_string(), "d</w>".to_string()));
    }

    #[test]
    fn minimal_target_gives_character_vocab() {
        let text = ["hello world"];
        let full = bpe_train([text], 1000, &langs()).unwrap();
        let base = full.num_specials() + full.symbols.len();
        let v = bpe_train([text], base, &langs()).unwrap();
        assert!(v.merges().is_empty());
        assert_eq!(v.len(), base);
        assert!(bpe_train([text], base - 1, &langs()).is_err());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let empty: [[&str; 0]; 1] = [[]];
        assert!(matches!(bpe_train(empty, 50, &[]), Err(Error::InvalidArgument(_))));
        assert!(bpe_train([["   "]], 50, &[]).is_err());
    }

    #[test]
    fn corpus_order_does_not_matter() {
        let a = ["the cat sat", "on the mat"];
        let b = ["a bat ate", "the hat"];
        let v1 = bpe_train([&a[..], &b[..]], 60, &langs()).unwrap();
        let v2 = bpe_train([&b[..], &a[..]], 60, &langs()).unwrap();
        assert_eq!(v1.to_text(), v2.to_text());
    }

    #[test]
    fn specials_and_tags() {
        let v = bpe_train([["ka lu __id__ ka"]], 50, &langs()).unwrap();
        assert_eq!(v.token(0), Some(PAD));
        assert_eq!(v.token(3), Some(UNK));
        let tag = v.lang_tag(&LanguageId::new("id").unwrap()).unwrap();
        assert_eq!(tag, 4);
        let ids = bpe_encode(&v, "__id__ ka lu");
        assert_eq!(ids[0], tag);
        assert_eq!(ids.iter().filter(|&&i| i == tag).count(), 1);
        assert!(bpe_encode(&v, "").is_empty());
        // Unknown characters map to <unk>.
        assert!(bpe_encode(&v, "kq").contains(&v.unk()));
    }

    #[test]
    fn decode_contract() {
        let v = bpe_train([["ka lu"]], 50, &langs()).unwrap();
        assert_eq!(bpe_decode(&v, &[0, 1, 2, 3]).unwrap(), "");
        let tagged = bpe_encode(&v, "__jv__ ka lu");
        assert_eq!(bpe_decode(&v, &tagged).unwrap(), "__jv__ ka lu");
        let err = bpe_decode(&v, &[9999]).unwrap_err();
        assert!(err.to_string().contains("9999"));
    }

    #[test]
    fn file_roundtrip_is_exact() {
        let v = bpe_train([["lorem ipsum dolor sit amet", "lorem ipsum"]], 40, &langs()).unwrap();
        let text = v.to_text();
        assert!(text.starts_with("#version 1\n#size 40\n"));
        let back = BpeVocab::from_text(&text).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.to_text(), text);
        assert!(BpeVocab::from_text(&text.replace("#version 1", "#version 2")).is_err());
        assert!(BpeVocab::from_text(&text[..text.len() - 3]).is_err());
    }

    fn sentence() -> impl Strategy<Value = String> {
        prop::collection::vec("[abcde]{1,6}", 1..6).prop_map(|w| w.join(" "))
    }

    proptest! {
        #[test]
        fn roundtrip(corpus in prop::collection::vec(sentence(), 1..8), probe in sentence(), size in 30usize..120) {
            let mut all = corpus.clone();
            all.push(probe.clone());
            let v = bpe_train([&all], size.max(9 + 4 + 5), &[]).unwrap();
            let ids = bpe_encode(&v, &probe);
            prop_assert_eq!(bpe_decode(&v, &ids).unwrap(), probe);
        }

        #[test]
        fn larger_vocab_never_lengthens(corpus in prop::collection::vec(sentence(), 1..8), small in 20usize..60, extra in 0usize..60) {
            let v1 = bpe_train([&corpus], small.max(20), &[]);
            let v2 = bpe_train([&corpus], small.max(20) + extra, &[]);
            if let (Ok(v1), Ok(v2)) = (v1, v2) {
                for s in &corpus {
                    prop_assert!(bpe_encode(&v2, s).len() <= bpe_encode(&v1, s).len());
                }
            }
        }
    }
}
