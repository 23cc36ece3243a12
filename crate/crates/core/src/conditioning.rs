//! Tokenization, condition construction and prompt alignment.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::frames::Image;
use crate::scalar::Scalar;

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;
pub const SUBJECT_SLOT: TokenId = 3;

pub const DEFAULT_MAX_TOKENS: usize = 16;

/// Grammatical role of a vocabulary word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordClass {
    Special,
    Function,
    Shape,
    Color,
    Texture,
    Motion,
    Background,
    /// Non-shape subject noun (car, ...).
    Noun,
    Modifier,
}

impl WordClass {
    /// Words that can name an editable subject.
    pub fn is_subject_noun(self) -> bool {
        matches!(self, WordClass::Shape | WordClass::Noun)
    }
}

const SPECIALS: [&str; 4] = ["<bos>", "<eos>", "<pad>", "<subject>"];

const WORDS: &[(&str, WordClass)] = &[
    ("a", WordClass::Function),
    ("an", WordClass::Function),
    ("the", WordClass::Function),
    ("on", WordClass::Function),
    ("with", WordClass::Function),
    ("and", WordClass::Function),
    ("moving", WordClass::Function),
    ("square", WordClass::Shape),
    ("circle", WordClass::Shape),
    ("triangle", WordClass::Shape),
    ("red", WordClass::Color),
    ("blue", WordClass::Color),
    ("green", WordClass::Color),
    ("yellow", WordClass::Color),
    ("black", WordClass::Color),
    ("solid", WordClass::Texture),
    ("striped", WordClass::Texture),
    ("left-to-right", WordClass::Motion),
    ("up-to-down", WordClass::Motion),
    ("diagonal", WordClass::Motion),
    ("plain", WordClass::Background),
    ("gradient", WordClass::Background),
    ("checker", WordClass::Background),
    ("road", WordClass::Background),
    ("car", WordClass::Noun),
    ("jeep", WordClass::Modifier),
    ("vintage", WordClass::Modifier),
    ("top", WordClass::Noun),
];

/// Closed word list of the synthetic domain. Ids are line numbers of the
/// serialized form; ids 0-3 are the special tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    classes: Vec<WordClass>,
    index: BTreeMap<String, TokenId>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut classes = vec![WordClass::Special; SPECIALS.len()];
        for (w, c) in WORDS {
            words.push(w.to_string());
            classes.push(*c);
        }
        Self::build(words, classes).expect("built-in vocabulary is valid")
    }
}

impl Vocabulary {
    fn build(words: Vec<String>, classes: Vec<WordClass>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::Param(format!("duplicate vocabulary entry `{w}`")));
            }
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if words.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Param(format!("vocabulary line {i} must be `{s}`")));
            }
        }
        Ok(Self { words, classes, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<TokenId> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: TokenId) -> &str {
        &self.words[id as usize]
    }

    pub fn class(&self, id: TokenId) -> WordClass {
        self.classes[id as usize]
    }

    /// Ids of every word in `class`, in id order.
    pub fn of_class(&self, class: WordClass) -> Vec<TokenId> {
        (0..self.len() as TokenId).filter(|&i| self.class(i) == class).collect()
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for w in &self.words {
            s.push_str(w);
            s.push('\n');
        }
        s
    }

    /// Parses the line format. Words unknown to the built-in list are
    /// classed as nouns.
    pub fn from_text(text: &str) -> Result<Self> {
        let builtin = Vocabulary::default();
        let words: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if let Some(i) = words
            .iter()
            .position(|w| w.is_empty() || w.contains(char::is_whitespace))
        {
            return Err(Error::Param(format!("vocabulary line {i} is not a single token")));
        }
        let classes = words
            .iter()
            .map(|w| builtin.id(w).map(|i| builtin.class(i)).unwrap_or(WordClass::Noun))
            .collect();
        Self::build(words, classes)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::path(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
        Self::from_text(&text)
    }
}

/// BOS-prefixed, EOS-terminated sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<TokenId>);

impl TokenSeq {
    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Position of the first word that names a subject.
    pub fn subject_position(&self, vocab: &Vocabulary) -> Option<usize> {
        self.0.iter().position(|&t| vocab.class(t).is_subject_noun())
    }

    pub fn position_of(&self, id: TokenId) -> Option<usize> {
        self.0.iter().position(|&t| t == id)
    }

    pub fn display<'a>(&'a self, vocab: &'a Vocabulary) -> impl fmt::Display + 'a {
        struct D<'a>(&'a TokenSeq, &'a Vocabulary);
        impl fmt::Display for D<'_> {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                let words: Vec<&str> = self.0 .0.iter().map(|&t| self.1.word(t)).collect();
                write!(f, "{}", words.join(" "))
            }
        }
        D(self, vocab)
    }
}

/// Lowercases, splits on whitespace and wraps in BOS/EOS.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenSeq> {
    tokenize_max(text, vocab, DEFAULT_MAX_TOKENS)
}

pub fn tokenize_max(text: &str, vocab: &Vocabulary, max_tokens: usize) -> Result<TokenSeq> {
    let mut ids = vec![BOS];
    for word in text.split_whitespace() {
        let w = word.to_lowercase();
        match vocab.id(&w) {
            Some(id) if id as usize >= SPECIALS.len() => ids.push(id),
            _ => return Err(Error::Vocabulary(word.to_string())),
        }
    }
    ids.push(EOS);
    if ids.len() > max_tokens {
        return Err(Error::Param(format!(
            "prompt has {} tokens, limit is {max_tokens}",
            ids.len()
        )));
    }
    Ok(TokenSeq(ids))
}

/// Source and edit prompts of one request.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSpec {
    pub source_tokens: TokenSeq,
    pub edit_tokens: TokenSeq,
    pub subject_word_position: Option<usize>,
}

impl PromptSpec {
    pub fn new(source: &str, edit: &str, vocab: &Vocabulary) -> Result<Self> {
        let source_tokens = tokenize(source, vocab)?;
        let edit_tokens = tokenize(edit, vocab)?;
        let subject_word_position = edit_tokens.subject_position(vocab);
        Ok(Self {
            source_tokens,
            edit_tokens,
            subject_word_position,
        })
    }
}

/// Correspondence from edit-prompt positions to source-prompt positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenAlignment {
    /// For every edit position, the matched source position if any.
    pub mapper: Vec<Option<usize>>,
    /// Edit positions without an identical source counterpart.
    pub edited_positions: BTreeSet<usize>,
    /// Edited positions produced by an equal-length substitution, with the
    /// source position they replace.
    pub swapped_from: BTreeMap<usize, usize>,
}

impl TokenAlignment {
    pub fn identity(len: usize) -> Self {
        Self {
            mapper: (0..len).map(Some).collect(),
            edited_positions: BTreeSet::new(),
            swapped_from: BTreeMap::new(),
        }
    }

    pub fn matched_pairs(&self) -> Vec<(usize, usize)> {
        self.mapper
            .iter()
            .enumerate()
            .filter_map(|(e, s)| s.map(|s| (e, s)))
            .collect()
    }
}

/// LCS alignment on token ids.
///
/// Among all longest common subsequences the lexicographically smallest id
/// sequence is chosen, embedded at its leftmost occurrence in both prompts.
/// Both choices depend only on the pair of sequences, not on their order,
/// so swapping the arguments yields the inverse correspondence. Gaps between
/// matches are substitutions: equal-length gaps are swapped pairwise,
/// unequal gaps become wholly edited.
pub fn align_prompts(source: &TokenSeq, edit: &TokenSeq) -> TokenAlignment {
    let pairs = lcs_pairs(source.ids(), edit.ids());
    let mut mapper = vec![None; edit.len()];
    for &(s, e) in &pairs {
        mapper[e] = Some(s);
    }
    let mut edited_positions = BTreeSet::new();
    let mut swapped_from = BTreeMap::new();
    // Gap boundaries, with sentinels before the start and after the end.
    let mut bounds: Vec<(isize, isize)> = vec![(-1, -1)];
    bounds.extend(pairs.iter().map(|&(s, e)| (s as isize, e as isize)));
    bounds.push((source.len() as isize, edit.len() as isize));
    for w in bounds.windows(2) {
        let (s0, e0) = w[0];
        let (s1, e1) = w[1];
        let src_gap = (s0 + 1) as usize..s1 as usize;
        let edit_gap = (e0 + 1) as usize..e1 as usize;
        let equal = src_gap.len() == edit_gap.len();
        for (k, e) in edit_gap.enumerate() {
            edited_positions.insert(e);
            if equal {
                swapped_from.insert(e, src_gap.start + k);
            }
        }
    }
    TokenAlignment {
        mapper,
        edited_positions,
        swapped_from,
    }
}

/// Matched `(source, edit)` index pairs of the canonical LCS.
fn lcs_pairs(a: &[TokenId], b: &[TokenId]) -> Vec<(usize, usize)> {
    let (n, m) = (a.len(), b.len());
    // suffix[i][j] = LCS length of a[i..], b[j..]
    let mut suffix = vec![vec![0usize; m + 1]; n + 1];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            suffix[i][j] = if a[i] == b[j] {
                1 + suffix[i + 1][j + 1]
            } else {
                suffix[i + 1][j].max(suffix[i][j + 1])
            };
        }
    }
    let mut alphabet: Vec<TokenId> = a.iter().copied().filter(|t| b.contains(t)).collect();
    alphabet.sort_unstable();
    alphabet.dedup();

    let mut pairs = Vec::new();
    let (mut i, mut j) = (0, 0);
    while suffix[i][j] > 0 {
        let need = suffix[i][j] - 1;
        let next = alphabet.iter().find_map(|&c| {
            let ii = (i..n).find(|&k| a[k] == c)?;
            let jj = (j..m).find(|&k| b[k] == c)?;
            (suffix[ii + 1][jj + 1] == need).then_some((ii, jj))
        });
        let (ii, jj) = next.expect("an LCS continuation always exists");
        pairs.push((ii, jj));
        i = ii + 1;
        j = jj + 1;
    }
    pairs
}

/// Text token embeddings `c2` with the tokens they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<T> {
    pub tokens: TokenSeq,
    pub embeddings: Array2<T>,
}

/// Subject representation `c1`: `k` vectors in the text embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEmbedding<T> {
    pub tokens: Array2<T>,
    pub source_subject_word: TokenId,
}

/// Origin of a condition position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// Text token at this prompt position.
    Text(usize),
    /// Subject token slot.
    Subject(usize),
}

/// Where the subject tokens go in the fused sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubjectPlacement {
    #[default]
    AfterSubjectWord,
    Append,
}

/// Fused conditioning sequence fed to cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition<T> {
    pub embeddings: Array2<T>,
    pub labels: Vec<Provenance>,
}

impl<T: Scalar> Condition<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Condition column holding prompt position `pos`.
    pub fn column_of_text(&self, pos: usize) -> Option<usize> {
        self.labels.iter().position(|l| *l == Provenance::Text(pos))
    }

    pub fn subject_columns(&self) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, Provenance::Subject(_)))
            .map(|(i, _)| i)
            .collect()
    }
}

impl<T: Scalar> From<TextEmbedding<T>> for Condition<T> {
    fn from(c2: TextEmbedding<T>) -> Self {
        let labels = (0..c2.tokens.len()).map(Provenance::Text).collect();
        Self {
            embeddings: c2.embeddings,
            labels,
        }
    }
}

/// Index at which subject tokens are inserted, and the resulting labels.
pub(crate) fn fused_layout(
    tokens: &TokenSeq,
    subject_word: Option<TokenId>,
    k: usize,
    placement: SubjectPlacement,
) -> Result<(usize, Vec<Provenance>)> {
    let n = tokens.len();
    let Some(word) = subject_word else {
        return Ok((n, (0..n).map(Provenance::Text).collect()));
    };
    let insert_at = match placement {
        SubjectPlacement::Append => n,
        SubjectPlacement::AfterSubjectWord => {
            tokens
                .position_of(word)
                .ok_or_else(|| Error::Param(format!("subject word id {word} does not occur in the prompt")))?
                + 1
        }
    };
    let mut labels: Vec<Provenance> = (0..insert_at).map(Provenance::Text).collect();
    labels.extend((0..k).map(Provenance::Subject));
    labels.extend((insert_at..n).map(Provenance::Text));
    Ok((insert_at, labels))
}

/// Concatenates `c1` into `c2`.
pub fn fuse<T: Scalar>(
    c1: Option<&SubjectEmbedding<T>>,
    c2: &TextEmbedding<T>,
    placement: SubjectPlacement,
) -> Result<Condition<T>> {
    let Some(c1) = c1 else {
        return Ok(c2.clone().into());
    };
    if c1.tokens.ncols() != c2.embeddings.ncols() {
        return Err(Error::Shape(format!(
            "subject width {} vs text width {}",
            c1.tokens.ncols(),
            c2.embeddings.ncols()
        )));
    }
    let k = c1.tokens.nrows();
    let (at, labels) = fused_layout(&c2.tokens, Some(c1.source_subject_word), k, placement)?;
    let e = &c2.embeddings;
    let embeddings = ndarray::concatenate(
        ndarray::Axis(0),
        &[e.slice(s![..at, ..]), c1.tokens.view(), e.slice(s![at.., ..])],
    )
    .expect("widths checked");
    Ok(Condition { embeddings, labels })
}

/// Learned lookup plus sinusoidal positions.
pub fn embed_text<T: Scalar>(tokens: &TokenSeq, model: &Denoiser<T>) -> TextEmbedding<T> {
    model.embed_text(tokens)
}

/// Encodes a reference image and its subject word into `k` tokens.
pub fn encode_subject<T: Scalar>(
    reference: &Image,
    subject_word: TokenId,
    model: &Denoiser<T>,
) -> Result<SubjectEmbedding<T>> {
    model.encode_subject(reference, subject_word)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ids(v: &Vocabulary, text: &str) -> Vec<TokenId> {
        tokenize(text, v).unwrap().0
    }

    #[test]
    fn tokenizes_paper_prompt() {
        let v = Vocabulary::default();
        let got = ids(&v, "A jeep car moving on the road");
        let want: Vec<TokenId> = ["a", "jeep", "car", "moving", "on", "the", "road"]
            .iter()
            .map(|w| v.id(w).unwrap())
            .collect();
        assert_eq!(got[0], BOS);
        assert_eq!(&got[1..8], &want[..]);
        assert_eq!(got[8], EOS);
        assert_eq!(ids(&v, ""), vec![BOS, EOS]);
        assert!(matches!(tokenize("a zzz car", &v), Err(Error::Vocabulary(w)) if w == "zzz"));
    }

    #[test]
    fn specials_are_reserved() {
        let v = Vocabulary::default();
        assert_eq!(v.id("<bos>"), Some(BOS));
        assert_eq!(v.id("<eos>"), Some(EOS));
        assert_eq!(v.id("<pad>"), Some(PAD));
        assert_eq!(v.id("<subject>"), Some(SUBJECT_SLOT));
        assert!(tokenize("<bos>", &v).is_err());
        let again = Vocabulary::from_text(&v.to_text()).unwrap();
        assert_eq!(again, v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    #[test]
    fn too_long_prompt_rejected() {
        let v = Vocabulary::default();
        let long = vec!["a"; 15].join(" ");
        assert!(matches!(tokenize(&long, &v), Err(Error::Param(_))));
    }

    #[test]
    fn identical_prompts_align_to_identity() {
        let v = Vocabulary::default();
        let p = tokenize("a red square moving on the plain", &v).unwrap();
        let a = align_prompts(&p, &p);
        assert_eq!(a, TokenAlignment::identity(p.len()));
    }

    #[test]
    fn word_swap_alignment() {
        let v = Vocabulary::default();
        let src = tokenize("a jeep car moving on the road", &v).unwrap();
        let dst = tokenize("a vintage car moving on the road", &v).unwrap();
        let a = align_prompts(&src, &dst);
        assert_eq!(a.edited_positions, BTreeSet::from([2]));
        assert_eq!(a.swapped_from.get(&2), Some(&2));
        for (e, s) in a.mapper.iter().enumerate() {
            if e == 2 {
                assert_eq!(*s, None);
            } else {
                assert_eq!(*s, Some(e));
            }
        }
    }

    #[test]
    fn unequal_span_is_wholly_edited() {
        let v = Vocabulary::default();
        let src = tokenize("a red square moving on the plain", &v).unwrap();
        let dst = tokenize("a circle moving on the plain", &v).unwrap();
        let a = align_prompts(&src, &dst);
        assert_eq!(a.edited_positions, BTreeSet::from([2]));
        assert!(a.swapped_from.is_empty());
        assert_eq!(a.mapper[3], Some(4));
        let two = tokenize("a blue circle moving on the plain", &v).unwrap();
        let b = align_prompts(&src, &two);
        assert_eq!(b.edited_positions, BTreeSet::from([2, 3]));
        assert_eq!(b.swapped_from, BTreeMap::from([(2, 2), (3, 3)]));
    }

    #[test]
    fn fuse_layouts() {
        let v = Vocabulary::default();
        let tokens = tokenize("a vintage car moving on the road", &v).unwrap();
        let c2 = TextEmbedding {
            tokens: tokens.clone(),
            embeddings: Array2::<f32>::from_shape_fn((9, 3), |(i, j)| (i * 3 + j) as f32),
        };
        assert_eq!(fuse(None, &c2, SubjectPlacement::default()).unwrap(), c2.clone().into());
        // subject word at position 4 ("moving") for the layout check
        let c1 = SubjectEmbedding {
            tokens: Array2::<f32>::from_elem((4, 3), -1.0),
            source_subject_word: tokens.0[4],
        };
        let c = fuse(Some(&c1), &c2, SubjectPlacement::AfterSubjectWord).unwrap();
        assert_eq!(c.len(), 13);
        let kinds: String = c
            .labels
            .iter()
            .map(|l| match l {
                Provenance::Text(_) => 't',
                Provenance::Subject(_) => 's',
            })
            .collect();
        assert_eq!(kinds, "tttttsssstttt");
        assert_eq!(c.embeddings.row(5)[0], -1.0);
        assert_eq!(c.embeddings.row(9)[0], 15.0);
        let mut text_pos: Vec<usize> = c
            .labels
            .iter()
            .filter_map(|l| match l {
                Provenance::Text(p) => Some(*p),
                _ => None,
            })
            .collect();
        text_pos.sort();
        assert_eq!(text_pos, (0..9).collect::<Vec<_>>());
        let appended = fuse(Some(&c1), &c2, SubjectPlacement::Append).unwrap();
        assert_eq!(appended.subject_columns(), vec![9, 10, 11, 12]);
        let narrow = SubjectEmbedding {
            tokens: Array2::<f32>::zeros((4, 2)),
            source_subject_word: tokens.0[4],
        };
        assert!(matches!(
            fuse(Some(&narrow), &c2, SubjectPlacement::default()),
            Err(Error::Shape(_))
        ));
    }

    /// Exhaustive LCS length: every subsequence of `a` checked against `b`.
    fn brute_lcs_len(a: &[TokenId], b: &[TokenId]) -> usize {
        let mut best = 0;
        for mask in 0u32..(1 << a.len()) {
            let sub: Vec<TokenId> = (0..a.len()).filter(|i| mask & (1 << i) != 0).map(|i| a[i]).collect();
            let mut it = b.iter();
            if sub.iter().all(|x| it.any(|y| y == x)) {
                best = best.max(sub.len());
            }
        }
        best
    }

    fn seq(inner: Vec<TokenId>) -> TokenSeq {
        let mut v = vec![BOS];
        v.extend(inner);
        v.push(EOS);
        TokenSeq(v)
    }

    proptest! {
        #[test]
        fn alignment_matches_brute_force(
            a in proptest::collection::vec(4u32..8, 0..9),
            b in proptest::collection::vec(4u32..8, 0..9),
        ) {
            let (sa, sb) = (seq(a), seq(b));
            let al = align_prompts(&sa, &sb);
            let pairs = al.matched_pairs();
            prop_assert_eq!(pairs.len(), brute_lcs_len(sa.ids(), sb.ids()));
            let mut last = None;
            let mut sorted = pairs.clone();
            sorted.sort();
            for (e, s) in sorted {
                prop_assert_eq!(sb.0[e], sa.0[s]);
                if let Some(prev) = last { prop_assert!(s > prev); }
                last = Some(s);
            }
            for e in 0..sb.len() {
                prop_assert!(al.mapper[e].is_some() != al.edited_positions.contains(&e));
            }
        }

        #[test]
        fn alignment_symmetric(
            a in proptest::collection::vec(4u32..8, 0..9),
            b in proptest::collection::vec(4u32..8, 0..9),
        ) {
            let (sa, sb) = (seq(a), seq(b));
            let fwd = align_prompts(&sa, &sb);
            let bwd = align_prompts(&sb, &sa);
            let mut f: Vec<(usize, usize)> = fwd.matched_pairs();
            let mut r: Vec<(usize, usize)> = bwd.matched_pairs().into_iter().map(|(e, s)| (s, e)).collect();
            f.sort();
            r.sort();
            prop_assert_eq!(f, r);
        }
    }
}
