//! Word-level tokenisation with a frequency-ranked vocabulary.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use super::{Dataset, Inputs, Split};
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercased maximal runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    /// `tokens[id]`; ids 0 and 1 are the pad and unknown markers.
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, ids }
    }

    /// Keeps the `vocab_size − 2` most frequent tokens, ties broken
    /// lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_size: usize) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for t in texts {
            for tok in tokenize(t) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(
            ranked
                .into_iter()
                .take(vocab_size.saturating_sub(2))
                .map(|(t, _)| t),
        );
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        match self.ids.get(token) {
            Some(&i) if i > UNK => i,
            _ => UNK,
        }
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Ids of the first `seq_len` tokens, right-padded with [`PAD`].
    pub fn encode(&self, text: &str, seq_len: usize) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(text)
            .iter()
            .take(seq_len)
            .map(|t| self.id(t))
            .collect();
        ids.resize(seq_len, PAD);
        ids
    }

    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t}\t{i}")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let what = path.display().to_string();
        let mut tokens = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::format(&what, format!("line {} has no tab", n + 1)))?;
            let id: usize = id
                .parse()
                .map_err(|_| Error::format(&what, format!("line {}: bad id {id:?}", n + 1)))?;
            if id != tokens.len() {
                return Err(Error::format(
                    &what,
                    format!("line {}: id {id} out of sequence", n + 1),
                ));
            }
            tokens.push(tok.to_string());
        }
        if tokens.len() < 2 {
            return Err(Error::format(
                &what,
                "vocabulary lacks the pad and unknown entries",
            ));
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Builds a vocabulary from `texts` and encodes them as a token dataset.
pub fn tokenize_corpus(
    texts: &[String],
    labels: &[usize],
    num_classes: usize,
    vocab_size: usize,
    seq_len: usize,
) -> Result<(Dataset, Vocabulary)> {
    if texts.is_empty() {
        return Err(Error::Data("empty corpus".into()));
    }
    let vocab = Vocabulary::build(texts.iter().map(String::as_str), vocab_size);
    let ds = encode_corpus(&vocab, texts, labels, num_classes, seq_len, Split::Train)?;
    Ok((ds, vocab))
}

pub fn encode_corpus(
    vocab: &Vocabulary,
    texts: &[String],
    labels: &[usize],
    num_classes: usize,
    seq_len: usize,
    split: Split,
) -> Result<Dataset> {
    let ids = texts
        .iter()
        .flat_map(|t| vocab.encode(t, seq_len))
        .collect();
    Dataset::new(
        Inputs::Tokens { seq_len, ids },
        labels.to_vec(),
        num_classes,
        split,
    )
}

/// Reads an `aclImdb`-style tree: `{split}/neg/*.txt` (label 0) and
/// `{split}/pos/*.txt` (label 1), files taken in name order.
pub fn read_review_dir(dir: &Path) -> Result<(Vec<String>, Vec<usize>)> {
    let mut texts = Vec::new();
    let mut labels = Vec::new();
    for (label, sub) in ["neg", "pos"].iter().enumerate() {
        let d = dir.join(sub);
        let mut files: Vec<_> = std::fs::read_dir(&d)
            .map_err(|e| Error::io(&d, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "txt"))
            .collect();
        files.sort();
        for f in files {
            texts.push(std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?);
            labels.push(label);
        }
    }
    Ok((texts, labels))
}

/// Train and test splits of an `aclImdb` directory, vocabulary from train.
pub fn load_reviews(
    root: &Path,
    vocab_size: usize,
    seq_len: usize,
) -> Result<(Dataset, Dataset, Vocabulary)> {
    let (tr_x, tr_y) = read_review_dir(&root.join("train"))?;
    let (te_x, te_y) = read_review_dir(&root.join("test"))?;
    let (train, vocab) = tokenize_corpus(&tr_x, &tr_y, 2, vocab_size, seq_len)?;
    let test = encode_corpus(&vocab, &te_x, &te_y, 2, seq_len, Split::Test)?;
    Ok((train, test, vocab))
}
