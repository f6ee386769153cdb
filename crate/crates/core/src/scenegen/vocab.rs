//! Fixed whitespace-token vocabulary shared by questions, answers, and
//! captions.
//!
//! Reserved ids: 0 = `<pad>`, 1 = `<bos>`, 2 = `<eos>`, 3 = `<img>`
//! (the image-slot marker used for image token positions in multimodal
//! sequences). The remaining ids follow in a fixed documented order, so
//! a vocabulary is fully determined by the grid dimensions.

use std::collections::HashMap;

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const IMG: u32 = 3;

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("unknown token '{0}'")]
    UnknownToken(String),
    #[error("unknown token id {0}")]
    UnknownId(u32),
}

#[derive(Debug, Clone)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    grid: (usize, usize),
}

const WORDS: &[&str] = &[
    "a", "is", "the", "at", "row", "column", "how", "many", "where", ".", "?", "yes", "no",
    "left-of", "right-of", "above", "below", "red", "green", "blue", "yellow", "square", "circle",
    "triangle",
];

impl Vocab {
    /// Builds the vocabulary for a grid: reserved ids, fixed word list,
    /// digits 0-9, then row tokens r0..r{rows-1} and column tokens
    /// c0..c{cols-1}.
    pub fn for_grid(rows: usize, cols: usize) -> Self {
        assert!(rows >= 1 && cols >= 1 && rows <= 10 && cols <= 10);
        let mut tokens: Vec<String> = vec![
            "<pad>".into(),
            "<bos>".into(),
            "<eos>".into(),
            "<img>".into(),
        ];
        tokens.extend(WORDS.iter().map(|s| s.to_string()));
        tokens.extend((0..10).map(|d| d.to_string()));
        tokens.extend((0..rows).map(|r| format!("r{r}")));
        tokens.extend((0..cols).map(|c| format!("c{c}")));
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Self {
            tokens,
            index,
            grid: (rows, cols),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn id(&self, token: &str) -> Result<u32, VocabError> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| VocabError::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: u32) -> Result<&str, VocabError> {
        self.tokens
            .get(id as usize)
            .map(|s| s.as_str())
            .ok_or(VocabError::UnknownId(id))
    }

    /// Whitespace tokenization into ids.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>, VocabError> {
        text.split_whitespace().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Result<String, VocabError> {
        let toks: Result<Vec<&str>, _> = ids.iter().map(|&i| self.token(i)).collect();
        Ok(toks?.join(" "))
    }

    pub fn row_token(&self, row: usize) -> String {
        format!("r{row}")
    }

    pub fn col_token(&self, col: usize) -> String {
        format!("c{col}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocab::for_grid(8, 8);
        assert_eq!(v.id("<pad>").unwrap(), PAD);
        assert_eq!(v.id("<bos>").unwrap(), BOS);
        assert_eq!(v.id("<eos>").unwrap(), EOS);
        assert_eq!(v.id("<img>").unwrap(), IMG);
    }

    #[test]
    fn bijective_round_trip() {
        let v = Vocab::for_grid(8, 8);
        for id in 0..v.len() as u32 {
            let tok = v.token(id).unwrap().to_string();
            assert_eq!(v.id(&tok).unwrap(), id);
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocab::for_grid(8, 8);
        let text = "is the red square left-of the blue circle ?";
        let ids = v.encode(text).unwrap();
        assert_eq!(v.decode(&ids).unwrap(), text);
    }

    #[test]
    fn unknown_token_is_an_error() {
        let v = Vocab::for_grid(8, 8);
        assert!(matches!(v.encode("purple"), Err(VocabError::UnknownToken(_))));
        assert!(v.encode("r7").is_ok());
        assert!(v.encode("r8").is_err());
    }

    #[test]
    fn vocab_is_grid_dependent_but_stable() {
        let a = Vocab::for_grid(8, 8);
        let b = Vocab::for_grid(8, 8);
        assert_eq!(a.tokens, b.tokens);
        let c = Vocab::for_grid(4, 4);
        assert!(c.len() < a.len());
    }
}
