use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Color names and their nominal RGB values.
pub const COLORS: [(&str, [f32; 3]); 6] = [
    ("red", [0.9, 0.1, 0.1]),
    ("green", [0.1, 0.8, 0.15]),
    ("blue", [0.15, 0.25, 0.95]),
    ("yellow", [0.9, 0.9, 0.1]),
    ("magenta", [0.85, 0.1, 0.85]),
    ("cyan", [0.1, 0.85, 0.85]),
];

pub const SHAPES: [&str; 4] = ["circle", "square", "triangle", "cross"];

// Never emitted by the captioning grammar; they exist so the vocabulary has
// room for off-distribution output.
const FILLER: [&str; 17] = [
    "the", "on", "with", "small", "large", "left", "right", "top", "bottom", "near", "of", "is",
    "there", "image", "picture", "two", "one",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    pub pad_id: usize,
    pub bos_id: usize,
    pub eos_id: usize,
}

impl Vocab {
    pub fn new(tokens: Vec<String>, pad_id: usize, bos_id: usize, eos_id: usize) -> Result<Self> {
        let v = tokens.len();
        if v < 8 {
            return Err(Error::Format(format!("vocabulary needs at least 8 tokens, got {v}")));
        }
        if pad_id >= v || bos_id >= v || eos_id >= v {
            return Err(Error::Format("special token id out of range".into()));
        }
        if pad_id == bos_id || pad_id == eos_id || bos_id == eos_id {
            return Err(Error::Format("special token ids must be distinct".into()));
        }
        Ok(Self {
            tokens,
            pad_id,
            bos_id,
            eos_id,
        })
    }

    /// The 32-token captioning vocabulary: `<pad> <bos> <eos> a and`,
    /// six colors, four shapes, then unused filler words.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>", "a", "and"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        tokens.extend(COLORS.iter().map(|(c, _)| c.to_string()));
        tokens.extend(SHAPES.iter().map(|s| s.to_string()));
        tokens.extend(FILLER.iter().map(|s| s.to_string()));
        Self::new(tokens, 0, 1, 2).expect("standard vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn color_id(&self, color: usize) -> usize {
        self.id(COLORS[color].0).expect("color in vocabulary")
    }

    pub fn shape_id(&self, shape: usize) -> usize {
        self.id(SHAPES[shape]).expect("shape in vocabulary")
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// True when `ids` is `a <color> <shape> (and a <color> <shape>)* <eos>`.
    pub fn is_well_formed(&self, ids: &[usize]) -> bool {
        let Some((&last, body)) = ids.split_last() else {
            return false;
        };
        if last != self.eos_id || body.is_empty() {
            return false;
        }
        let a = self.id("a");
        let and = self.id("and");
        let is_color = |t: usize| (0..COLORS.len()).any(|c| self.id(COLORS[c].0) == Some(t));
        let is_shape = |t: usize| (0..SHAPES.len()).any(|s| self.id(SHAPES[s]) == Some(t));
        let mut rest = body;
        loop {
            match rest {
                [x, c, s, tail @ ..] if Some(*x) == a && is_color(*c) && is_shape(*s) => {
                    match tail {
                        [] => return true,
                        [j, more @ ..] if Some(*j) == and && !more.is_empty() => rest = more,
                        _ => return false,
                    }
                }
                _ => return false,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standard_layout() {
        let v = Vocab::standard();
        assert_eq!(v.len(), 32);
        assert_eq!((v.pad_id, v.bos_id, v.eos_id), (0, 1, 2));
        assert_ne!(v.eos_id, 0);
    }

    #[test]
    fn grammar() {
        let v = Vocab::standard();
        let ids = |s: &str| s.split(' ').map(|t| v.id(t).unwrap()).collect::<Vec<_>>();
        assert!(v.is_well_formed(&ids("a red circle <eos>")));
        assert!(v.is_well_formed(&ids("a red circle and a blue cross <eos>")));
        assert!(!v.is_well_formed(&ids("a red circle and <eos>")));
        assert!(!v.is_well_formed(&ids("a red circle")));
        assert!(!v.is_well_formed(&ids("a circle red <eos>")));
        assert!(!v.is_well_formed(&ids("<eos>")));
    }

    #[test]
    fn rejects_bad_specials() {
        let toks: Vec<String> = (0..8).map(|i| i.to_string()).collect();
        assert!(Vocab::new(toks.clone(), 0, 0, 1).is_err());
        assert!(Vocab::new(toks[..5].to_vec(), 0, 1, 2).is_err());
    }
}
