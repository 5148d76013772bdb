use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::Real;

/// Pretrained word vectors from a text file: one word per line followed by
/// its floats. A leading `count dim` header line is skipped.
#[derive(Clone, Debug, Default)]
pub struct WordVectors {
    pub dim: usize,
    vectors: HashMap<String, Vec<Real>>,
}

impl WordVectors {
    pub fn parse(text: &str) -> Result<Self> {
        let mut out = WordVectors::default();
        for (i, line) in text.lines().enumerate() {
            let mut fields = line.split_whitespace();
            let Some(word) = fields.next() else {
                continue;
            };
            let rest: Vec<&str> = fields.collect();
            if i == 0 && rest.len() == 1 && word.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
                continue;
            }
            let values = rest
                .iter()
                .map(|v| v.parse::<Real>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Parse {
                    line: i + 1,
                    msg: format!("bad vector component: {e}"),
                })?;
            if values.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("no values for {word:?}"),
                });
            }
            if out.vectors.is_empty() {
                out.dim = values.len();
            } else if values.len() != out.dim {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected {} values, found {}", out.dim, values.len()),
                });
            }
            out.vectors.insert(word.to_string(), values);
        }
        Ok(out)
    }

    pub fn get(&self, word: &str) -> Option<&[Real]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }
}

pub fn read_word_vectors(path: impl AsRef<Path>) -> Result<WordVectors> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    WordVectors::parse(&text)
}
