//! Pretrained word vectors in the whitespace text format
//! (`<token> <f1> ... <fD>`, one token per line).
//!
//! The table is immutable once built. Out-of-vocabulary tokens resolve to a
//! fallback vector: the componentwise mean of every stored row.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding file contains no vectors")]
    EmptyFile,
    #[error("line {line}: expected {expected} components, found {found}")]
    InconsistentDimension {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: duplicate token {token:?}")]
    DuplicateToken { line: usize, token: String },
    #[error("line {line}: malformed number {text:?}")]
    MalformedNumber { line: usize, text: String },
    #[error("line {line}: non-finite component")]
    NonFinite { line: usize },
    #[error("empty token")]
    EmptyToken,
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("k = {k} exceeds the {available} other tokens in the table")]
    KTooLarge { k: usize, available: usize },
    #[error("k must be positive")]
    ZeroK,
    #[error("vector lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dimension: usize,
    tokens: Vec<String>,
    /// Row-major, `tokens.len() * dimension`.
    vectors: Vec<f64>,
    index: HashMap<String, usize>,
    fallback: Vec<f64>,
}

impl EmbeddingTable {
    /// Builds a table from parallel token and row lists.
    pub fn from_rows(tokens: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self, EmbeddingError> {
        let dimension = rows
            .first()
            .map(Vec::len)
            .ok_or(EmbeddingError::EmptyFile)?;
        if dimension == 0 {
            return Err(EmbeddingError::InconsistentDimension {
                line: 1,
                expected: 1,
                found: 0,
            });
        }
        let mut vectors = Vec::with_capacity(rows.len() * dimension);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, (token, row)) in tokens.iter().zip(&rows).enumerate() {
            if token.is_empty() {
                return Err(EmbeddingError::EmptyToken);
            }
            if row.len() != dimension {
                return Err(EmbeddingError::InconsistentDimension {
                    line: i + 1,
                    expected: dimension,
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { line: i + 1 });
            }
            if index.insert(token.clone(), i).is_some() {
                return Err(EmbeddingError::DuplicateToken {
                    line: i + 1,
                    token: token.clone(),
                });
            }
            vectors.extend_from_slice(row);
        }
        let mut table = Self {
            dimension,
            tokens,
            vectors,
            index,
            fallback: Vec::new(),
        };
        table.refresh_fallback();
        Ok(table)
    }

    /// Parses the text format. `D` is taken from the first line.
    pub fn parse<R: BufRead>(reader: R) -> Result<Self, EmbeddingError> {
        let mut tokens = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut dimension = None;
        let mut seen: HashMap<String, usize> = HashMap::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let line = line.trim_end_matches(['\r', '\n']);
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_ascii_whitespace();
            let token = fields.next().expect("non-empty line has a first field");
            let row = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| EmbeddingError::MalformedNumber {
                            line: lineno,
                            text: f.to_string(),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            let expected = *dimension.get_or_insert(row.len());
            if row.len() != expected || expected == 0 {
                return Err(EmbeddingError::InconsistentDimension {
                    line: lineno,
                    expected,
                    found: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(EmbeddingError::NonFinite { line: lineno });
            }
            if seen.insert(token.to_string(), lineno).is_some() {
                return Err(EmbeddingError::DuplicateToken {
                    line: lineno,
                    token: token.to_string(),
                });
            }
            tokens.push(token.to_string());
            rows.push(row);
        }
        if tokens.is_empty() {
            return Err(EmbeddingError::EmptyFile);
        }
        Self::from_rows(tokens, rows)
    }

    pub fn parse_str(text: &str) -> Result<Self, EmbeddingError> {
        Self::parse(text.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, EmbeddingError> {
        let file = std::fs::File::open(path)?;
        Self::parse(std::io::BufReader::new(file))
    }

    /// Writes the text format with 17 significant digits per component, which
    /// round-trips every `f64` exactly.
    pub fn write<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for (i, token) in self.tokens.iter().enumerate() {
            out.write_all(token.as_bytes())?;
            for v in self.row(i) {
                write!(out, " {v:.16e}")?;
            }
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.dimension
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

    pub fn fallback(&self) -> &[f64] {
        &self.fallback
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dimension..(i + 1) * self.dimension]
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    /// Stored row for in-vocabulary tokens, the fallback otherwise.
    pub fn lookup(&self, token: &str) -> Result<&[f64], EmbeddingError> {
        if token.is_empty() {
            return Err(EmbeddingError::EmptyToken);
        }
        Ok(match self.index_of(token) {
            Some(i) => self.row(i),
            None => &self.fallback,
        })
    }

    /// Flat row-major storage. Used by checkpoints and by training when the
    /// table itself is being learned.
    pub fn raw_vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub(crate) fn raw_vectors_mut(&mut self) -> &mut [f64] {
        &mut self.vectors
    }

    pub(crate) fn refresh_fallback(&mut self) {
        let n = self.tokens.len() as f64;
        let mut mean = vec![0.0; self.dimension];
        for i in 0..self.tokens.len() {
            for (m, v) in mean.iter_mut().zip(self.row(i)) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        self.fallback = mean;
    }

    /// Order-sensitive FNV-1a digest of tokens and vector bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for t in &self.tokens {
            feed(t.as_bytes());
            feed(&[0]);
        }
        for v in &self.vectors {
            feed(&v.to_bits().to_le_bytes());
        }
        h
    }

    /// `k` nearest tokens to `token` by cosine similarity, ties broken by
    /// ascending token order.
    pub fn nearest_neighbors(
        &self,
        token: &str,
        k: usize,
    ) -> Result<Vec<(String, f64)>, EmbeddingError> {
        let query = self
            .index_of(token)
            .ok_or_else(|| EmbeddingError::UnknownToken(token.to_string()))?;
        if k == 0 {
            return Err(EmbeddingError::ZeroK);
        }
        let available = self.len() - 1;
        if k > available {
            return Err(EmbeddingError::KTooLarge { k, available });
        }
        let q = self.row(query);
        let mut scored: Vec<(usize, f64)> = (0..self.len())
            .filter(|&i| i != query)
            .map(|i| (i, cosine(q, self.row(i))))
            .collect();
        scored.sort_by(|a, b| {
            b.1.total_cmp(&a.1)
                .then_with(|| self.tokens[a.0].cmp(&self.tokens[b.0]))
        });
        scored.truncate(k);
        Ok(scored
            .into_iter()
            .map(|(i, s)| (self.tokens[i].clone(), s))
            .collect())
    }
}

/// Cosine similarity; zero-norm inputs give 0.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, EmbeddingError> {
    if u.len() != v.len() {
        return Err(EmbeddingError::LengthMismatch(u.len(), v.len()));
    }
    Ok(cosine(u, v))
}

fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
    for (a, b) in u.iter().zip(v) {
        uv += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu == 0.0 || vv == 0.0 {
        return 0.0;
    }
    (uv / (uu.sqrt() * vv.sqrt())).clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_line_and_looks_up() {
        let t = EmbeddingTable::parse_str("cat 0.1 -0.2 0.3\n").unwrap();
        assert_eq!(t.dimension(), 3);
        assert_eq!(t.lookup("cat").unwrap(), &[0.1, -0.2, 0.3]);
    }

    #[test]
    fn rejects_inconsistent_dimension() {
        let err = EmbeddingTable::parse_str("a 1 0\nb 0 1 1\n").unwrap_err();
        assert!(matches!(
            err,
            EmbeddingError::InconsistentDimension {
                line: 2,
                expected: 2,
                found: 3
            }
        ));
    }

    #[test]
    fn fallback_is_mean_and_serves_oov() {
        let t = EmbeddingTable::parse_str("a 1 0\nb 0 1\n").unwrap();
        assert_eq!(t.fallback(), &[0.5, 0.5]);
        assert_eq!(t.lookup("dog").unwrap(), &[0.5, 0.5]);
        assert!(matches!(t.lookup(""), Err(EmbeddingError::EmptyToken)));
    }

    #[test]
    fn error_paths() {
        assert!(matches!(
            EmbeddingTable::parse_str(""),
            Err(EmbeddingError::EmptyFile)
        ));
        assert!(matches!(
            EmbeddingTable::parse_str("a 1\na 2\n"),
            Err(EmbeddingError::DuplicateToken { line: 2, .. })
        ));
        assert!(matches!(
            EmbeddingTable::parse_str("a 1 x\n"),
            Err(EmbeddingError::MalformedNumber { line: 1, .. })
        ));
        assert!(matches!(
            EmbeddingTable::parse_str("a\n"),
            Err(EmbeddingError::InconsistentDimension { .. })
        ));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(EmbeddingError::LengthMismatch(1, 2))
        ));
    }

    #[test]
    fn neighbours_of_small_table() {
        let t = EmbeddingTable::parse_str("a 1 0\nb 1 0.01\nc 0 1\n").unwrap();
        // cos(a, b) = 1 / sqrt(1 + 1e-4)
        let expected = 1.0 / (1.0f64 + 1e-4).sqrt();
        let nn = t.nearest_neighbors("a", 1).unwrap();
        assert_eq!(nn.len(), 1);
        assert_eq!(nn[0].0, "b");
        assert!((nn[0].1 - expected).abs() < 1e-12);
        assert!((nn[0].1 - 0.99995).abs() < 1e-6);
        let nn2: Vec<_> = t
            .nearest_neighbors("a", 2)
            .unwrap()
            .into_iter()
            .map(|p| p.0)
            .collect();
        assert_eq!(nn2, vec!["b", "c"]);
        assert!(matches!(
            t.nearest_neighbors("zzz", 1),
            Err(EmbeddingError::UnknownToken(_))
        ));
        assert!(matches!(
            t.nearest_neighbors("a", 3),
            Err(EmbeddingError::KTooLarge { k: 3, available: 2 })
        ));
    }

    #[test]
    fn ties_break_lexicographically() {
        let t = EmbeddingTable::parse_str("q 1 0\nz 1 0\ny 1 0\nx 0 1\n").unwrap();
        let nn: Vec<_> = t
            .nearest_neighbors("q", 3)
            .unwrap()
            .into_iter()
            .map(|p| p.0)
            .collect();
        assert_eq!(nn, vec!["y", "z", "x"]);
    }

    #[test]
    fn write_then_parse_is_exact() {
        let t = EmbeddingTable::parse_str("a 0.1 -3.3333333333333335e-7\nb 1e300 2.5\n").unwrap();
        let mut buf = Vec::new();
        t.write(&mut buf).unwrap();
        let back = EmbeddingTable::parse(buf.as_slice()).unwrap();
        assert_eq!(back.checksum(), t.checksum());
    }
}
