use ndarray::Array2;

use crate::scalar::Scalar;

/// Prompt conditioning handed to a denoiser. A null embedding stands for
/// `p = ∅`; the network substitutes its learned null vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding<T> {
    vector: Array2<T>,
    null: bool,
}

impl<T: Scalar> TextEmbedding<T> {
    pub fn null(width: usize) -> Self {
        Self {
            vector: Array2::zeros((1, width)),
            null: true,
        }
    }

    pub fn from_vec(values: Vec<T>) -> Self {
        let n = values.len();
        Self {
            vector: Array2::from_shape_vec((1, n), values).expect("row vector"),
            null: false,
        }
    }

    pub fn is_null(&self) -> bool {
        self.null
    }

    /// `[1 × width]`; zeros for the null embedding.
    pub fn vector(&self) -> &Array2<T> {
        &self.vector
    }

    pub fn width(&self) -> usize {
        self.vector.ncols()
    }

    pub fn cast<U: Scalar>(&self) -> TextEmbedding<U> {
        TextEmbedding {
            vector: self.vector.mapv(|v| U::lit(v.as_f64())),
            null: self.null,
        }
    }
}

/// Maps prompts to fixed-width vectors.
pub trait TextEncoder: Send + Sync {
    fn width(&self) -> usize;

    fn encode_vec(&self, prompt: &str) -> Vec<f64>;

    /// `None` is the null prompt.
    fn encode<T: Scalar>(&self, prompt: Option<&str>) -> TextEmbedding<T>
    where
        Self: Sized,
    {
        match prompt {
            None => TextEmbedding::null(self.width()),
            Some(p) => TextEmbedding::from_vec(self.encode_vec(p).into_iter().map(T::lit).collect()),
        }
    }
}

/// Deterministic hashed bag of lowercase tokens, L2-normalized.
///
/// Each token lands in one of `width` buckets with a hash-derived sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedBagOfTokens {
    width: usize,
}

pub const DEFAULT_TEXT_WIDTH: usize = 64;

impl HashedBagOfTokens {
    pub fn new(width: usize) -> Self {
        assert!(width > 0, "text width must be positive");
        Self { width }
    }
}

impl Default for HashedBagOfTokens {
    fn default() -> Self {
        Self::new(DEFAULT_TEXT_WIDTH)
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn tokenize(prompt: &str) -> impl Iterator<Item = String> + '_ {
    prompt
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(|t| t.to_lowercase())
}

impl TextEncoder for HashedBagOfTokens {
    fn width(&self) -> usize {
        self.width
    }

    fn encode_vec(&self, prompt: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        for tok in tokenize(prompt) {
            let h = fnv1a(tok.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.width as u64) as usize] += sign;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}
