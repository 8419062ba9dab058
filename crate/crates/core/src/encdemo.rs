//! Image encryption over the d-level alphabet: discretize an RGB image
//! into symbols, add a one-time key modulo d, and push the ciphertext
//! through a measured confusion channel to visualize what the error rate
//! does to the decrypted picture.
//!
//! Corruption is applied to the transmitted (encrypted) symbols and the
//! result is then decrypted; under modular addition that is equivalent to
//! corrupting the plaintext.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::protocol::{DetectionMatrix, SiftResult};
use crate::{Error, Result};

/// Symbols drawn per rng stream in [`channel_corrupt`]; fixes the
/// work-to-stream mapping so results are thread-count independent.
const CORRUPT_CHUNK: usize = 4096;

/// An RGB image with every channel value reduced to a symbol in [0, d).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SymbolImage {
    width: usize,
    height: usize,
    d: usize,
    /// Row-major RGB triples, 3·width·height entries, each < d.
    symbols: Vec<u8>,
}

impl SymbolImage {
    pub fn new(width: usize, height: usize, d: usize, symbols: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image must be non-empty, got {width}×{height}"
            )));
        }
        if d < 2 || d > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "alphabet size {d} out of range"
            )));
        }
        if symbols.len() != 3 * width * height {
            return Err(Error::InvalidArgument(format!(
                "{} symbols for a {width}×{height} RGB image (need {})",
                symbols.len(),
                3 * width * height
            )));
        }
        if let Some(s) = symbols.iter().find(|&&s| s as usize >= d) {
            return Err(Error::InvalidArgument(format!(
                "symbol {s} exceeds alphabet size {d}"
            )));
        }
        Ok(SymbolImage {
            width,
            height,
            d,
            symbols,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    /// Fraction of symbols that differ from `other`.
    pub fn symbol_error_rate(&self, other: &SymbolImage) -> Result<f64> {
        if self.symbols.len() != other.symbols.len() || self.d != other.d {
            return Err(Error::InvalidArgument(
                "images must share shape and alphabet".into(),
            ));
        }
        let errors = self
            .symbols
            .iter()
            .zip(&other.symbols)
            .filter(|(a, b)| a != b)
            .count();
        Ok(errors as f64 / self.symbols.len() as f64)
    }
}

/// Where a key's symbols came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KeySource {
    SeededGenerator { seed: u64 },
    SiftedProtocol,
}

/// A one-time key: symbols in [0, d), as long as the image it encrypts.
#[derive(Debug, Clone, Serialize)]
pub struct KeyStream {
    d: usize,
    symbols: Vec<u8>,
    source: KeySource,
}

impl KeyStream {
    /// Uniform symbols from a seeded generator, standing in for a
    /// QKD-derived key.
    pub fn random(d: usize, length: usize, seed: u64) -> Result<Self> {
        if d < 2 || d > u8::MAX as usize {
            return Err(Error::InvalidArgument(format!(
                "alphabet size {d} out of range"
            )));
        }
        if length == 0 {
            return Err(Error::InvalidArgument("empty key".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let symbols = (0..length).map(|_| rng.gen_range(0..d) as u8).collect();
        Ok(KeyStream {
            d,
            symbols,
            source: KeySource::SeededGenerator { seed },
        })
    }

    /// Consumes Alice's sifted symbols as key material for an end-to-end
    /// demonstration. Fails if the sifted block is shorter than `length`.
    pub fn from_sifted(sift: &SiftResult, d: usize, length: usize) -> Result<Self> {
        if sift.pairs.len() < length {
            return Err(Error::InvalidArgument(format!(
                "sifted block has {} symbols, need {length}",
                sift.pairs.len()
            )));
        }
        let symbols: Vec<u8> = sift.pairs.iter().take(length).map(|&(a, _)| a).collect();
        if let Some(&s) = symbols.iter().find(|&&s| s as usize >= d) {
            return Err(Error::InvalidArgument(format!(
                "sifted symbol {s} exceeds alphabet size {d}"
            )));
        }
        Ok(KeyStream {
            d,
            symbols,
            source: KeySource::SiftedProtocol,
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn symbols(&self) -> &[u8] {
        &self.symbols
    }

    pub fn source(&self) -> KeySource {
        self.source
    }
}

/// Reduces an 8-bit RGB buffer to d-level symbols: v → ⌊v·d/256⌋.
pub fn discretize(width: usize, height: usize, rgb: &[u8], d: usize) -> Result<SymbolImage> {
    if d != 2 && d != 4 {
        return Err(Error::InvalidArgument(format!(
            "alphabet size must be 2 or 4, got {d}"
        )));
    }
    if rgb.len() != 3 * width * height {
        return Err(Error::InvalidArgument(format!(
            "{} bytes for a {width}×{height} RGB image (need {})",
            rgb.len(),
            3 * width * height
        )));
    }
    let symbols = rgb.iter().map(|&v| (v as usize * d / 256) as u8).collect();
    SymbolImage::new(width, height, d, symbols)
}

/// Maps symbols back to 8-bit channel values at the cell midpoints,
/// s → round((s + 0.5)·256/d): the inverse used for display.
pub fn render(img: &SymbolImage) -> Vec<u8> {
    img.symbols
        .iter()
        .map(|&s| {
            let v = (s as f64 + 0.5) * 256.0 / img.d as f64;
            v.round().min(255.0) as u8
        })
        .collect()
}

fn combine(img: &SymbolImage, key: &KeyStream, sign: i64) -> Result<SymbolImage> {
    if img.d != key.d {
        return Err(Error::InvalidArgument(format!(
            "image alphabet {} does not match key alphabet {}",
            img.d, key.d
        )));
    }
    if img.symbols.len() != key.symbols.len() {
        return Err(Error::InvalidArgument(format!(
            "image has {} symbols, key has {}",
            img.symbols.len(),
            key.symbols.len()
        )));
    }
    let d = img.d as i64;
    let symbols = img
        .symbols
        .iter()
        .zip(&key.symbols)
        .map(|(&s, &k)| ((s as i64 + sign * k as i64).rem_euclid(d)) as u8)
        .collect();
    SymbolImage::new(img.width, img.height, img.d, symbols)
}

/// One-time-pad addition: c = (s + k) mod d.
pub fn encrypt(img: &SymbolImage, key: &KeyStream) -> Result<SymbolImage> {
    combine(img, key, 1)
}

/// One-time-pad subtraction: s = (c − k) mod d.
pub fn decrypt(img: &SymbolImage, key: &KeyStream) -> Result<SymbolImage> {
    combine(img, key, -1)
}

/// Resamples every symbol from the measured same-basis confusion
/// distribution of `matrix`. Deterministic for any thread count: symbols
/// are processed in fixed chunks, each on its own rng stream.
pub fn channel_corrupt(
    img: &SymbolImage,
    matrix: &DetectionMatrix,
    seed: u64,
) -> Result<SymbolImage> {
    if matrix.d() != img.d {
        return Err(Error::InvalidArgument(format!(
            "matrix dimension {} does not match image alphabet {}",
            matrix.d(),
            img.d
        )));
    }
    let d = img.d;
    // Cumulative confusion rows, one per sent symbol.
    let mut cdf = vec![vec![0.0f64; d]; d];
    for s in 0..d {
        let row = matrix.confusion_row(s)?;
        let mut acc = 0.0;
        for j in 0..d {
            acc += row[j];
            cdf[s][j] = acc;
        }
    }
    let cdf = &cdf;
    let symbols: Vec<u8> = img
        .symbols
        .par_chunks(CORRUPT_CHUNK)
        .enumerate()
        .flat_map_iter(move |(chunk_idx, chunk)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(chunk_idx as u64);
            chunk
                .iter()
                .map(move |&s| {
                    let u: f64 = rng.gen();
                    let row = &cdf[s as usize];
                    row.iter().position(|&c| u < c).unwrap_or(d - 1) as u8
                })
                .collect::<Vec<u8>>()
        })
        .collect();
    SymbolImage::new(img.width, img.height, img.d, symbols)
}
