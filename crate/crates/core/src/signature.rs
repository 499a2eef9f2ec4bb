//! Sign signatures: activation maps binarized to one bit per element and
//! compared with XOR/popcount Hamming distances.

use std::fs;
use std::path::Path;

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const SIGNATURE_MAGIC: [u8; 4] = *b"FVSG";

const WORD_BITS: usize = 64;

/// Bit-packed sign vector of an activation map. Bit i is 1 iff element i
/// was strictly positive; pad bits beyond `bit_len` are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Signature {
    words: Vec<u64>,
    bit_len: usize,
}

impl Signature {
    pub fn from_bits(bits: impl IntoIterator<Item = bool>) -> Result<Self> {
        let mut words = Vec::new();
        let mut bit_len = 0;
        for (i, b) in bits.into_iter().enumerate() {
            if i % WORD_BITS == 0 {
                words.push(0);
            }
            if b {
                *words.last_mut().unwrap() |= 1u64 << (i % WORD_BITS);
            }
            bit_len = i + 1;
        }
        if bit_len == 0 {
            return Err(Error::EmptyInput("signature must hold at least one bit"));
        }
        Ok(Signature { words, bit_len })
    }

    pub fn bit_len(&self) -> usize {
        self.bit_len
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bit(&self, i: usize) -> bool {
        assert!(i < self.bit_len, "bit index out of range");
        self.words[i / WORD_BITS] >> (i % WORD_BITS) & 1 == 1
    }

    /// Count of set bits.
    pub fn popcount(&self) -> u64 {
        self.words.iter().map(|w| w.count_ones() as u64).sum()
    }
}

/// Binarizes an activation map: bit = 1 iff the value is strictly positive,
/// so zeros land on the same side as ReLU's dead region.
pub fn binarize<S: Scalar>(activation: &Tensor<S>) -> Result<Signature> {
    if activation.is_empty() {
        return Err(Error::EmptyInput("cannot binarize an empty tensor"));
    }
    activation.check_finite()?;
    let bit_len = activation.len();
    let mut words = vec![0u64; bit_len.div_ceil(WORD_BITS)];
    for (i, v) in activation.data().iter().enumerate() {
        if *v > S::ZERO {
            words[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
        }
    }
    Ok(Signature { words, bit_len })
}

/// Hamming distance via XOR/popcount over packed words. Pad bits are zero
/// in both operands and cannot contribute.
pub fn hamming(a: &Signature, b: &Signature) -> Result<u64> {
    if a.bit_len != b.bit_len {
        return Err(Error::BitLenMismatch {
            left: a.bit_len,
            right: b.bit_len,
        });
    }
    Ok(a.words
        .iter()
        .zip(b.words.iter())
        .map(|(x, y)| (x ^ y).count_ones() as u64)
        .sum())
}

/// Bit-by-bit reference implementation, kept as the slow exactness baseline
/// for the benchmark command.
pub fn hamming_naive(a: &Signature, b: &Signature) -> Result<u64> {
    if a.bit_len != b.bit_len {
        return Err(Error::BitLenMismatch {
            left: a.bit_len,
            right: b.bit_len,
        });
    }
    let mut count = 0;
    for i in 0..a.bit_len {
        if a.bit(i) != b.bit(i) {
            count += 1;
        }
    }
    Ok(count)
}

// ---------------------------------------------------------------------------
// Signature dump file
// ---------------------------------------------------------------------------

/// Writes per-frame signatures: magic "FVSG", bit_len u32, frame count u32,
/// then packed words little-endian, frame by frame.
pub fn write_signatures(signatures: &[Signature], path: &Path) -> Result<()> {
    if signatures.is_empty() {
        return Err(Error::EmptyInput("no signatures to write"));
    }
    let bit_len = signatures[0].bit_len;
    for s in signatures {
        if s.bit_len != bit_len {
            return Err(Error::BitLenMismatch {
                left: bit_len,
                right: s.bit_len,
            });
        }
    }
    let mut out = Vec::new();
    out.extend_from_slice(&SIGNATURE_MAGIC);
    out.extend_from_slice(&(bit_len as u32).to_le_bytes());
    out.extend_from_slice(&(signatures.len() as u32).to_le_bytes());
    for s in signatures {
        for w in &s.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_signatures(path: &Path) -> Result<Vec<Signature>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || bytes[..4] != SIGNATURE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: SIGNATURE_MAGIC,
        });
    }
    let bit_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bit_len == 0 {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            offset: 4,
            message: "bit_len must be positive".into(),
        });
    }
    let words_per = bit_len.div_ceil(WORD_BITS);
    let needed = 12 + frames * words_per * 8;
    if bytes.len() != needed {
        return Err(Error::Truncated {
            path: path.to_path_buf(),
            offset: bytes.len().min(needed),
            needed,
            available: bytes.len(),
        });
    }
    let mut out = Vec::with_capacity(frames);
    let mut off = 12;
    for _ in 0..frames {
        let mut words = Vec::with_capacity(words_per);
        for _ in 0..words_per {
            words.push(u64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        out.push(Signature { words, bit_len });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cross-block consistency
// ---------------------------------------------------------------------------

/// Adjacent-frame distances per block tap, with rank correlations between
/// consecutive blocks. `None` correlation marks a degenerate (zero-variance)
/// distance sequence.
#[derive(Debug, Clone)]
pub struct BlockConsistencyReport {
    pub per_block: Vec<Vec<u64>>,
    pub rank_correlations: Vec<Option<f64>>,
    pub degenerate: bool,
}

/// Builds the report from per-block, per-frame signatures.
pub fn block_consistency(
    per_block_signatures: &[Vec<Signature>],
) -> Result<BlockConsistencyReport> {
    if per_block_signatures.len() < 2 {
        return Err(Error::InvalidConfig(
            "block consistency needs at least two blocks".into(),
        ));
    }
    let mut per_block = Vec::with_capacity(per_block_signatures.len());
    for sigs in per_block_signatures {
        let mut dists = Vec::with_capacity(sigs.len().saturating_sub(1));
        for pair in sigs.windows(2) {
            dists.push(hamming(&pair[0], &pair[1])?);
        }
        per_block.push(dists);
    }
    let mut rank_correlations = Vec::new();
    let mut degenerate = false;
    for pair in per_block.windows(2) {
        let rho = spearman(&pair[0], &pair[1]);
        if rho.is_none() {
            degenerate = true;
        }
        rank_correlations.push(rho);
    }
    Ok(BlockConsistencyReport {
        per_block,
        rank_correlations,
        degenerate,
    })
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// sequence has zero variance.
pub fn spearman(a: &[u64], b: &[u64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(values: &[u64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by_key(|&i| values[i]);
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation; `None` for degenerate (zero-variance) inputs.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return None;
    }
    Some(cov / (va * vb).sqrt())
}
