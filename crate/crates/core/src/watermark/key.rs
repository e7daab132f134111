use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeyKind {
    /// One `1` per row: each bit rides on a single parameter.
    Direct,
    /// One `+1` and one `−1` per row: each bit rides on a difference.
    Diff,
    /// I.i.d. standard normal entries.
    Random,
}

impl KeyKind {
    pub const ALL: [KeyKind; 3] = [KeyKind::Direct, KeyKind::Diff, KeyKind::Random];

    pub fn name(self) -> &'static str {
        match self {
            KeyKind::Direct => "direct",
            KeyKind::Diff => "diff",
            KeyKind::Random => "random",
        }
    }

    fn stream(self) -> u64 {
        match self {
            KeyKind::Direct => 1,
            KeyKind::Diff => 2,
            KeyKind::Random => 3,
        }
    }
}

/// Secret `T×M` projection matrix, fully determined by `(kind, seed, T, M)`.
#[derive(Clone, Debug, PartialEq)]
pub struct WatermarkKey {
    kind: KeyKind,
    seed: u64,
    bits: usize,
    len: usize,
    matrix: Vec<f64>,
}

/// Realizes a key matrix.
///
/// `direct` and `diff` draw their `+1` columns from a stream of seeded
/// permutations of `0..M`, so no column repeats across rows while `T ≤ M`;
/// beyond that the stream restarts with a fresh permutation. The `−1`
/// column of a `diff` row is drawn uniformly from the remaining `M − 1`
/// columns.
pub fn make_key(kind: KeyKind, seed: u64, bits: usize, len: usize) -> Result<WatermarkKey> {
    if bits == 0 || len == 0 {
        return Err(Error::config("watermark keys need T >= 1 and M >= 1"));
    }
    if kind == KeyKind::Diff && len < 2 {
        return Err(Error::config(format!(
            "a diff key needs M >= 2, got M = {len}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(kind.stream());
    let mut matrix = vec![0.0; bits * len];
    match kind {
        KeyKind::Random => {
            for x in matrix.iter_mut() {
                *x = StandardNormal.sample(&mut rng);
            }
        }
        KeyKind::Direct | KeyKind::Diff => {
            let mut perm: Vec<usize> = (0..len).collect();
            let mut cursor = len;
            for row in matrix.chunks_mut(len) {
                if cursor == len {
                    perm.shuffle(&mut rng);
                    cursor = 0;
                }
                let plus = perm[cursor];
                cursor += 1;
                row[plus] = 1.0;
                if kind == KeyKind::Diff {
                    let mut minus = rng.random_range(0..len - 1);
                    if minus >= plus {
                        minus += 1;
                    }
                    row[minus] = -1.0;
                }
            }
        }
    }
    Ok(WatermarkKey {
        kind,
        seed,
        bits,
        len,
        matrix,
    })
}

impl WatermarkKey {
    pub fn kind(&self) -> KeyKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// `T`, the number of message bits.
    pub fn bits(&self) -> usize {
        self.bits
    }

    /// `M`, the length of the flattened target.
    pub fn target_len(&self) -> usize {
        self.len
    }

    /// Row-major `T×M` matrix.
    pub fn matrix(&self) -> &[f64] {
        &self.matrix
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.matrix[j * self.len..(j + 1) * self.len]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.matrix.chunks(self.len)
    }
}
