//! Permutation codec for puzzle labels.
//!
//! Permutations of `n` elements are ranked lexicographically via the Lehmer
//! code, so rank 0 is the identity and rank n!-1 is the full reversal. Puzzle
//! class ids append the upside-down flip bit above the permutation ranks:
//! `class = rank + n! * flip`.

use crate::error::{Error, Result};

/// Number of crops in a puzzle.
pub const PUZZLE_PIECES: usize = 4;

/// Permutation count for one flip state.
pub const NUM_PERMS: usize = 24;

fn factorial(n: usize) -> usize {
    (1..=n).product()
}

/// Lexicographic rank of a permutation of `0..n`.
pub fn perm_rank(perm: &[usize]) -> Result<usize> {
    let n = perm.len();
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::config(format!("not a permutation: {perm:?}")));
        }
        seen[p] = true;
    }
    let mut rank = 0usize;
    for i in 0..n {
        let smaller_later = perm[i + 1..].iter().filter(|&&p| p < perm[i]).count();
        rank += smaller_later * factorial(n - 1 - i);
    }
    Ok(rank)
}

/// Permutation of `0..n` with the given lexicographic rank.
pub fn perm_unrank(mut rank: usize, n: usize) -> Result<Vec<usize>> {
    if rank >= factorial(n) {
        return Err(Error::config(format!(
            "rank {rank} out of range for {n} elements"
        )));
    }
    let mut pool: Vec<usize> = (0..n).collect();
    let mut perm = Vec::with_capacity(n);
    for i in 0..n {
        let f = factorial(n - 1 - i);
        let idx = rank / f;
        rank %= f;
        perm.push(pool.remove(idx));
    }
    Ok(perm)
}

/// Puzzle class id from permutation rank and flip state.
pub fn class_id(rank: usize, flipped: bool) -> Result<usize> {
    if rank >= NUM_PERMS {
        return Err(Error::config(format!("permutation rank {rank} out of range")));
    }
    Ok(rank + if flipped { NUM_PERMS } else { 0 })
}

/// Inverse of [`class_id`]: `(rank, flipped)`.
pub fn decode_class(class: usize) -> Result<(usize, bool)> {
    if class >= 2 * NUM_PERMS {
        return Err(Error::config(format!("class id {class} out of range")));
    }
    Ok((class % NUM_PERMS, class >= NUM_PERMS))
}

/// Inverse permutation: `inv[perm[i]] = i`.
pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}
