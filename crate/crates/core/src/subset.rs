//! Fixed-size subset enumeration over a bitmask universe.
//!
//! Subsets are produced cardinality-major: all singletons, then all pairs,
//! and so on, each layer in increasing numeric order via Gosper's hack.
//! Truncated probability sums stop by simply not entering later layers.

use crate::error::{Error, Result};

/// Largest supported universe (bits of a `u64` minus one spare).
pub const MAX_UNIVERSE: usize = 63;

/// Full enumeration past this many competitors gets expensive.
pub const SOFT_UNIVERSE_LIMIT: usize = 16;

/// Next larger mask with the same popcount, or `None` once it leaves the
/// `universe` low bits.
#[inline]
pub fn next_same_popcount(mask: u64, universe: usize) -> Result<Option<u64>> {
    if mask == 0 {
        return Err(Error::domain("subset mask must be nonzero"));
    }
    if universe > MAX_UNIVERSE {
        return Err(Error::Capacity(format!(
            "universe of {universe} exceeds the {MAX_UNIVERSE}-bit limit"
        )));
    }
    Ok(gosper(mask, universe))
}

#[inline]
pub(crate) fn gosper(mask: u64, universe: usize) -> Option<u64> {
    let c = mask & mask.wrapping_neg();
    let r = mask.checked_add(c)?;
    let next = (((r ^ mask) >> 2) / c) | r;
    (next < (1u64 << universe)).then_some(next)
}

/// Iterator over nonempty subsets of `0..universe`, smallest cardinality
/// first, stopping after `max_cardinality`.
#[derive(Debug, Clone)]
pub struct SubsetCursor {
    universe: usize,
    max_cardinality: usize,
    cardinality: usize,
    mask: u64,
}

impl SubsetCursor {
    pub fn new(universe: usize, max_cardinality: usize) -> Result<Self> {
        if universe > MAX_UNIVERSE {
            return Err(Error::Capacity(format!(
                "universe of {universe} exceeds the {MAX_UNIVERSE}-bit limit"
            )));
        }
        if max_cardinality > universe {
            return Err(Error::domain(format!(
                "max cardinality {max_cardinality} exceeds universe {universe}"
            )));
        }
        Ok(Self {
            universe,
            max_cardinality,
            cardinality: 0,
            mask: 0,
        })
    }

    pub fn universe(&self) -> usize {
        self.universe
    }

    pub fn cardinality(&self) -> usize {
        self.cardinality
    }

    pub fn current_mask(&self) -> u64 {
        self.mask
    }
}

impl Iterator for SubsetCursor {
    type Item = (u64, usize);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cardinality > 0 {
            if let Some(m) = gosper(self.mask, self.universe) {
                self.mask = m;
                return Some((m, self.cardinality));
            }
        }
        if self.cardinality >= self.max_cardinality {
            return None;
        }
        self.cardinality += 1;
        self.mask = (1u64 << self.cardinality) - 1;
        Some((self.mask, self.cardinality))
    }
}

/// Visits every nonempty subset of `0..universe` with at most
/// `max_cardinality` members and returns the number of visits.
pub fn enumerate<F>(universe: usize, max_cardinality: usize, mut visit: F) -> Result<u64>
where
    F: FnMut(u64, usize),
{
    if max_cardinality == 0 {
        return Err(Error::domain("max cardinality must be at least 1"));
    }
    let cursor = SubsetCursor::new(universe, max_cardinality)?;
    let mut count = 0u64;
    for (mask, card) in cursor {
        visit(mask, card);
        count += 1;
    }
    Ok(count)
}

/// Scatters the low bits of `local` onto the set bits of `positions`.
///
/// Maps a subset of competitor indices back to alternative indices when the
/// universe is a sparse availability mask.
#[inline]
pub fn deposit(local: u64, positions: &[usize]) -> u64 {
    let mut out = 0u64;
    let mut m = local;
    while m != 0 {
        let b = m.trailing_zeros() as usize;
        out |= 1u64 << positions[b];
        m &= m - 1;
    }
    out
}
