//! Counting Bloom filter used as a compact buffer summary.
//!
//! Keys are 64-bit packet identities. Counters make removal possible when a
//! batch expires; queries can report false positives but never false
//! negatives, so a peer relying on the summary may wrongly withhold a packet
//! but never sends a duplicate it could have suppressed.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BloomError {
    #[error("bloom filter needs at least one counter and one hash")]
    BadShape,
    #[error("counter saturated; filter is undersized for this load")]
    Saturated,
    #[error("removing a key that is not present")]
    AbsentKey,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountingBloom {
    counters: Vec<u16>,
    hashes: u32,
    hash_seed: u64,
    items: usize,
}

impl CountingBloom {
    pub fn new(m: usize, h: u32, hash_seed: u64) -> Result<CountingBloom, BloomError> {
        if m == 0 || h == 0 {
            return Err(BloomError::BadShape);
        }
        Ok(CountingBloom { counters: vec![0; m], hashes: h, hash_seed, items: 0 })
    }

    /// The h counter slots for a key, by double hashing.
    fn slots(&self, key: u64) -> impl Iterator<Item = usize> + '_ {
        let h1 = splitmix64(self.hash_seed ^ key);
        let h2 = splitmix64(h1) | 1;
        let m = self.counters.len() as u64;
        (0..self.hashes as u64).map(move |i| (h1.wrapping_add(i.wrapping_mul(h2)) % m) as usize)
    }

    pub fn insert(&mut self, key: u64) -> Result<(), BloomError> {
        let slots: Vec<usize> = self.slots(key).collect();
        if slots.iter().any(|&s| self.counters[s] == u16::MAX) {
            return Err(BloomError::Saturated);
        }
        for s in slots {
            self.counters[s] += 1;
        }
        self.items += 1;
        Ok(())
    }

    /// Remove a previously inserted key. Counter state returns exactly to
    /// what it was before the matching insert. Removing a key that was never
    /// inserted is detected only when one of its counters is already zero;
    /// the caller owns the discipline of removing only what it inserted.
    pub fn remove(&mut self, key: u64) -> Result<(), BloomError> {
        let slots: Vec<usize> = self.slots(key).collect();
        if slots.iter().any(|&s| self.counters[s] == 0) {
            return Err(BloomError::AbsentKey);
        }
        for s in slots {
            self.counters[s] -= 1;
        }
        self.items -= 1;
        Ok(())
    }

    /// Membership query; false positives possible, false negatives not.
    pub fn contains(&self, key: u64) -> bool {
        self.slots(key).all(|s| self.counters[s] > 0)
    }

    pub fn items(&self) -> usize {
        self.items
    }

    pub fn counters(&self) -> &[u16] {
        &self.counters
    }

    /// Standard false-positive estimate for `items` inserted keys:
    /// (1 - e^(-h*items/m))^h.
    pub fn false_positive_estimate(&self) -> f64 {
        let m = self.counters.len() as f64;
        let h = self.hashes as f64;
        let n = self.items as f64;
        (1.0 - (-h * n / m).exp()).powf(h)
    }
}
