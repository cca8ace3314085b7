//! De Bruijn cyclic patterns for locating overwritten stack slots.
//!
//! The alphabet is `a..=z`; `width` is the order of the sequence, so every
//! `width`-byte window of a pattern occurs at most once and a pattern holds
//! at most `26^width` bytes.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use crate::error::{Result, ToolError};

pub const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz";
pub const DEFAULT_WIDTH: usize = 4;
/// Longest prefix searched by `cyclic_find` for wide windows.
const SEARCH_LIMIT: usize = 1 << 22;

pub fn capacity(width: usize) -> usize {
    ALPHABET.len().saturating_pow(width as u32)
}

/// First `length` bytes of the de Bruijn sequence B(26, width).
pub fn cyclic(length: usize, width: usize) -> Result<Vec<u8>> {
    let cap = capacity(width);
    if width == 0 || length > cap {
        return Err(ToolError::Capacity { requested: length, capacity: cap });
    }
    let mut gen = Generator { a: vec![0; width + 1], n: width, out: Vec::with_capacity(length), limit: length };
    gen.run(1, 1);
    Ok(gen.out)
}

/// Concatenation of Lyndon words in lexicographic order.
struct Generator {
    a: Vec<usize>,
    n: usize,
    out: Vec<u8>,
    limit: usize,
}

impl Generator {
    fn run(&mut self, t: usize, p: usize) {
        if self.out.len() >= self.limit {
            return;
        }
        if t > self.n {
            if self.n.is_multiple_of(p) {
                for i in 1..=p {
                    if self.out.len() == self.limit {
                        return;
                    }
                    self.out.push(ALPHABET[self.a[i]]);
                }
            }
            return;
        }
        self.a[t] = self.a[t - p];
        self.run(t + 1, p);
        for j in self.a[t - p] + 1..ALPHABET.len() {
            self.a[t] = j;
            self.run(t + 1, t);
        }
    }
}

/// Window offsets of one pattern, keyed by the window packed into a `u64`.
type Index = HashMap<u64, usize>;

fn pack(window: &[u8]) -> u64 {
    window.iter().fold(0, |acc, &b| acc << 8 | b as u64)
}

fn index(width: usize) -> Result<Arc<Index>> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Index>>>> = OnceLock::new();
    let mut cache = CACHE.get_or_init(Default::default).lock().unwrap_or_else(|e| e.into_inner());
    if let Some(idx) = cache.get(&width) {
        return Ok(idx.clone());
    }
    let pattern = cyclic(capacity(width).min(SEARCH_LIMIT), width)?;
    let mut idx = Index::with_capacity(pattern.len());
    for (o, w) in pattern.windows(width).enumerate() {
        idx.entry(pack(w)).or_insert(o);
    }
    let idx = Arc::new(idx);
    cache.insert(width, idx.clone());
    Ok(idx)
}

/// Offset of `window` in the pattern of the given width.
pub fn cyclic_find(window: &[u8], width: usize) -> Result<usize> {
    if width == 0 || width > 8 || window.len() != width || !window.iter().all(|b| ALPHABET.contains(b)) {
        return Err(ToolError::NotInPattern);
    }
    index(width)?.get(&pack(window)).copied().ok_or(ToolError::NotInPattern)
}

/// Offset of the little-endian bytes of `value`, using its low `width` bytes.
pub fn cyclic_find_value(value: u64, width: usize) -> Result<usize> {
    let bytes = value.to_le_bytes();
    cyclic_find(&bytes[..width.min(8)], width)
}
