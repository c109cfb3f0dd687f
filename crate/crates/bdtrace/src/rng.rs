//! Counter-style RNG streams and an order-preserving parallel map.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent stream for `(seed, tag, index)`: the seed and tag form the
/// key, the index selects the ChaCha stream.
pub fn stream(seed: u64, tag: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&tag.to_le_bytes());
    key[16..24].copy_from_slice(b"bdtrace\0");
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Stream tags. Paths, subordinators and killing thresholds never share draws.
pub mod tag {
    pub const PATH: u64 = 1;
    pub const SUBORDINATOR: u64 = 2;
    pub const KILL: u64 = 3;
    pub const DOOB: u64 = 4;
    pub const KERNEL: u64 = 5;
    pub const HITTING: u64 = 6;
    pub const APPROX: u64 = 7;
    pub const DIAG: u64 = 8;
    pub const DEMO: u64 = 9;
}

/// Worker count from `BD_TRACE_THREADS`, falling back to the machine.
pub fn default_threads() -> usize {
    std::env::var("BD_TRACE_THREADS")
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// `(0..n).map(f)` evaluated on `threads` workers; output is in index order.
#[cfg(feature = "parallel")]
pub fn par_map<T, F>(n: usize, threads: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    use rayon::prelude::*;
    if threads <= 1 {
        return (0..n).map(f).collect();
    }
    match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
        Err(_) => (0..n).map(f).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, F>(n: usize, _threads: usize, f: F) -> Vec<T>
where
    F: Fn(usize) -> T,
{
    (0..n).map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, tag::PATH, 3).random();
        let b: u64 = stream(7, tag::PATH, 3).random();
        let c: u64 = stream(7, tag::PATH, 4).random();
        let d: u64 = stream(7, tag::KILL, 3).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(a, d);
    }

    #[test]
    fn par_map_keeps_order() {
        let v = par_map(100, 3, |i| i * i);
        assert_eq!(v[7], 49);
        assert_eq!(v.len(), 100);
    }
}
