use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Environment variable capping the worker threads used for evaluation.
pub const THREADS_ENV: &str = "SPECTRAL_FORECASTER_THREADS";

/// Builds a rayon pool sized by `SPECTRAL_FORECASTER_THREADS` (all cores if unset).
pub fn thread_pool() -> rayon::ThreadPool {
    let threads = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .expect("thread pool")
}

/// 64-bit FNV-1a, used to derive stable per-name seeds.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// RNG stream determined by `(seed, label)` alone, so initialization of one
/// parameter does not depend on which other parameters exist.
pub fn stream_rng(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(label.as_bytes()).rotate_left(17))
}
