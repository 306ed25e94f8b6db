//! T5-style bidirectional relative position buckets.

/// Bucket of the offset `key − query`.
///
/// Half of the buckets hold non-positive offsets and half positive ones. Within
/// each half, the first quarter of all buckets are exact distances and the rest
/// grow logarithmically up to `max_distance`, beyond which everything shares
/// the last bucket.
pub fn relative_bucket(offset: i64, num_buckets: usize, max_distance: usize) -> usize {
    let half = num_buckets / 2;
    let base = if offset > 0 { half } else { 0 };
    let n = offset.unsigned_abs() as usize;
    let max_exact = half / 2;
    if n < max_exact {
        return base + n;
    }
    let ratio = (n as f64 / max_exact as f64).ln() / (max_distance as f64 / max_exact as f64).ln();
    let large = max_exact + (ratio * (half - max_exact) as f64) as usize;
    base + large.min(half - 1)
}

/// Row-major `len × len` bucket indices, entry `(i, j)` for query `i` and key `j`.
pub fn bucket_grid(len: usize, num_buckets: usize, max_distance: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(len * len);
    for i in 0..len {
        for j in 0..len {
            out.push(relative_bucket(j as i64 - i as i64, num_buckets, max_distance));
        }
    }
    out
}
