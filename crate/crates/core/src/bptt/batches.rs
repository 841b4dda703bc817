use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Start offsets of the non-overlapping chunks covering `series_len`; a
/// remainder shorter than `chunk_length` is dropped.
pub fn chunk_starts(series_len: usize, chunk_length: usize) -> Vec<usize> {
    (0..series_len / chunk_length).map(|i| i * chunk_length).collect()
}

/// Shuffles chunk indices `0..n_chunks` with `epoch_seed` and groups them into
/// batches of `batch_size`. The final batch may be smaller.
pub fn make_batches(n_chunks: usize, batch_size: usize, epoch_seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n_chunks).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}
