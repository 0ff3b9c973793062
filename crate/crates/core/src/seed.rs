//! Named sub-seeds. Every random stream is keyed by the run seed, a stream
//! name and a few integer coordinates, so each one can be regenerated on its
//! own (for example when resuming training mid-run).

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// Out of line: inlined into iterator loops with a constant stream name it
// stalls LLVM's loop vectorizer for many minutes.
#[inline(never)]
pub fn derive(seed: u64, stream: &str, coords: &[u64]) -> u64 {
    let mut h = splitmix(seed);
    for b in stream.bytes() {
        h = splitmix(h ^ b as u64);
    }
    for &c in coords {
        h = splitmix(h ^ c);
    }
    h
}
