//! Rarest-first piece selection.

use super::Bitfield;

/// Pick a piece we lack, that is not pending, and that at least one peer
/// holds, minimising the number of peers holding it.
///
/// Ties go to the first candidate scanning upward from `rng_seed % n`,
/// wrapping around; seed 0 is plain lowest-index. The result is a pure
/// function of the arguments.
pub fn select_next_piece(
    ours: &Bitfield,
    peers: &[Bitfield],
    pending: &Bitfield,
    rng_seed: u64,
) -> Option<usize> {
    let n = ours.len();
    assert!(
        peers.iter().all(|p| p.len() == n) && pending.len() == n,
        "bitfields must share a length"
    );
    let mut availability = vec![0u32; n];
    for p in peers {
        for i in p.iter_set() {
            availability[i] += 1;
        }
    }
    rarest_first(&availability, rng_seed, |i| !ours.has(i) && !pending.has(i))
}

/// Core of [`select_next_piece`] over precomputed availability counts.
/// `wanted` filters candidates; pieces with zero availability never qualify.
pub fn rarest_first(
    availability: &[u32],
    rng_seed: u64,
    mut wanted: impl FnMut(usize) -> bool,
) -> Option<usize> {
    let n = availability.len();
    if n == 0 {
        return None;
    }
    let start = (rng_seed % n as u64) as usize;
    let mut best: Option<(u32, usize)> = None;
    for k in 0..n {
        let i = (start + k) % n;
        let a = availability[i];
        if a == 0 || best.is_some_and(|(b, _)| a >= b) || !wanted(i) {
            continue;
        }
        best = Some((a, i));
        if a == 1 {
            break;
        }
    }
    best.map(|(_, i)| i)
}
