//! Token sampling and per-position random keys.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Picks a token from `logits`.
///
/// Temperature 0 is greedy with the lowest index winning ties. Otherwise the
/// token is drawn from `softmax(logits / temperature)` with a generator
/// seeded from `rng_state`, so equal inputs always give the same token.
pub fn sample_token(logits: &[f32], temperature: f32, rng_state: u64) -> Result<u32> {
    let mut best = None;
    for (i, &z) in logits.iter().enumerate() {
        if z.is_nan() || z == f32::NEG_INFINITY {
            continue;
        }
        match best {
            Some((_, bz)) if z <= bz => {}
            _ => best = Some((i, z)),
        }
    }
    let (arg, max) = best.ok_or(Error::NoFiniteLogits)?;
    if temperature <= 0.0 || !max.is_finite() {
        return Ok(arg as u32);
    }
    let inv_t = 1.0 / temperature as f64;
    let weights: Vec<f64> = logits
        .iter()
        .map(|&z| {
            if z.is_nan() {
                0.0
            } else {
                ((z as f64 - max as f64) * inv_t).exp()
            }
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = ChaCha8Rng::seed_from_u64(rng_state).random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return Ok(i as u32);
        }
        u -= w;
    }
    Ok(arg as u32)
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random key for the token emitted at `position` of sequence `seq_id`.
///
/// Every decoding mode draws the token at a given position with the same
/// key, which is what makes sampled speculative decoding reproduce sampled
/// vanilla decoding token for token.
pub fn position_key(seed: u64, iteration: u64, seq_id: u64, position: u64) -> u64 {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ iteration);
    h = splitmix64(h ^ seq_id);
    splitmix64(h ^ position)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_and_ties() {
        assert_eq!(sample_token(&[0.0, 3.0, 1.0], 0.0, 1).unwrap(), 1);
        assert_eq!(sample_token(&[2.0, 2.0, 0.0], 0.0, 1).unwrap(), 0);
    }

    #[test]
    fn all_neg_inf_is_an_error() {
        let l = [f32::NEG_INFINITY; 4];
        assert!(matches!(
            sample_token(&l, 1.0, 3),
            Err(Error::NoFiniteLogits)
        ));
    }

    #[test]
    fn masked_entries_are_never_drawn() {
        let l = [f32::NEG_INFINITY, 0.0, f32::NEG_INFINITY, 0.0];
        for s in 0..200 {
            let t = sample_token(&l, 1.0, s).unwrap();
            assert!(t == 1 || t == 3);
        }
    }

    #[test]
    fn keys_differ_by_position() {
        assert_ne!(position_key(1, 0, 0, 5), position_key(1, 0, 0, 6));
        assert_ne!(position_key(1, 0, 0, 5), position_key(1, 0, 1, 5));
        assert_eq!(position_key(1, 2, 3, 4), position_key(1, 2, 3, 4));
    }
}
