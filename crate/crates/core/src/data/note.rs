// Frozen stand-in for a pretrained clinical-note encoder: every token id maps
// to a fixed unit-norm Gaussian direction seeded from a hash of the id.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::generator::splitmix64;
use crate::tensor::Tensor;

pub const NOTE_SALT: u64 = 0x6e6f_7465_5f65_6d62;

/// Unit-norm direction for one token id.
pub fn note_token_vector(token: u32, d_note: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(token as u64 ^ NOTE_SALT));
    let v: Vec<f64> = (0..d_note).map(|_| rng.sample(StandardNormal)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

/// `Σ v_token / sqrt(count)`; zero vector for an empty note.
pub fn note_embed(tokens: &[u32], d_note: usize) -> Tensor {
    let mut out = vec![0.0; d_note];
    for &tok in tokens {
        for (o, v) in out.iter_mut().zip(note_token_vector(tok, d_note)) {
            *o += v;
        }
    }
    if !tokens.is_empty() {
        let s = (tokens.len() as f64).sqrt();
        out.iter_mut().for_each(|v| *v /= s);
    }
    Tensor::from_parts(vec![d_note], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_note_is_zero() {
        assert!(note_embed(&[], 8).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn order_does_not_matter() {
        let a = note_embed(&[3, 7, 11], 16);
        let b = note_embed(&[11, 3, 7], 16);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn two_tokens_from_hash_construction() {
        // rebuild v3 and v7 straight from the seeding rule
        let rebuild = |id: u64| {
            let mut x = (id ^ NOTE_SALT).wrapping_add(0x9e37_79b9_7f4a_7c15);
            x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
            x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
            x ^= x >> 31;
            let mut rng = ChaCha8Rng::seed_from_u64(x);
            let v: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
            let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a / n).collect::<Vec<f64>>()
        };
        let (v3, v7) = (rebuild(3), rebuild(7));
        let e = note_embed(&[3, 7], 8);
        for i in 0..8 {
            assert!((e.data()[i] - (v3[i] + v7[i]) / 2f64.sqrt()).abs() < 1e-15);
        }
        let n: f64 = v3.iter().map(|a| a * a).sum();
        assert!((n - 1.0).abs() < 1e-12);
    }
}
