//! Iterative decoding invariants against mock predictors.

use std::cell::RefCell;

use mgms::masking::{inference_masked_count, MaskedTokens, MASK_SENTINEL};
use mgms::pipeline::{iterative_decode, iterative_decode_with};
use mgms::rng::rng_for;
use mgms::transformer::{TokenLogits, TokenPredictor};
use mgms::Result;

/// Pseudo-random logits that depend on the whole current grid.
struct Hashing {
    side: usize,
    vocab: usize,
    calls: RefCell<usize>,
}

impl TokenPredictor for Hashing {
    fn grid(&self) -> (usize, usize) {
        (self.side, self.side)
    }

    fn vocab(&self) -> usize {
        self.vocab
    }

    fn predict(&self, masked: &MaskedTokens) -> Result<TokenLogits> {
        *self.calls.borrow_mut() += 1;
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for &v in masked.values() {
            h = (h ^ v as u64).wrapping_mul(0x0100_0000_01b3);
        }
        let n = self.side * self.side;
        let values = (0..n * self.vocab)
            .map(|i| {
                h = (h ^ i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15).rotate_left(17);
                (h >> 11) as f64 / (1u64 << 53) as f64 * 6.0
            })
            .collect();
        TokenLogits::new(self.side, self.side, self.vocab, values)
    }
}

/// Identical scores everywhere, so every confidence ties.
struct Flat;

impl TokenPredictor for Flat {
    fn grid(&self) -> (usize, usize) {
        (4, 4)
    }

    fn vocab(&self) -> usize {
        3
    }

    fn predict(&self, _: &MaskedTokens) -> Result<TokenLogits> {
        TokenLogits::new(4, 4, 3, vec![0.0; 48])
    }
}

#[test]
fn schedule_commitment_and_completion() {
    for side in [2, 4, 8, 16] {
        let n = side * side;
        for steps in [1, 2, 4, 8] {
            for (seed, temperature) in [(0, 0.0), (1, 1.0), (2, 2.5)] {
                let p = Hashing { side, vocab: 7, calls: RefCell::new(0) };
                let mut prev = MaskedTokens::fully_masked(n);
                let mut expected_t = steps;
                let grid = iterative_decode_with(&p, steps, temperature, &mut rng_for(seed, "decode"), |t, cur| {
                    assert_eq!(t, expected_t);
                    expected_t -= 1;
                    assert_eq!(cur.masked_count(), inference_masked_count(t - 1, steps, n).unwrap(), "N={n} T={steps} t={t}");
                    for i in 0..n {
                        if !prev.mask()[i] {
                            assert_eq!(cur.values()[i], prev.values()[i], "revealed token changed");
                            assert!(!cur.mask()[i], "revealed token re-masked");
                        }
                        assert_eq!(cur.mask()[i], cur.values()[i] == MASK_SENTINEL);
                    }
                    prev = cur.clone();
                })
                .unwrap();
                assert_eq!(expected_t, 0);
                assert_eq!(*p.calls.borrow(), steps);
                assert_eq!(grid.len(), n);
                assert!(grid.indices().iter().all(|&i| i < 7));
                assert_eq!(grid.indices().iter().map(|&i| i as i64).collect::<Vec<_>>(), prev.values());
            }
        }
    }
}

#[test]
fn single_step_predicts_everything_at_once() {
    let p = Hashing { side: 4, vocab: 5, calls: RefCell::new(0) };
    let mut counts = Vec::new();
    iterative_decode_with(&p, 1, 0.0, &mut rng_for(0, "d"), |_, cur| counts.push(cur.masked_count())).unwrap();
    assert_eq!(counts, vec![0]);
}

#[test]
fn documented_trace_for_sixteen_tokens() {
    let p = Hashing { side: 4, vocab: 5, calls: RefCell::new(0) };
    let mut counts = vec![16];
    iterative_decode_with(&p, 4, 0.0, &mut rng_for(0, "d"), |_, cur| counts.push(cur.masked_count())).unwrap();
    assert_eq!(counts, vec![16, 15, 12, 7, 0]);
}

#[test]
fn ties_reveal_lowest_positions_first() {
    let mut revealed = Vec::new();
    iterative_decode_with(&Flat, 4, 0.0, &mut rng_for(0, "d"), |_, cur| {
        revealed.push(cur.mask().iter().take_while(|&&m| !m).count());
    })
    .unwrap();
    // each step the unmasked prefix grows by exactly the reveal count
    assert_eq!(revealed, vec![1, 4, 9, 16]);
}

#[test]
fn greedy_decoding_is_deterministic() {
    let p = Hashing { side: 8, vocab: 9, calls: RefCell::new(0) };
    let a = iterative_decode(&p, 8, 0.0, &mut rng_for(1, "d")).unwrap();
    let b = iterative_decode(&p, 8, 0.0, &mut rng_for(2, "d")).unwrap();
    assert_eq!(a, b);
    let c = iterative_decode(&p, 8, 1.0, &mut rng_for(3, "d")).unwrap();
    let d = iterative_decode(&p, 8, 1.0, &mut rng_for(3, "d")).unwrap();
    assert_eq!(c, d);
}

#[test]
fn zero_steps_rejected() {
    assert!(iterative_decode(&Flat, 0, 0.0, &mut rng_for(0, "d")).is_err());
}
