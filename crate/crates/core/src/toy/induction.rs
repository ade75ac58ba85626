// SPDX-License-Identifier: MIT OR Apache-2.0

//! Repeated-sequence task: `<bos> x1..xn x1..xn`. After training, the second
//! half is predictable only by copying, which 2-layer models solve with an
//! induction head.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{accuracy, AdamW, Example, ToyArch, Trainer};
use crate::error::Result;
use crate::model::{Model, ModelHandle, ModelInput, TokenId, Vocabulary};
use crate::trace::{CaptureOptions, HeadId, PositionMap, Trace};

/// First token id used for sequence symbols; lower ids are specials.
const FIRST_SYMBOL: TokenId = 4;

#[derive(Debug, Clone)]
pub struct InductionTask {
    pub arch: ToyArch,
    /// Each sequence draws its half length from `min_half_len..=half_len`,
    /// so the copy offset is not a fixed positional pattern.
    pub min_half_len: usize,
    pub half_len: usize,
    pub batch: usize,
    pub opt: AdamW,
    /// Stop once held-out copy accuracy reaches this value (checked every
    /// 50 steps).
    pub stop_at: Option<f64>,
    /// Extra steps after the main schedule with a group-lasso penalty on
    /// whole heads, which prunes redundant copies of the circuit.
    pub prune_steps: usize,
    pub head_sparsity: f64,
    /// Unpenalized steps after pruning to restore accuracy.
    pub recover_steps: usize,
}

impl Default for InductionTask {
    fn default() -> Self {
        let half_len = 10;
        Self {
            arch: ToyArch {
                vocab_size: 48,
                d_model: 32,
                n_layers: 2,
                n_heads: 4,
                head_dim: 8,
                d_ff: None,
                max_positions: 2 * half_len + 1,
                norm_eps: 1e-6,
            },
            min_half_len: 4,
            half_len,
            batch: 32,
            opt: AdamW {
                lr: 3e-3,
                steps: 1500,
                warmup: 100,
                ..AdamW::default()
            },
            stop_at: None,
            prune_steps: 2500,
            head_sparsity: 0.5,
            recover_steps: 500,
        }
    }
}

/// A probe into a repeated sequence: the input stops at the `k`-th repeated
/// token, the answer is the token after its first occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InductionCase {
    pub tokens: Vec<TokenId>,
    pub target: TokenId,
    /// Position of the target in the first half.
    pub induced_position: usize,
}

impl InductionTask {
    fn symbols(&self, rng: &mut ChaCha8Rng) -> Vec<TokenId> {
        let n = rng.random_range(self.min_half_len..=self.half_len);
        let mut pool: Vec<TokenId> = (FIRST_SYMBOL..self.arch.vocab_size as TokenId).collect();
        pool.shuffle(rng);
        pool.truncate(n);
        pool
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Example {
        let xs = self.symbols(rng);
        let n = xs.len();
        let mut tokens = vec![0];
        tokens.extend(&xs);
        tokens.extend(&xs);
        let targets = (n + 1..2 * n).map(|p| (p, tokens[p + 1])).collect();
        Example {
            tokens,
            bags: Vec::new(),
            targets,
        }
    }

    pub fn sample_case(&self, rng: &mut ChaCha8Rng) -> InductionCase {
        let xs = self.symbols(rng);
        let n = xs.len();
        // k in 1..n: the input ends with the k-th repeated token.
        let k = rng.random_range(1..n);
        let mut tokens = vec![0];
        tokens.extend(&xs);
        tokens.extend(&xs[..k]);
        InductionCase {
            tokens,
            target: xs[k],
            induced_position: k + 1,
        }
    }

    pub fn vocabulary(&self) -> Vocabulary {
        Vocabulary::numbered(self.arch.vocab_size)
    }

    /// Trains a fresh model; returns it with held-out copy accuracy.
    pub fn train(&self, seed: u64) -> Result<(Model, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1d_c0de);
        let mut trainer = Trainer::new(self.arch.clone(), self.opt, seed);
        let probe: Vec<Example> = (0..64).map(|_| self.sample(&mut rng)).collect();
        for step in 0..self.opt.steps {
            let batch: Vec<Example> = (0..self.batch).map(|_| self.sample(&mut rng)).collect();
            trainer.step(&batch);
            if let Some(goal) = self.stop_at {
                if step % 50 == 49 && accuracy(&self.arch, &trainer.params, &probe) >= goal {
                    break;
                }
            }
        }
        trainer.head_sparsity = self.head_sparsity;
        for _ in 0..self.prune_steps {
            let batch: Vec<Example> = (0..self.batch).map(|_| self.sample(&mut rng)).collect();
            trainer.step(&batch);
        }
        trainer.head_sparsity = 0.0;
        for _ in 0..self.recover_steps {
            let batch: Vec<Example> = (0..self.batch).map(|_| self.sample(&mut rng)).collect();
            trainer.step(&batch);
        }
        let held_out: Vec<Example> = (0..128).map(|_| self.sample(&mut rng)).collect();
        let acc = accuracy(&self.arch, &trainer.params, &held_out);
        let model = trainer.params.to_model(
            &self.arch,
            self.vocabulary(),
            &format!("toy-induction-s{seed}"),
            None,
        )?;
        Ok((model, acc))
    }
}

pub fn trace_cases(handle: &ModelHandle, cases: &[InductionCase]) -> Result<Vec<Trace>> {
    cases
        .iter()
        .map(|c| {
            handle.run_traced(
                &ModelInput::text(c.tokens.clone()),
                &PositionMap::text(c.tokens.len()),
                CaptureOptions::default(),
            )
        })
        .collect()
}

/// Head whose last-position attention lands most on the induced position,
/// averaged over cases. Uses attention only, never the attribution scores.
pub fn max_attention_head(traces: &[Trace], cases: &[InductionCase]) -> Result<HeadId> {
    let first = &traces[0];
    let mut best = (HeadId::new(0, 0), f64::NEG_INFINITY);
    for head in first.heads() {
        let mut sum = 0.0;
        for (t, c) in traces.iter().zip(cases) {
            sum += f64::from(t.attention(head)?[c.induced_position]);
        }
        let mean = sum / traces.len() as f64;
        if mean > best.1 {
            best = (head, mean);
        }
    }
    Ok(best.0)
}
