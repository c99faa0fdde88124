//! The narrow interface every learner implements. Decoding, filtering, and
//! the curriculum talk only to this trait, so the trained transformer and the
//! simulated learner are interchangeable everywhere downstream.

use crate::error::LearnerError;

pub trait CompletionModel {
    /// Autoregressive completion of a prompt. Temperature 0 must be fully
    /// deterministic for a fixed parameter state; generation stops at the
    /// end-of-sequence token or after `max_new_tokens`.
    fn complete(
        &self,
        prompt: &str,
        max_new_tokens: usize,
        temperature: f32,
    ) -> Result<String, LearnerError>;

    /// One optimizer step on token-level cross-entropy over target positions
    /// only. Returns the mean loss. Learners without parameters (the
    /// simulated model) accept the batch and report zero.
    fn train_batch(&mut self, batch: &[(String, String)]) -> Result<f32, LearnerError>;

    /// Completes many prompts. Implementations with batched inference
    /// override this; the default just loops.
    fn complete_batch(
        &self,
        prompts: &[String],
        max_new_tokens: usize,
        temperature: f32,
    ) -> Result<Vec<String>, LearnerError> {
        prompts
            .iter()
            .map(|p| self.complete(p, max_new_tokens, temperature))
            .collect()
    }
}

impl<M: CompletionModel + ?Sized> CompletionModel for &mut M {
    fn complete(
        &self,
        prompt: &str,
        max_new_tokens: usize,
        temperature: f32,
    ) -> Result<String, LearnerError> {
        (**self).complete(prompt, max_new_tokens, temperature)
    }

    fn train_batch(&mut self, batch: &[(String, String)]) -> Result<f32, LearnerError> {
        (**self).train_batch(batch)
    }

    fn complete_batch(
        &self,
        prompts: &[String],
        max_new_tokens: usize,
        temperature: f32,
    ) -> Result<Vec<String>, LearnerError> {
        (**self).complete_batch(prompts, max_new_tokens, temperature)
    }
}
