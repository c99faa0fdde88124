//! Flat key-value run configuration. Every key is top-level and scalar so a
//! config file diff reads line by line; the struct converts into the
//! per-module configs on demand.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{CurriculumConfig, Thresholds};
use crate::error::RunError;
use crate::learner::TransformerConfig;
use crate::simlab::{
    AccuracyCurve, CorruptionModel, DecayProfile, DegradationLaw, FrontierProfile, SimProfile,
};
use crate::taskfmt::TemplateSet;

/// One file drives every subcommand; unrelated keys are simply unused. The
/// schema is documented field by field in `RunConfig::schema`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    /// "transformer" or "simulated".
    pub learner: String,
    /// "compact" or "paper-english".
    pub template: String,
    pub model_seed: u64,
    pub data_seed: u64,

    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_width: usize,
    pub max_seq_len: usize,
    pub learning_rate: f64,

    pub start_length: usize,
    pub max_length: usize,
    pub batch_size: usize,
    pub rho: f64,
    pub k: usize,
    pub candidates_per_kind: usize,
    pub supervised_pool: usize,
    pub fast_advance: f64,
    pub slow_advance: f64,
    pub selftrain_trigger: f64,
    pub heldout_size: usize,
    pub eval_every: usize,
    pub max_steps_per_length: usize,
    pub checkpoint_every: u64,

    /// "digit_substitute", "digit_drop" or "carry_flip"; applies to the
    /// simulated learner and both studies.
    pub corruption: String,
    /// Last length the simulated learner answers at its plateau accuracy.
    pub sim_trained_length: usize,
    pub sim_fast_plateau: f64,
    /// Fast accuracy one past the trained length; equal to the plateau for a
    /// flat curve.
    pub sim_fast_next: f64,
    pub sim_slow_step: f64,
    pub sim_seed: u64,

    pub gen_min_length: usize,
    pub gen_max_length: usize,
    pub gen_per_length: usize,

    pub eval_problems: usize,

    pub study_min_length: usize,
    pub study_max_length: usize,
    pub study_trials: u64,
    pub study_fast_plateau: f64,
    pub study_fast_at_length: f64,
    pub study_slow_step: f64,
    pub study_seed: u64,

    pub decay_generations: usize,
    pub decay_length: usize,
    pub decay_trials: u64,
    pub decay_initial_fast: f64,
    pub decay_frontier_ratio: f64,
    pub decay_initial_slow: f64,
    pub decay_lambda: f64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        let curriculum = CurriculumConfig::default();
        let thresholds = Thresholds::default();
        let model = TransformerConfig::default();
        RunConfig {
            out_dir: PathBuf::from("runs/out"),
            learner: "transformer".into(),
            template: "compact".into(),
            model_seed: 0,
            data_seed: 0,
            width: model.width,
            layers: model.layers,
            heads: model.heads,
            ff_width: model.ff_width,
            max_seq_len: model.max_seq_len,
            learning_rate: model.learning_rate,
            start_length: curriculum.start_length,
            max_length: curriculum.max_length,
            batch_size: curriculum.batch_size,
            rho: curriculum.rho,
            k: curriculum.k,
            candidates_per_kind: curriculum.candidates_per_kind,
            supervised_pool: curriculum.supervised_pool,
            fast_advance: thresholds.fast_advance,
            slow_advance: thresholds.slow_advance,
            selftrain_trigger: thresholds.selftrain_trigger,
            heldout_size: thresholds.heldout_size,
            eval_every: thresholds.eval_every,
            max_steps_per_length: thresholds.max_steps_per_length,
            checkpoint_every: 1000,
            corruption: "digit_substitute".into(),
            sim_trained_length: 3,
            sim_fast_plateau: 1.0,
            sim_fast_next: 1.0,
            sim_slow_step: 1.0,
            sim_seed: 0,
            gen_min_length: 1,
            gen_max_length: 3,
            gen_per_length: 1000,
            eval_problems: 100,
            study_min_length: 6,
            study_max_length: 10,
            study_trials: 50_000,
            study_fast_plateau: 1.0,
            study_fast_at_length: 0.9,
            study_slow_step: 0.999,
            study_seed: 0,
            decay_generations: 20,
            decay_length: 8,
            decay_trials: 20_000,
            decay_initial_fast: 0.99,
            decay_frontier_ratio: 0.9,
            decay_initial_slow: 0.999,
            decay_lambda: 10.0,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, RunError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunError::Config(format!("cannot read {}: {e}", path.display())))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<(), RunError> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| RunError::Other(format!("config serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), RunError> {
        let bad = |msg: String| Err(RunError::Config(msg));
        if !matches!(self.learner.as_str(), "transformer" | "simulated") {
            return bad(format!(
                "learner must be \"transformer\" or \"simulated\", got {:?}",
                self.learner
            ));
        }
        let Some(template) = TemplateSet::by_name(&self.template) else {
            return bad(format!("unknown template {:?}", self.template));
        };
        self.corruption_model()?;
        self.curriculum_config()
            .validate()
            .map_err(RunError::Config)?;
        self.transformer_config()
            .validate()
            .map_err(|e| RunError::Config(e.to_string()))?;
        let (prompt, target) = template.max_example_bytes(self.max_length);
        let needed = prompt + target + 1;
        if self.max_seq_len < needed {
            return bad(format!(
                "max_seq_len {} cannot fit a length-{} example ({} tokens with end-of-sequence)",
                self.max_seq_len, self.max_length, needed
            ));
        }
        if self.sim_trained_length == 0 {
            return bad("sim_trained_length must be positive".into());
        }
        self.sim_profile().validate().map_err(RunError::Config)?;
        if self.gen_min_length == 0 || self.gen_min_length > self.gen_max_length {
            return bad(format!(
                "gen lengths must satisfy 1 <= min <= max, got {}..{}",
                self.gen_min_length, self.gen_max_length
            ));
        }
        if self.gen_per_length == 0 {
            return bad("gen_per_length must be positive".into());
        }
        if self.eval_problems == 0 {
            return bad("eval_problems must be positive".into());
        }
        if self.study_min_length < 2 || self.study_min_length > self.study_max_length {
            return bad(format!(
                "study lengths must satisfy 2 <= min <= max, got {}..{}",
                self.study_min_length, self.study_max_length
            ));
        }
        if self.study_trials == 0 {
            return bad("study_trials must be positive".into());
        }
        self.frontier_profile().validate().map_err(RunError::Config)?;
        if self.decay_generations < 2 {
            return bad("decay_generations must be at least 2".into());
        }
        self.decay_profile().validate().map_err(RunError::Config)?;
        if self.checkpoint_every == 0 {
            return bad("checkpoint_every must be positive".into());
        }
        Ok(())
    }

    pub fn template_set(&self) -> TemplateSet {
        TemplateSet::by_name(&self.template).expect("validated template name")
    }

    pub fn corruption_model(&self) -> Result<CorruptionModel, RunError> {
        match self.corruption.as_str() {
            "digit_substitute" => Ok(CorruptionModel::DigitSubstitute),
            "digit_drop" => Ok(CorruptionModel::DigitDrop),
            "carry_flip" => Ok(CorruptionModel::CarryFlip),
            other => Err(RunError::Config(format!("unknown corruption model {other:?}"))),
        }
    }

    pub fn curriculum_config(&self) -> CurriculumConfig {
        CurriculumConfig {
            thresholds: Thresholds {
                fast_advance: self.fast_advance,
                slow_advance: self.slow_advance,
                selftrain_trigger: self.selftrain_trigger,
                heldout_size: self.heldout_size,
                eval_every: self.eval_every,
                max_steps_per_length: self.max_steps_per_length,
            },
            k: self.k,
            rho: self.rho,
            candidates_per_kind: self.candidates_per_kind,
            supervised_pool: self.supervised_pool,
            batch_size: self.batch_size,
            start_length: self.start_length,
            max_length: self.max_length,
            data_seed: self.data_seed,
        }
    }

    pub fn transformer_config(&self) -> TransformerConfig {
        TransformerConfig {
            width: self.width,
            layers: self.layers,
            heads: self.heads,
            ff_width: self.ff_width,
            max_seq_len: self.max_seq_len,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            seed: self.model_seed,
            ..TransformerConfig::default()
        }
    }

    pub fn sim_profile(&self) -> SimProfile {
        SimProfile {
            fast_accuracy: sim_curve(
                self.sim_trained_length,
                self.sim_fast_plateau,
                self.sim_fast_next,
            ),
            slow_step_accuracy: AccuracyCurve::Constant {
                p: self.sim_slow_step,
            },
            corruption: self.corruption_model().expect("validated corruption"),
            seed: self.sim_seed,
        }
    }

    pub fn frontier_profile(&self) -> FrontierProfile {
        FrontierProfile {
            fast_plateau: self.study_fast_plateau,
            fast_at_length: self.study_fast_at_length,
            slow_step: self.study_slow_step,
            corruption: self.corruption_model().expect("validated corruption"),
            seed: self.study_seed,
        }
    }

    pub fn decay_profile(&self) -> DecayProfile {
        DecayProfile {
            length: self.decay_length,
            trials_per_generation: self.decay_trials,
            initial_fast_plateau: self.decay_initial_fast,
            frontier_ratio: self.decay_frontier_ratio,
            initial_slow_step: self.decay_initial_slow,
            law: DegradationLaw::Linear {
                lambda: self.decay_lambda,
            },
            k: self.k,
            corruption: self.corruption_model().expect("validated corruption"),
            seed: self.study_seed,
        }
    }

    pub fn study_lengths(&self) -> Vec<usize> {
        (self.study_min_length..=self.study_max_length).collect()
    }

    /// The documented schema: the default config rendered with every key
    /// present, as printed by `selfadd inspect --schema`.
    pub fn schema() -> String {
        let header = "\
# selfadd run configuration. All keys are optional; absent keys take the
# defaults shown here. One file drives every subcommand (gen, run, eval,
# simulate); keys a subcommand does not use are ignored by it.
";
        let body = toml::to_string_pretty(&RunConfig::default()).expect("default serializes");
        format!("{header}\n{body}")
    }
}

fn sim_curve(trained: usize, plateau: f64, next: f64) -> AccuracyCurve {
    if (next - plateau).abs() < f64::EPSILON {
        AccuracyCurve::Constant { p: plateau }
    } else {
        AccuracyCurve::frontier(trained, plateau, next)
    }
}
