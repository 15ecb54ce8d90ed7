//! Random hyperparameter search ranked by validation FAUC.

use std::ops::RangeInclusive;

use ddtr_core::data::AnnotatedImage;
use ddtr_core::metrics::fauc;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::eval::predict;
use crate::train::train;
use crate::HarnessError;

/// Sampling ranges. Learning rate and weight decay are sampled log-uniformly
/// between the given base-10 exponents; the rest uniformly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSpace {
    pub lr_exponent: (f64, f64),
    pub weight_decay_exponent: (f64, f64),
    pub backbone_lr_scale: (f64, f64),
    pub num_queries: (usize, usize),
    pub focal_alpha: (f64, f64),
    pub focal_gamma: (f64, f64),
    pub loss_coefficient: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            lr_exponent: (-5.5, -3.0),
            weight_decay_exponent: (-6.0, -3.0),
            backbone_lr_scale: (0.01, 1.0),
            num_queries: (10, 200),
            focal_alpha: (0.0, 1.0),
            focal_gamma: (0.0, 3.0),
            loss_coefficient: (0.0, 1.0),
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

impl SearchSpace {
    /// `base` with every searched hyperparameter replaced by a fresh sample.
    pub fn sample(&self, base: &ExperimentConfig, rng: &mut ChaCha8Rng) -> ExperimentConfig {
        let mut c = base.clone();
        c.training.lr = 10f64.powf(uniform(rng, self.lr_exponent));
        c.training.weight_decay = 10f64.powf(uniform(rng, self.weight_decay_exponent));
        c.training.backbone_lr_scale = uniform(rng, self.backbone_lr_scale);
        c.model.num_queries = rng.gen_range(RangeInclusive::new(self.num_queries.0, self.num_queries.1));
        c.model.loss.focal_alpha = uniform(rng, self.focal_alpha);
        c.model.loss.focal_gamma = uniform(rng, self.focal_gamma);
        c.model.loss.cls = uniform(rng, self.loss_coefficient);
        c.model.loss.l1 = uniform(rng, self.loss_coefficient);
        c.model.loss.giou = uniform(rng, self.loss_coefficient);
        c
    }

    /// Whether `c` lies inside every range.
    pub fn contains(&self, c: &ExperimentConfig) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| v >= lo && v <= hi;
        let t = &c.training;
        let l = &c.model.loss;
        within(t.lr.log10(), self.lr_exponent)
            && within(t.weight_decay.log10(), self.weight_decay_exponent)
            && within(t.backbone_lr_scale, self.backbone_lr_scale)
            && (self.num_queries.0..=self.num_queries.1).contains(&c.model.num_queries)
            && within(l.focal_alpha, self.focal_alpha)
            && within(l.focal_gamma, self.focal_gamma)
            && [l.cls, l.l1, l.giou].iter().all(|&w| within(w, self.loss_coefficient))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchEntry {
    pub trial: usize,
    pub config: ExperimentConfig,
    /// Validation FAUC, `None` when undefined or when training failed.
    pub fauc: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    pub best: ExperimentConfig,
    /// Sorted by descending FAUC, ties and failures by trial index.
    pub leaderboard: Vec<SearchEntry>,
}

/// Orders entries by descending FAUC (undefined last), then by trial index.
pub fn rank(entries: &mut [SearchEntry]) {
    entries.sort_by(|a, b| {
        let key = |e: &SearchEntry| e.fauc.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a)).then(a.trial.cmp(&b.trial))
    });
}

/// Samples `trials` configurations around `base`, trains each with the first
/// seed of `base`, and ranks them by FAUC on `validation`. A trial whose
/// training diverges stays on the leaderboard with its error.
pub fn hp_search(
    base: &ExperimentConfig,
    space: &SearchSpace,
    trials: usize,
    search_seed: u64,
    train_images: &[AnnotatedImage],
    validation: &[AnnotatedImage],
) -> Result<SearchOutcome, HarnessError> {
    if trials == 0 {
        return Err(HarnessError::Config("search needs at least one trial".into()));
    }
    base.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(search_seed);
    let configs: Vec<ExperimentConfig> = (0..trials).map(|_| space.sample(base, &mut rng)).collect();
    let seed = base.seeds[0];
    let results = crate::ablate::run_parallel(trials, crate::ablate::job_count(), |i| {
        let cfg = &configs[i];
        let run = || -> Result<Option<f64>, HarnessError> {
            let out = train(cfg, train_images, seed)?;
            let preds = predict(&out.model, validation)?;
            let evals = ddtr_core::EvalSet::from_records(validation, &preds, cfg.eval_class)?;
            Ok(fauc(&evals, 1.0).ok())
        };
        run()
    });
    let mut leaderboard: Vec<SearchEntry> = configs
        .into_iter()
        .zip(results)
        .enumerate()
        .map(|(trial, (config, r))| {
            let (fauc, error) = match r {
                Ok(f) => (f, None),
                Err(e) => (None, Some(e.to_string())),
            };
            SearchEntry { trial, config, fauc, error }
        })
        .collect();
    rank(&mut leaderboard);
    Ok(SearchOutcome { best: leaderboard[0].config.clone(), leaderboard })
}
