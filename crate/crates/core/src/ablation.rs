//! Component ablation: the full method against the single-branch baseline
//! with every toggle off, and against the same method with DCML disabled.

use crate::config::RunConfig;
use crate::error::Result;
use crate::run::{evaluate, train_model, FeatureSource};

/// The three arms derived from one base configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationArms {
    pub full: RunConfig,
    pub baseline: RunConfig,
    pub no_dcml: RunConfig,
}

impl AblationArms {
    pub fn from_base(full: RunConfig) -> Result<Self> {
        let mut baseline = full.clone();
        baseline.apply_overrides(&[
            "model.k=1",
            "toggles.enable_dymain=false",
            "toggles.enable_dcml=false",
            "toggles.enable_pmoc=false",
        ])?;
        baseline.schedules.periods = vec![baseline.schedules.epochs];
        let mut no_dcml = full.clone();
        no_dcml.losses.w3 = 0.0;
        Ok(Self {
            full,
            baseline,
            no_dcml,
        })
    }
}

/// Held-out-domain scores of one trained arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmScore {
    pub rank1: f64,
    pub map: f64,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Set when training or evaluation failed; such a run scores zero.
    pub error: Option<String>,
}

/// Trains `config` and evaluates on the withheld domain.
pub fn score_arm(config: &RunConfig) -> ArmScore {
    let run = || -> Result<ArmScore> {
        let (model, records) = train_model(config, |_| {})?;
        let report = evaluate(config, FeatureSource::Model(&model))?;
        Ok(ArmScore {
            rank1: report.heldout.rank1,
            map: report.heldout.map,
            first_loss: records.first().map_or(f64::NAN, |r| r.total),
            last_loss: records.last().map_or(f64::NAN, |r| r.total),
            error: None,
        })
    };
    run().unwrap_or_else(|e| ArmScore {
        rank1: 0.0,
        map: 0.0,
        first_loss: f64::NAN,
        last_loss: f64::NAN,
        error: Some(e.to_string()),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub full: ArmScore,
    pub baseline: ArmScore,
    pub no_dcml: ArmScore,
}

impl SeedResult {
    pub fn full_beats_baseline(&self) -> bool {
        self.full.rank1 >= self.baseline.rank1
    }

    pub fn dcml_helps(&self) -> bool {
        self.full.rank1 >= self.no_dcml.rank1
    }
}

/// Runs all three arms for every seed; the seed drives both the model
/// initialization and the synthetic data.
pub fn run_ablation(arms: &AblationArms, seeds: impl IntoIterator<Item = u64>) -> Vec<SeedResult> {
    let with_seed = |config: &RunConfig, seed: u64| {
        let mut c = config.clone();
        c.model.seed = seed;
        c.data.spec.seed = seed;
        score_arm(&c)
    };
    seeds
        .into_iter()
        .map(|seed| SeedResult {
            seed,
            full: with_seed(&arms.full, seed),
            baseline: with_seed(&arms.baseline, seed),
            no_dcml: with_seed(&arms.no_dcml, seed),
        })
        .collect()
}
