//! WebAssembly bindings for the static page in `www/`.
//!
//! Three operations: tabulate PMoC learning-rate curves, run one DyMAIN
//! layer on a synthetic multi-domain batch, and compare DCML distances
//! between two feature vectors.

use adp_core::data::{generate_dataset, SyntheticSpec};
use adp_core::losses::{dcml_loss, DcmlMetric};
use adp_core::normalization::{dymain_parts, ChannelStats, DyMainOptions, DyMainVars, DEFAULT_EPS};
use adp_core::schedules::{dump_schedules, BranchScheduleSpec, MainScheduleSpec};
use adp_core::{Tape, Tensor};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

/// Per-epoch rates, row-major `[main, branch1, ..., branchK]` per epoch.
#[wasm_bindgen]
pub struct ScheduleCurves {
    epochs: usize,
    columns: usize,
    values: Vec<f64>,
}

#[wasm_bindgen]
impl ScheduleCurves {
    #[wasm_bindgen(getter)]
    pub fn epochs(&self) -> usize {
        self.epochs
    }

    #[wasm_bindgen(getter)]
    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn values(&self) -> Vec<f64> {
        self.values.clone()
    }
}

/// Main warmup-cosine schedule plus one PMoC branch per period, all over
/// `total_epochs`.
#[wasm_bindgen]
pub fn pmoc_curves(
    total_epochs: usize,
    periods: Vec<usize>,
    eta_min: f64,
    gamma_pow: f64,
    lambda_decay: f64,
    main_eta: f64,
    warmup_epochs: usize,
) -> Result<ScheduleCurves, JsError> {
    let specs: Vec<BranchScheduleSpec> = periods
        .iter()
        .map(|&period| BranchScheduleSpec {
            total_epochs,
            period,
            eta_min,
            gamma_pow,
            lambda_decay,
        })
        .collect();
    let main = MainScheduleSpec {
        eta: main_eta,
        warmup_epochs,
        warmup_start_frac: 0.01,
        floor_frac: 0.002,
        total_epochs,
    };
    let table = dump_schedules(&specs, &main).map_err(js_err)?;
    Ok(ScheduleCurves {
        epochs: table.rows.len(),
        columns: periods.len() + 1,
        values: table.rows.concat(),
    })
}

/// One DyMAIN layer applied to a batch with one sample per domain.
#[wasm_bindgen]
pub struct DyMainView {
    domains: Vec<usize>,
    pairing: Vec<usize>,
    channels: usize,
    input_means: Vec<f64>,
    output_means: Vec<f64>,
    output_stds: Vec<f64>,
}

#[wasm_bindgen]
impl DyMainView {
    /// Source domain of each batch row.
    pub fn domains(&self) -> Vec<usize> {
        self.domains.clone()
    }

    /// Style donor of each batch row.
    pub fn pairing(&self) -> Vec<usize> {
        self.pairing.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn channels(&self) -> usize {
        self.channels
    }

    /// Row-major `(N, d)` channel means before normalization.
    pub fn input_means(&self) -> Vec<f64> {
        self.input_means.clone()
    }

    pub fn output_means(&self) -> Vec<f64> {
        self.output_means.clone()
    }

    pub fn output_stds(&self) -> Vec<f64> {
        self.output_stds.clone()
    }
}

/// Draws `batch` samples of one identity cycling through the domains of a
/// synthetic dataset and normalizes them with blend weight `alpha` on every
/// channel (`γ = 1`, `β = 0`).
#[wasm_bindgen]
pub fn dymain_demo(
    seed: u64,
    batch: usize,
    style_strength: f64,
    alpha: f64,
    multiply: bool,
) -> Result<DyMainView, JsError> {
    let spec = SyntheticSpec {
        num_ids: 2,
        num_domains: 4,
        samples_per_id_per_domain: batch.div_ceil(4).max(2),
        style_strength,
        seed,
        ..SyntheticSpec::default()
    };
    let dataset = generate_dataset(&spec).map_err(js_err)?;
    let per = spec.samples_per_id_per_domain;
    let rows: Vec<usize> = (0..batch.max(1))
        .map(|i| (i % spec.num_domains) * spec.num_ids * per + i / spec.num_domains)
        .collect();
    let x = dataset.stack(&rows).map_err(js_err)?;
    let d = spec.channels;

    let tape = Tape::new();
    let xv = tape.constant(x);
    let vars = DyMainVars {
        gamma: tape.constant(Tensor::full(vec![d], 1.0).map_err(js_err)?),
        beta: tape.constant(Tensor::zeros(vec![d]).map_err(js_err)?),
        alpha: tape.constant(Tensor::full(vec![d], alpha).map_err(js_err)?),
        eps: DEFAULT_EPS,
    };
    let options = DyMainOptions {
        scale: if multiply {
            adp_core::normalization::StyleScale::Multiply
        } else {
            adp_core::normalization::StyleScale::Divide
        },
        ..DyMainOptions::default()
    };
    let parts = dymain_parts(xv, &vars, options).map_err(js_err)?;
    let blended = parts
        .main
        .scale(alpha)
        .add(parts.plain.scale(1.0 - alpha))
        .map_err(js_err)?;
    let before = ChannelStats::compute(xv, DEFAULT_EPS).map_err(js_err)?;
    let after = ChannelStats::compute(blended, 0.0).map_err(js_err)?;
    Ok(DyMainView {
        domains: rows.iter().map(|&r| dataset.samples[r].domain).collect(),
        pairing: parts.pairing.indices().to_vec(),
        channels: d,
        input_means: before.mu.value().into_data(),
        output_means: after.mu.value().into_data(),
        output_stds: after.sigma.value().into_data(),
    })
}

/// `[chebyshev, manhattan, euclidean]` distances between two vectors, each
/// computed through the DCML loss of a two-branch, one-sample batch.
#[wasm_bindgen]
pub fn dcml_distances(a: Vec<f64>, b: Vec<f64>) -> Result<Vec<f64>, JsError> {
    if a.len() != b.len() || a.is_empty() {
        return Err(JsError::new(&format!(
            "vectors must be non-empty and equally long ({} vs {})",
            a.len(),
            b.len()
        )));
    }
    let d = a.len();
    [
        DcmlMetric::Chebyshev,
        DcmlMetric::Manhattan,
        DcmlMetric::Euclidean,
    ]
    .into_iter()
    .map(|metric| {
        let tape = Tape::new();
        let branches = [
            tape.constant(Tensor::new(vec![1, d], a.clone())?),
            tape.constant(Tensor::new(vec![1, d], b.clone())?),
        ];
        dcml_loss(&branches, metric)?.item()
    })
    .collect::<adp_core::Result<Vec<f64>>>()
    .map_err(js_err)
}
