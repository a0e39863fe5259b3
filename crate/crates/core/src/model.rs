//! The branched backbone: a shared trunk whose tail blocks are cloned into
//! `k` sibling pathways, each with its own DyMAIN parameters and classifier.
//!
//! Inputs are token sequences `(N, L, d_in)`. They are embedded to width `d`,
//! a learned class token is prepended and learned positional encodings are
//! added. The class-token state after the last block of a branch is that
//! branch's feature.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossConfig};
use crate::normalization::{
    dymain_forward, DyMainOptions, DyMainVars, Pairing, StyleScale, DEFAULT_EPS,
};
use crate::params::{ParamGroup, ParamId, ParamStore, Sgd};
use crate::schedules::{main_lr_at, pmoc_lr_at, BranchScheduleSpec, MainScheduleSpec};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlockKind {
    /// Per-token `linear(d→hd) → relu → linear(hd→d)` plus residual. No
    /// information moves between locations, so without DyMAIN the class
    /// token never sees the input.
    ResidualChannelMlp,
    /// Like [`BlockKind::ResidualChannelMlp`], with the token-mean context
    /// added to the MLP input.
    #[default]
    TokenMixLite,
}

impl BlockKind {
    pub fn name(&self) -> &'static str {
        match self {
            BlockKind::ResidualChannelMlp => "residual_channel_mlp",
            BlockKind::TokenMixLite => "token_mix_lite",
        }
    }
}

impl std::str::FromStr for BlockKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "residual_channel_mlp" => Ok(BlockKind::ResidualChannelMlp),
            "token_mix_lite" => Ok(BlockKind::TokenMixLite),
            other => Err(format!(
                "expected residual_channel_mlp or token_mix_lite, got `{other}`"
            )),
        }
    }
}

/// How branch features are combined at inference.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FuseMode {
    /// Elementwise mean across branches.
    #[default]
    Mean,
    /// Branch features side by side, `(N, k·d)`.
    Concat,
}

impl FuseMode {
    pub fn name(&self) -> &'static str {
        match self {
            FuseMode::Mean => "mean",
            FuseMode::Concat => "concat",
        }
    }
}

impl std::str::FromStr for FuseMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "mean" => Ok(FuseMode::Mean),
            "concat" => Ok(FuseMode::Concat),
            other => Err(format!("expected mean or concat, got `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Channels `d_in` of the raw tokens.
    pub input_dim: usize,
    /// Raw tokens per sample, before the class token.
    pub tokens: usize,
    /// Embedding width `d`.
    pub width: usize,
    pub hidden_mult: usize,
    /// Blocks of the original, unbranched backbone.
    pub trunk_blocks: usize,
    /// Trailing backbone blocks cloned into every branch.
    pub clone_depth: usize,
    /// Branch count `k`.
    pub branches: usize,
    pub classes: usize,
    pub block_kind: BlockKind,
    /// DyMAIN sites, counted back from the last block.
    pub dymain_blocks: usize,
    pub enable_dymain: bool,
    pub style_scale: StyleScale,
    pub eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.clone_depth < 1 {
            return bad("clone_depth must be >= 1".into());
        }
        if self.trunk_blocks < self.clone_depth {
            return bad(format!(
                "clone_depth {} exceeds trunk_blocks {}",
                self.clone_depth, self.trunk_blocks
            ));
        }
        if self.branches < 1 {
            return bad("at least one branch is required".into());
        }
        if self.dymain_blocks > self.trunk_blocks {
            return bad(format!(
                "dymain_blocks {} exceeds trunk_blocks {}",
                self.dymain_blocks, self.trunk_blocks
            ));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.input_dim == 0 || self.tokens == 0 || self.width == 0 || self.hidden_mult == 0 {
            return bad("dimensions must be positive".into());
        }
        Ok(())
    }

    fn shared_blocks(&self) -> usize {
        self.trunk_blocks - self.clone_depth
    }

    /// Whether backbone block `index` (0-based over all trunk_blocks) carries DyMAIN.
    fn has_dymain(&self, index: usize) -> bool {
        self.enable_dymain && index + self.dymain_blocks >= self.trunk_blocks
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 8,
            tokens: 4,
            width: 16,
            hidden_mult: 2,
            trunk_blocks: 3,
            clone_depth: 2,
            branches: 3,
            classes: 20,
            block_kind: BlockKind::TokenMixLite,
            dymain_blocks: 2,
            enable_dymain: true,
            style_scale: StyleScale::Divide,
            eps: DEFAULT_EPS,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
struct DyMainIds {
    gamma: ParamId,
    beta: ParamId,
    alpha: ParamId,
}

#[derive(Clone, Debug)]
struct Block {
    fc1: Linear,
    fc2: Linear,
    dymain: Option<DyMainIds>,
}

#[derive(Clone, Debug)]
struct Branch {
    blocks: Vec<Block>,
    classifier: ParamId,
}

/// Train-time forward uses max-deviance pairing inside DyMAIN; eval-time
/// forward pairs every sample with itself so features do not depend on
/// batch composition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub struct BranchedModel {
    config: ModelConfig,
    params: ParamStore,
    embed: Linear,
    cls_token: ParamId,
    positions: ParamId,
    trunk: Vec<Block>,
    branches: Vec<Branch>,
}

/// Per-branch outputs recorded on a tape.
pub struct BranchOutputs<'t> {
    pub features: Vec<Var<'t>>,
    pub logits: Vec<Var<'t>>,
}

/// Plain-value forward results.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub per_branch_features: Vec<Tensor>,
    pub per_branch_logits: Vec<Tensor>,
    pub fused_feature: Option<Tensor>,
}

struct Init<'a> {
    rng: &'a mut StdRng,
}

impl Init<'_> {
    fn uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Tensor::new(shape, data).expect("init shape")
    }
}

/// Builds the backbone, then clones its last `clone_depth` blocks into `k`
/// branches. Branch tails start bit-identical; classifiers and DyMAIN
/// parameters are created per branch.
pub fn build_branched_model(config: ModelConfig, seed: u64) -> Result<BranchedModel> {
    config.validate()?;
    let mut rng = StdRng::seed_from_u64(seed);
    let mut init = Init { rng: &mut rng };
    let mut params = ParamStore::new();
    let d = config.width;
    let hidden = d * config.hidden_mult;

    let embed = Linear {
        weight: params.insert(
            "embed.weight",
            init.uniform(vec![config.input_dim, d], config.input_dim),
            ParamGroup::Main,
        ),
        bias: params.insert("embed.bias", Tensor::zeros(vec![d])?, ParamGroup::Main),
    };
    let cls_token = params.insert(
        "embed.cls_token",
        init.uniform(vec![d], d),
        ParamGroup::Main,
    );
    let positions = params.insert(
        "embed.positions",
        init.uniform(vec![config.tokens + 1, d], d),
        ParamGroup::Main,
    );

    // Weights of the original unbranched backbone.
    let backbone: Vec<[Tensor; 4]> = (0..config.trunk_blocks)
        .map(|_| {
            [
                init.uniform(vec![d, hidden], d),
                Tensor::zeros(vec![hidden]).expect("shape"),
                init.uniform(vec![hidden, d], hidden),
                Tensor::zeros(vec![d]).expect("shape"),
            ]
        })
        .collect();

    let add_block = |params: &mut ParamStore, prefix: String, index: usize, group: ParamGroup| {
        let [w1, b1, w2, b2] = backbone[index].clone();
        let fc1 = Linear {
            weight: params.insert(format!("{prefix}.fc1.weight"), w1, group),
            bias: params.insert(format!("{prefix}.fc1.bias"), b1, group),
        };
        let fc2 = Linear {
            weight: params.insert(format!("{prefix}.fc2.weight"), w2, group),
            bias: params.insert(format!("{prefix}.fc2.bias"), b2, group),
        };
        let dymain = config.has_dymain(index).then(|| DyMainIds {
            gamma: params.insert(
                format!("{prefix}.dymain.gamma"),
                Tensor::vector(vec![1.0; d]),
                group,
            ),
            beta: params.insert(
                format!("{prefix}.dymain.beta"),
                Tensor::vector(vec![0.0; d]),
                group,
            ),
            alpha: params.insert(
                format!("{prefix}.dymain.alpha"),
                Tensor::vector(vec![0.5; d]),
                group,
            ),
        });
        Block { fc1, fc2, dymain }
    };

    let shared = config.shared_blocks();
    let trunk = (0..shared)
        .map(|i| add_block(&mut params, format!("trunk.{i}"), i, ParamGroup::Main))
        .collect();
    let mut branch_blocks = Vec::with_capacity(config.branches);
    for b in 0..config.branches {
        let blocks = (0..config.clone_depth)
            .map(|j| {
                add_block(
                    &mut params,
                    format!("branch{b}.block{j}"),
                    shared + j,
                    ParamGroup::Branch(b),
                )
            })
            .collect::<Vec<_>>();
        branch_blocks.push(blocks);
    }
    let branches = branch_blocks
        .into_iter()
        .enumerate()
        .map(|(b, blocks)| Branch {
            blocks,
            classifier: params.insert(
                format!("branch{b}.classifier"),
                init.uniform(vec![config.classes, d], d),
                ParamGroup::Branch(b),
            ),
        })
        .collect();

    Ok(BranchedModel {
        config,
        params,
        embed,
        cls_token,
        positions,
        trunk,
        branches,
    })
}

impl BranchedModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    /// Names of the tail-block parameters of branch `b`, in block order.
    pub fn branch_tail_names(&self, b: usize) -> Vec<String> {
        let mut out = Vec::new();
        for block in &self.branches[b].blocks {
            for id in [
                block.fc1.weight,
                block.fc1.bias,
                block.fc2.weight,
                block.fc2.bias,
            ] {
                out.push(self.params.name(id).to_string());
            }
        }
        out
    }

    fn block_forward<'t>(
        &self,
        block: &Block,
        vars: &[Var<'t>],
        x: Var<'t>,
        mode: Mode,
    ) -> Result<Var<'t>> {
        let shape = x.shape();
        let (n, l, d) = (shape[0], shape[1], shape[2]);
        let mut z = x;
        if self.config.block_kind == BlockKind::TokenMixLite {
            z = z.add(z.mean_locations()?.expand_locations(l)?)?;
        }
        let flat = z.reshape(vec![n * l, d])?;
        let h = flat
            .matmul(vars[block.fc1.weight.0])?
            .add(vars[block.fc1.bias.0])?
            .relu()
            .matmul(vars[block.fc2.weight.0])?
            .add(vars[block.fc2.bias.0])?
            .reshape(vec![n, l, d])?;
        let out = x.add(h)?;
        match block.dymain {
            None => Ok(out),
            Some(ids) => {
                let params = DyMainVars {
                    gamma: vars[ids.gamma.0],
                    beta: vars[ids.beta.0],
                    alpha: vars[ids.alpha.0],
                    eps: self.config.eps,
                };
                let options = DyMainOptions {
                    scale: self.config.style_scale,
                    pairing: match mode {
                        Mode::Train => Pairing::MaxDeviance,
                        Mode::Eval => Pairing::SelfOnly,
                    },
                };
                dymain_forward(out, &params, options)
            }
        }
    }

    /// Runs the embedding and trunk once, then every branch on the shared
    /// trunk activation. `vars` must come from [`ParamStore::bind`] or
    /// [`ParamStore::bind_constant`] on this model's parameters.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        vars: &[Var<'t>],
        tokens: &Tensor,
        mode: Mode,
    ) -> Result<BranchOutputs<'t>> {
        let c = &self.config;
        let (n, l) = match *tokens.shape() {
            [n, l, din] if l == c.tokens && din == c.input_dim => (n, l),
            ref s => {
                return Err(Error::ShapeMismatch {
                    op: "embed",
                    lhs: s.to_vec(),
                    rhs: vec![n_or_any(s), c.tokens, c.input_dim],
                })
            }
        };
        if vars.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} bound variables for {} parameters",
                vars.len(),
                self.params.len()
            )));
        }
        let x = tape.constant(tokens.reshape(vec![n * l, c.input_dim])?);
        let mut h = x
            .matmul(vars[self.embed.weight.0])?
            .add(vars[self.embed.bias.0])?
            .reshape(vec![n, l, c.width])?
            .prepend_token(vars[self.cls_token.0])?
            .add(vars[self.positions.0])?;
        for block in &self.trunk {
            h = self.block_forward(block, vars, h, mode)?;
        }
        let mut features = Vec::with_capacity(self.branches.len());
        let mut logits = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            let mut z = h;
            for block in &branch.blocks {
                z = self.block_forward(block, vars, z, mode)?;
            }
            let f = z.select_location(0)?;
            logits.push(f.matmul(vars[branch.classifier.0].transpose()?)?);
            features.push(f);
        }
        Ok(BranchOutputs { features, logits })
    }

    /// Forward pass on plain values. In [`Mode::Eval`] the fused feature is
    /// populated with `fuse`.
    pub fn forward_all_branches(
        &self,
        tokens: &Tensor,
        mode: Mode,
        fuse: FuseMode,
    ) -> Result<ForwardOutput> {
        let tape = Tape::new();
        let vars = self.params.bind_constant(&tape);
        let out = self.forward(&tape, &vars, tokens, mode)?;
        let per_branch_features: Vec<Tensor> = out.features.iter().map(Var::value).collect();
        let per_branch_logits = out.logits.iter().map(Var::value).collect();
        let fused_feature = match mode {
            Mode::Eval => Some(fuse_features(&per_branch_features, fuse)?),
            Mode::Train => None,
        };
        Ok(ForwardOutput {
            per_branch_features,
            per_branch_logits,
            fused_feature,
        })
    }

    /// Fused eval-mode features for many samples, in chunks of `chunk`.
    pub fn embed_samples(&self, tokens: &Tensor, fuse: FuseMode, chunk: usize) -> Result<Tensor> {
        let n = tokens.shape()[0];
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk.max(1)).min(n);
            let batch = tokens.select_rows(&(start..end).collect::<Vec<_>>())?;
            let out = self.forward_all_branches(&batch, Mode::Eval, fuse)?;
            parts.push(out.fused_feature.expect("eval output is fused"));
            start = end;
        }
        Tensor::stack_rows(&parts)
    }
}

fn n_or_any(shape: &[usize]) -> usize {
    shape.first().copied().unwrap_or(0)
}

/// Elementwise mean of equally shaped branch features.
pub fn aggregate_features(per_branch: &[Tensor]) -> Result<Tensor> {
    let first = per_branch
        .first()
        .ok_or_else(|| Error::InvalidArgument("no branch features to aggregate".into()))?;
    let mut sum = vec![0.0; first.numel()];
    for f in per_branch {
        if f.shape() != first.shape() {
            return Err(Error::ShapeMismatch {
                op: "aggregate_features",
                lhs: first.shape().to_vec(),
                rhs: f.shape().to_vec(),
            });
        }
        for (s, v) in sum.iter_mut().zip(f.data()) {
            *s += v;
        }
    }
    let k = per_branch.len() as f64;
    Tensor::new(
        first.shape().to_vec(),
        sum.into_iter().map(|s| s / k).collect(),
    )
}

pub fn fuse_features(per_branch: &[Tensor], mode: FuseMode) -> Result<Tensor> {
    match mode {
        FuseMode::Mean => aggregate_features(per_branch),
        FuseMode::Concat => {
            let first = aggregate_features(per_branch)?;
            let n = first.shape()[0];
            let mut data = Vec::with_capacity(first.numel() * per_branch.len());
            for i in 0..n {
                for f in per_branch {
                    data.extend_from_slice(f.row(i));
                }
            }
            Tensor::new(vec![n, data.len() / n], data)
        }
    }
}

/// Learning rate of every parameter group for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupRates {
    pub main: f64,
    pub branches: Vec<f64>,
}

impl GroupRates {
    pub fn for_group(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Main => self.main,
            ParamGroup::Branch(b) => self.branches[b],
        }
    }
}

/// Schedules driving the parameter groups.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSchedules {
    pub main: MainScheduleSpec,
    /// One PMoC spec per branch; `None` puts every branch on the main schedule.
    pub branches: Option<Vec<BranchScheduleSpec>>,
    pub num_branches: usize,
}

impl TrainSchedules {
    pub fn rates_at(&self, epoch: usize) -> Result<GroupRates> {
        let main = main_lr_at(&self.main, epoch)?;
        let branches = match &self.branches {
            Some(specs) => specs
                .iter()
                .map(|s| pmoc_lr_at(s, epoch))
                .collect::<Result<Vec<_>>>()?,
            None => vec![main; self.num_branches],
        };
        Ok(GroupRates { main, branches })
    }
}

/// Loss values and learning rates of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub total: f64,
    pub ce: f64,
    pub triplet: f64,
    pub dcml: f64,
    pub rates: GroupRates,
}

/// One forward, one backward and one SGD update with per-group rates.
pub fn train_step(
    model: &mut BranchedModel,
    optimizer: &mut Sgd,
    tokens: &Tensor,
    labels: &[usize],
    epoch: usize,
    schedules: &TrainSchedules,
    loss: &LossConfig,
) -> Result<StepRecord> {
    let rates = schedules.rates_at(epoch)?;
    if rates.branches.len() != model.num_branches() {
        return Err(Error::InvalidArgument(format!(
            "{} branch schedules for {} branches",
            rates.branches.len(),
            model.num_branches()
        )));
    }
    let (terms, grads) = {
        let tape = Tape::new();
        let vars = model.params.bind(&tape);
        let out = model.forward(&tape, &vars, tokens, Mode::Train)?;
        let terms = total_loss(&out.features, &out.logits, labels, loss)?;
        let total = terms.total.item()?;
        for (name, v) in [
            ("total", total),
            ("ce", terms.ce),
            ("triplet", terms.triplet),
            ("dcml", terms.dcml),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("{name} loss")));
            }
        }
        let grads = terms.total.backward()?;
        let mut grads: Vec<Tensor> = vars.iter().map(|v| grads.get(*v)).collect();
        optimizer.clip(&mut grads);
        ((total, terms.ce, terms.triplet, terms.dcml), grads)
    };
    for (id, grad) in model.params.ids().zip(grads).collect::<Vec<_>>() {
        let lr = rates.for_group(model.params.group(id));
        optimizer.update(id.index(), model.params.get_mut(id), &grad, lr)?;
    }
    Ok(StepRecord {
        total: terms.0,
        ce: terms.1,
        triplet: terms.2,
        dcml: terms.3,
        rates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::dcml_loss;
    use crate::losses::DcmlMetric;

    fn tiny(k: usize, enable_dymain: bool) -> ModelConfig {
        ModelConfig {
            input_dim: 3,
            tokens: 2,
            width: 4,
            hidden_mult: 2,
            trunk_blocks: 2,
            clone_depth: 1,
            branches: k,
            classes: 3,
            dymain_blocks: 1,
            enable_dymain,
            ..ModelConfig::default()
        }
    }

    fn tokens(n: usize, seed: u64) -> Tensor {
        let mut rng = StdRng::seed_from_u64(seed);
        let data = (0..n * 2 * 3)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::new(vec![n, 2, 3], data).unwrap()
    }

    #[test]
    fn seven_branch_layout() {
        let cfg = ModelConfig {
            trunk_blocks: 6,
            clone_depth: 4,
            branches: 7,
            dymain_blocks: 4,
            ..ModelConfig::default()
        };
        let m = build_branched_model(cfg, 1).unwrap();
        assert_eq!(m.num_branches(), 7);
        assert_eq!(m.trunk.len(), 2);
        for b in &m.branches {
            assert_eq!(b.blocks.len(), 4);
            assert!(b.blocks.iter().all(|blk| blk.dymain.is_some()));
        }
        let classifiers = m
            .params
            .iter()
            .filter(|(n, _)| n.ends_with("classifier"))
            .count();
        assert_eq!(classifiers, 7);
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = tiny(2, true);
        cfg.clone_depth = 3;
        assert!(build_branched_model(cfg, 0).is_err());
        let mut cfg = tiny(2, true);
        cfg.clone_depth = 0;
        assert!(build_branched_model(cfg, 0).is_err());
        let mut cfg = tiny(2, true);
        cfg.branches = 0;
        assert!(build_branched_model(cfg, 0).is_err());
    }

    #[test]
    fn builds_are_deterministic() {
        let a = build_branched_model(tiny(3, true), 42).unwrap();
        let b = build_branched_model(tiny(3, true), 42).unwrap();
        assert_eq!(a.params, b.params);
        let c = build_branched_model(tiny(3, true), 43).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn branch_tails_start_identical() {
        let m = build_branched_model(tiny(3, true), 5).unwrap();
        let tails: Vec<Vec<&Tensor>> = (0..3)
            .map(|b| {
                m.branch_tail_names(b)
                    .iter()
                    .map(|n| m.params.get(m.params.find(n).unwrap()))
                    .collect()
            })
            .collect();
        assert_eq!(tails[0], tails[1]);
        assert_eq!(tails[0], tails[2]);
    }

    #[test]
    fn identical_branches_give_identical_features() {
        let m = build_branched_model(tiny(3, false), 5).unwrap();
        let out = m
            .forward_all_branches(&tokens(4, 1), Mode::Train, FuseMode::Mean)
            .unwrap();
        assert_eq!(out.per_branch_features[0], out.per_branch_features[1]);
        assert_eq!(out.per_branch_features[0], out.per_branch_features[2]);
        let tape = Tape::new();
        let f: Vec<_> = out
            .per_branch_features
            .into_iter()
            .map(|t| tape.leaf(t))
            .collect();
        assert_eq!(
            dcml_loss(&f, DcmlMetric::Chebyshev)
                .unwrap()
                .item()
                .unwrap(),
            0.0
        );
    }

    #[test]
    fn single_sample_batch() {
        let m = build_branched_model(tiny(2, true), 5).unwrap();
        for mode in [Mode::Train, Mode::Eval] {
            let out = m
                .forward_all_branches(&tokens(1, 2), mode, FuseMode::Mean)
                .unwrap();
            assert_eq!(out.per_branch_features[0].shape(), &[1, 4]);
            assert!(out.per_branch_features.iter().all(Tensor::is_finite));
        }
    }

    #[test]
    fn perturbing_one_branch_is_isolated() {
        let mut m = build_branched_model(tiny(3, true), 9).unwrap();
        let x = tokens(4, 3);
        let before = m
            .forward_all_branches(&x, Mode::Train, FuseMode::Mean)
            .unwrap();
        let id = m.params.find("branch1.block0.fc2.weight").unwrap();
        m.params.get_mut(id).data_mut()[0] += 0.5;
        let after = m
            .forward_all_branches(&x, Mode::Train, FuseMode::Mean)
            .unwrap();
        for b in [0, 2] {
            assert_eq!(before.per_branch_features[b], after.per_branch_features[b]);
            assert_eq!(before.per_branch_logits[b], after.per_branch_logits[b]);
        }
        assert_ne!(before.per_branch_features[1], after.per_branch_features[1]);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let m = build_branched_model(tiny(1, true), 0).unwrap();
        let bad = Tensor::zeros(vec![2, 2, 5]).unwrap();
        assert!(matches!(
            m.forward_all_branches(&bad, Mode::Eval, FuseMode::Mean),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn eval_features_do_not_depend_on_batchmates() {
        let m = build_branched_model(tiny(2, true), 4).unwrap();
        let x = tokens(5, 8);
        let all = m.embed_samples(&x, FuseMode::Mean, 5).unwrap();
        let one_by_one = m.embed_samples(&x, FuseMode::Mean, 1).unwrap();
        assert!(all.max_abs_diff(&one_by_one) < 1e-12);
    }

    #[test]
    fn aggregation() {
        let a = Tensor::from_rows(&[vec![1., 3.]]).unwrap();
        let b = Tensor::from_rows(&[vec![3., 1.]]).unwrap();
        assert_eq!(aggregate_features(std::slice::from_ref(&a)).unwrap(), a);
        assert_eq!(
            aggregate_features(&[a.clone(), b.clone()]).unwrap().data(),
            &[2., 2.]
        );
        assert_eq!(
            aggregate_features(&[a.clone(), a.clone(), a.clone()]).unwrap(),
            a
        );
        let c = fuse_features(&[a, b], FuseMode::Concat).unwrap();
        assert_eq!(c.data(), &[1., 3., 3., 1.]);
        assert!(aggregate_features(&[]).is_err());
    }
}
