//! Two-phase CTSDG optimisation, the ERM baseline loop, Adam and early
//! stopping.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, Label, SequenceSample};
use crate::error::{Error, Result};
use crate::model::{ErmParams, SequenceClassifier};
use crate::nn::ParamSet;
use crate::objective::{
    contrastive_tape, cross_entropy_tape, init_random_match, matching_tape, mean_match_distance, update_match,
    BatchRep, LossBreakdown, MatchAssignment, MemberRef, Metric, Reduction,
};
use crate::tensor::{Array2, Tape};
use crate::vrnn::{draw_noise, VrnnParams};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Evaluation chunk size for validation and embedding passes.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub patience: usize,
    pub tau: f64,
    pub gamma: f64,
    pub lambda: f64,
    /// Epochs spent in the contrastive phase before switching to the full objective.
    pub phase1_threshold: usize,
    pub val_frac: f64,
    pub seed: u64,
    pub metric: Metric,
    pub no_lv: bool,
    pub no_contrast: bool,
    pub metric_override: Option<Metric>,
    pub reduction: Reduction,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub init_scale: f64,
    pub z_dim: usize,
    pub hidden: usize,
    pub window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            epochs: 500,
            batch: 16,
            patience: 20,
            tau: 0.05,
            gamma: 1e-4,
            lambda: 1.0,
            phase1_threshold: 100,
            val_frac: 0.2,
            seed: 0,
            metric: Metric::CosDist,
            no_lv: false,
            no_contrast: false,
            metric_override: None,
            reduction: Reduction::Mean,
            grad_clip: 10.0,
            init_scale: 1.0,
            z_dim: crate::vrnn::Z_DIM,
            hidden: crate::vrnn::HIDDEN_DIM,
            window: crate::data::DEFAULT_WINDOW,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch == 0 {
            return bad("batch must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.gamma >= 0.0) || !(self.lambda >= 0.0) {
            return bad(format!("gamma and lambda must be non-negative, got {} and {}", self.gamma, self.lambda));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return bad(format!("val_frac must lie in (0, 1), got {}", self.val_frac));
        }
        if !(self.grad_clip > 0.0) || !(self.init_scale > 0.0) {
            return bad("grad_clip and init_scale must be positive".into());
        }
        if self.z_dim != crate::vrnn::Z_DIM || self.hidden != crate::vrnn::HIDDEN_DIM {
            return bad(format!(
                "this build fixes z_dim={} and hidden={}",
                crate::vrnn::Z_DIM,
                crate::vrnn::HIDDEN_DIM
            ));
        }
        if self.window == 0 {
            return bad("window must be at least 1".into());
        }
        Ok(())
    }

    pub fn effective_metric(&self) -> Metric {
        self.metric_override.unwrap_or(self.metric)
    }

    pub fn effective_gamma(&self) -> f64 {
        if self.no_lv {
            0.0
        } else {
            self.gamma
        }
    }

    /// Layers `overrides` over `base` (both flat key tables) and deserializes.
    pub fn from_tables(base: toml::Table, overrides: toml::Table) -> Result<Self> {
        let known = Self::known_keys();
        let mut merged = base;
        for (k, v) in overrides {
            merged.insert(k, v);
        }
        let unknown: Vec<&str> = merged.keys().map(String::as_str).filter(|k| !known.contains(k)).collect();
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown config keys: {}", unknown.join(", "))));
        }
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn known_keys() -> Vec<&'static str> {
        vec![
            "lr",
            "epochs",
            "batch",
            "patience",
            "tau",
            "gamma",
            "lambda",
            "phase1_threshold",
            "val_frac",
            "seed",
            "metric",
            "no_lv",
            "no_contrast",
            "metric_override",
            "reduction",
            "grad_clip",
            "init_scale",
            "z_dim",
            "hidden",
            "window",
        ]
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Reads a TOML or JSON (by `.json` extension) key table.
pub fn read_config_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "json") {
        if text.trim().is_empty() {
            return Ok(toml::Table::new());
        }
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let obj = json
            .as_object()
            .ok_or_else(|| Error::Config(format!("{}: expected a JSON object", path.display())))?;
        let mut table = toml::Table::new();
        for (k, v) in obj {
            // toml has no null; an explicit null means "use the default"
            if v.is_null() {
                continue;
            }
            let tv: toml::Value = serde_json::from_value(v.clone())
                .map_err(|e| Error::Config(format!("{}: key {k}: {e}", path.display())))?;
            table.insert(k.clone(), tv);
        }
        Ok(table)
    } else {
        text.parse::<toml::Table>()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_tables(read_config_table(path)?, toml::Table::new())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Array2>,
    pub v: Vec<Array2>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |a: &Array2| Array2::zeros(a.rows(), a.cols());
        Self {
            m: params.values().iter().map(zeros).collect(),
            v: params.values().iter().map(zeros).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut ParamSet, grads: &[Array2], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Usage(format!(
            "adam: {} params, {} grads, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.get(i).shape() {
            return Err(Error::Dimension {
                op: "adam_step",
                lhs: params.get(i).shape(),
                rhs: g.shape(),
            });
        }
        if g.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for {}", params.names()[i])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, w) in p.data_mut().iter_mut().enumerate() {
            m[k] = ADAM_BETA1 * m[k] + (1.0 - ADAM_BETA1) * g[k];
            v[k] = ADAM_BETA2 * v[k] + (1.0 - ADAM_BETA2) * g[k] * g[k];
            *w -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Array2], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Stratified (domain, class) train/validation split.
pub fn split_train_val<R: Rng + ?Sized>(
    sources: &[DomainDataset],
    val_frac: f64,
    rng: &mut R,
) -> Result<(Vec<SequenceSample>, Vec<SequenceSample>)> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(Error::Config(format!("val_frac must lie in (0, 1), got {val_frac}")));
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for d in sources {
        if d.len() < 5 {
            return Err(Error::Data(format!("domain {} has {} samples, need at least 5", d.domain_id, d.len())));
        }
        for y in [Label::Pass, Label::Yield] {
            let mut stratum: Vec<&SequenceSample> = d.samples.iter().filter(|s| s.y == y).collect();
            if stratum.len() < 2 {
                return Err(Error::Data(format!(
                    "domain {} has {} samples of class {}, need at least 2",
                    d.domain_id,
                    stratum.len(),
                    y.index()
                )));
            }
            stratum.shuffle(rng);
            let n_val = ((stratum.len() as f64 * val_frac).round() as usize).clamp(1, stratum.len() - 1);
            val.extend(stratum[..n_val].iter().map(|s| (*s).clone()));
            train.extend(stratum[n_val..].iter().map(|s| (*s).clone()));
        }
    }
    Ok((train, val))
}

/// Which objective a batch step optimises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Contrastive term plus weighted negative ELBO.
    Contrastive,
    /// Cross-entropy plus weighted negative ELBO plus weighted matching term.
    Full,
    /// Cross-entropy only.
    Erm,
}

/// Losses and parameter gradients of one mini-batch.
#[derive(Clone, Debug)]
pub struct BatchOutcome {
    pub losses: LossBreakdown,
    /// `None` when the phase objective has no active term in this batch.
    pub grads: Option<Vec<Array2>>,
    pub pairs: usize,
}

/// Evaluates the phase objective on one batch and differentiates it.
pub fn batch_objective<M: SequenceClassifier>(
    model: &M,
    cfg: &TrainConfig,
    phase: Phase,
    batch: &[&SequenceSample],
    omega: &MatchAssignment,
    noise: Option<&[Array2]>,
) -> Result<BatchOutcome> {
    let tape = Tape::new();
    let bound = model.params().bind(&tape);
    let xs: Vec<&Array2> = batch.iter().map(|s| &s.x).collect();
    let enc = model.encode(&tape, &bound, &xs, noise)?;
    let members: Vec<MemberRef<'_>> = batch
        .iter()
        .map(|s| MemberRef {
            sample_id: &s.sample_id,
            domain_id: &s.domain_id,
            y: s.y,
        })
        .collect();
    let labels: Vec<Label> = batch.iter().map(|s| s.y).collect();
    let pairs = omega.realized_pairs(&members);
    let red = cfg.reduction;
    let gamma = cfg.effective_gamma();

    let ce = red.apply(&tape, cross_entropy_tape(&tape, enc.logits, &labels)?);
    let lv = enc.neg_elbo.map(|v| red.apply(&tape, v));
    let mut losses = LossBreakdown {
        l_y: tape.scalar(ce),
        l_v: lv.map_or(0.0, |v| tape.scalar(v)),
        ..LossBreakdown::default()
    };
    let mut terms = Vec::new();
    match phase {
        Phase::Erm => terms.push(ce),
        Phase::Contrastive => {
            if !cfg.no_contrast {
                if let Some(per_pair) = contrastive_tape(&tape, enc.logits, &members, &pairs, cfg.tau)? {
                    let l = red.apply(&tape, per_pair);
                    losses.l_con = tape.scalar(l);
                    terms.push(l);
                }
            }
            if let (Some(v), false) = (lv, cfg.no_lv) {
                terms.push(tape.scale(v, gamma));
            }
        }
        Phase::Full => {
            terms.push(ce);
            if let (Some(v), false) = (lv, cfg.no_lv) {
                terms.push(tape.scale(v, gamma));
            }
            if let Some(d) = matching_tape(&tape, enc.logits, &pairs, cfg.effective_metric())? {
                let l = red.apply(&tape, d);
                losses.l_r = tape.scalar(l);
                terms.push(tape.scale(l, cfg.lambda));
            }
        }
    }
    let Some(first) = terms.first().copied() else {
        return Ok(BatchOutcome {
            losses,
            grads: None,
            pairs: pairs.len(),
        });
    };
    let mut total = first;
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    losses.total = tape.scalar(total);
    if !losses.total.is_finite() {
        return Err(Error::Numeric(format!("non-finite {phase:?} loss")));
    }
    let g = tape.backward(total)?;
    Ok(BatchOutcome {
        losses,
        grads: Some(bound.iter().map(|&v| g.get(v)).collect()),
        pairs: pairs.len(),
    })
}

/// Deterministic (zero-noise) whole-set losses.
///
/// The matching and contrastive terms use a nearest-neighbour match built
/// within `samples` under the current parameters, so the result depends on
/// the parameters alone.
pub fn evaluate_losses<M: SequenceClassifier>(
    model: &M,
    cfg: &TrainConfig,
    phase: Phase,
    samples: &[SequenceSample],
) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate losses on an empty set".into()));
    }
    let mut ce_sum = 0.0;
    let mut lv_sum = 0.0;
    let mut reps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let tape = Tape::new();
        let bound = model.params().bind(&tape);
        let xs: Vec<&Array2> = chunk.iter().map(|s| &s.x).collect();
        let enc = model.encode(&tape, &bound, &xs, None)?;
        let labels: Vec<Label> = chunk.iter().map(|s| s.y).collect();
        ce_sum += tape.scalar(tape.sum(cross_entropy_tape(&tape, enc.logits, &labels)?));
        if let Some(v) = enc.neg_elbo {
            lv_sum += tape.scalar(tape.sum(v));
        }
        let logits = tape.value(enc.logits);
        reps.extend(chunk.iter().enumerate().map(|(i, s)| BatchRep {
            sample_id: s.sample_id.clone(),
            domain_id: s.domain_id.clone(),
            y: s.y,
            c: logits.row(i).to_vec(),
        }));
    }
    let n = samples.len() as f64;
    let mut out = LossBreakdown {
        l_y: ce_sum / n,
        l_v: lv_sum / n,
        ..LossBreakdown::default()
    };
    if phase != Phase::Erm {
        let metric = cfg.effective_metric();
        let omega = update_match(&reps, metric);
        out.l_r = mean_match_distance(&reps, &omega, metric);
        if phase == Phase::Contrastive && !cfg.no_contrast {
            out.l_con = crate::objective::contrastive_loss(&reps, &omega, cfg.tau)?;
        }
    }
    let gamma = cfg.effective_gamma();
    out.total = match phase {
        Phase::Erm => out.l_y,
        Phase::Contrastive => {
            let con = if cfg.no_contrast { 0.0 } else { out.l_con };
            con + gamma * out.l_v
        }
        Phase::Full => crate::objective::total_loss(out.l_y, out.l_v, out.l_r, gamma, cfg.lambda),
    };
    Ok(out)
}

/// Zero-noise hypothesis outputs for a sample set, as matching inputs.
pub fn batch_reps<M: SequenceClassifier>(model: &M, samples: &[SequenceSample]) -> Result<Vec<BatchRep>> {
    let refs: Vec<&SequenceSample> = samples.iter().collect();
    let cs = crate::model::embed_all(model, &refs)?;
    Ok(samples
        .iter()
        .zip(cs)
        .map(|(s, c)| BatchRep {
            sample_id: s.sample_id.clone(),
            domain_id: s.domain_id.clone(),
            y: s.y,
            c,
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EpochBudget,
    EarlyStop,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub train: LossBreakdown,
    pub val: LossBreakdown,
    /// Realized in-batch matched pairs over the epoch.
    pub pairs: usize,
    /// Batches skipped because their objective had no active term.
    pub skipped_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned.
    pub best_epoch: Option<usize>,
    pub best_val: Option<f64>,
    pub stop_reason: StopReason,
    pub train_size: usize,
    pub val_size: usize,
    /// Mean cosine distance of matched training pairs under the initial
    /// parameters and random match.
    pub init_match_distance: Option<f64>,
    /// The same after the last match update of the contrastive phase.
    pub phase1_match_distance: Option<f64>,
    pub final_match: Option<BTreeMap<String, String>>,
}

/// Independent RNG streams derived from the run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const STREAM_SPLIT: u64 = 1;
pub const STREAM_INIT: u64 = 2;
pub const STREAM_TRAIN: u64 = 3;

pub fn train_ctsdg(cfg: &TrainConfig, sources: &[DomainDataset]) -> Result<(VrnnParams, TrainReport)> {
    cfg.validate()?;
    if sources.len() < 2 {
        return Err(Error::Config(format!(
            "CTSDG needs at least 2 source domains for cross-domain matching, got {}",
            sources.len()
        )));
    }
    let (train, val) = split_train_val(sources, cfg.val_frac, &mut stream_rng(cfg.seed, STREAM_SPLIT))?;
    train_ctsdg_split(cfg, &train, &val)
}

pub fn train_ctsdg_split(
    cfg: &TrainConfig,
    train: &[SequenceSample],
    val: &[SequenceSample],
) -> Result<(VrnnParams, TrainReport)> {
    cfg.validate()?;
    let model = VrnnParams::init(&mut stream_rng(cfg.seed, STREAM_INIT), cfg.init_scale)?;
    fit(model, cfg, train, val, true)
}

pub fn train_erm(cfg: &TrainConfig, sources: &[DomainDataset]) -> Result<(ErmParams, TrainReport)> {
    cfg.validate()?;
    if sources.is_empty() {
        return Err(Error::Config("ERM needs at least one source domain".into()));
    }
    let (train, val) = split_train_val(sources, cfg.val_frac, &mut stream_rng(cfg.seed, STREAM_SPLIT))?;
    train_erm_split(cfg, &train, &val)
}

pub fn train_erm_split(
    cfg: &TrainConfig,
    train: &[SequenceSample],
    val: &[SequenceSample],
) -> Result<(ErmParams, TrainReport)> {
    cfg.validate()?;
    let model = ErmParams::init(&mut stream_rng(cfg.seed, STREAM_INIT), cfg.init_scale)?;
    fit(model, cfg, train, val, false)
}

fn fit<M: SequenceClassifier>(
    mut model: M,
    cfg: &TrainConfig,
    train: &[SequenceSample],
    val: &[SequenceSample],
    ctsdg: bool,
) -> Result<(M, TrainReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut rng = stream_rng(cfg.seed, STREAM_TRAIN);
    let members: Vec<MemberRef<'_>> = train
        .iter()
        .map(|s| MemberRef {
            sample_id: &s.sample_id,
            domain_id: &s.domain_id,
            y: s.y,
        })
        .collect();
    let mut omega = if ctsdg {
        init_random_match(&members, &mut rng)
    } else {
        MatchAssignment::default()
    };
    let mut report = TrainReport {
        model: model.kind().to_string(),
        seed: cfg.seed,
        epochs: Vec::new(),
        best_epoch: None,
        best_val: None,
        stop_reason: StopReason::EpochBudget,
        train_size: train.len(),
        val_size: val.len(),
        init_match_distance: None,
        phase1_match_distance: None,
        final_match: None,
    };
    if ctsdg {
        let reps = batch_reps(&model, train)?;
        report.init_match_distance = Some(mean_match_distance(&reps, &omega, Metric::CosDist));
    }
    let mut adam = AdamState::new(model.params());
    let mut best: Option<ParamSet> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let phase = match (ctsdg, epoch < cfg.phase1_threshold) {
            (false, _) => Phase::Erm,
            (true, true) => Phase::Contrastive,
            (true, false) => Phase::Full,
        };
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        let mut batches = 0usize;
        let mut pairs = 0usize;
        let mut skipped = 0usize;
        for idx in order.chunks(cfg.batch) {
            let batch: Vec<&SequenceSample> = idx.iter().map(|&i| &train[i]).collect();
            let noise = model
                .uses_noise()
                .then(|| draw_noise(&mut rng, batch.len(), batch[0].x.rows()));
            let out = batch_objective(&model, cfg, phase, &batch, &omega, noise.as_deref())?;
            pairs += out.pairs;
            sums = add_losses(sums, out.losses);
            batches += 1;
            match out.grads {
                Some(mut grads) => {
                    clip_global_norm(&mut grads, cfg.grad_clip);
                    adam_step(model.params_mut(), &grads, &mut adam, cfg.lr)?;
                }
                None => skipped += 1,
            }
        }
        if phase == Phase::Contrastive && !cfg.no_contrast {
            let reps = batch_reps(&model, train)?;
            omega = update_match(&reps, cfg.effective_metric());
            report.phase1_match_distance = Some(mean_match_distance(&reps, &omega, Metric::CosDist));
        }
        if phase == Phase::Contrastive && pairs == 0 && !cfg.no_contrast {
            log::warn!("epoch {epoch}: no realized positive pair in any batch");
        }
        let val_losses = evaluate_losses(&model, cfg, phase, val)?;
        report.epochs.push(EpochRecord {
            epoch,
            phase,
            train: scale_losses(sums, 1.0 / batches.max(1) as f64),
            val: val_losses,
            pairs,
            skipped_batches: skipped,
        });
        log::debug!(
            "{} seed {} epoch {epoch} {phase:?}: val total {:.5}",
            model.kind(),
            cfg.seed,
            val_losses.total
        );
        if phase == Phase::Contrastive {
            continue;
        }
        if report.best_val.is_none_or(|b| val_losses.total < b) {
            report.best_val = Some(val_losses.total);
            report.best_epoch = Some(epoch);
            best = Some(model.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                report.stop_reason = StopReason::EarlyStop;
                break;
            }
        }
    }
    match best {
        Some(p) => *model.params_mut() = p,
        None => report.best_epoch = report.epochs.last().map(|e| e.epoch),
    }
    if ctsdg {
        report.final_match = Some(omega.partners);
    }
    Ok((model, report))
}

fn add_losses(a: LossBreakdown, b: LossBreakdown) -> LossBreakdown {
    LossBreakdown {
        l_y: a.l_y + b.l_y,
        l_v: a.l_v + b.l_v,
        l_r: a.l_r + b.l_r,
        l_con: a.l_con + b.l_con,
        total: a.total + b.total,
    }
}

fn scale_losses(a: LossBreakdown, k: f64) -> LossBreakdown {
    LossBreakdown {
        l_y: a.l_y * k,
        l_v: a.l_v * k,
        l_r: a.l_r * k,
        l_con: a.l_con * k,
        total: a.total * k,
    }
}
