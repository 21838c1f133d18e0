//! Group-relative policy optimization and the supervised baseline.
//!
//! The GRPO objective for a batch of groups is
//!
//! ```text
//! J = mean_groups (1/G) sum_i [ min(rho_i A_i, clip(rho_i, 1-eps, 1+eps) A_i)
//!                               - beta * KL_i ]
//! rho_i = pi_new(o_i|q) / pi_old(o_i|q)
//! KL_i  = r - ln r - 1,  r = pi_ref(o_i|q) / pi_new(o_i|q)
//! ```
//!
//! with sequence-level probabilities evaluated at the sampling temperature.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::eval::evaluate_accuracy;
use crate::policy::{
    greedy_decode, init_policy, log_prob_gradient, response_log_prob, sample_response, Gradient,
    Mode, PolicyParams, Response, ResponseSchema, Role,
};
use crate::reward::{weighted_reward, RewardWeights};
use crate::seed;
use crate::task::{item_shape, SplitDataset, VqaItem};

/// Exponents above this are clamped before `exp`.
pub const EXP_CLAMP: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub temperature: f64,
    pub clip_eps: f64,
    pub kl_beta: f64,
    pub adv_eps: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Fixed number of update steps; epochs repeat until reached. Overrides `epochs`.
    pub max_steps: Option<usize>,
    pub batch: usize,
    pub mode: Mode,
    pub seed: u64,
    pub think_slots: usize,
    pub think_vocab: usize,
    pub structures: usize,
    pub init_scale: f64,
    pub reward_weights: RewardWeights,
    /// Greedy train accuracy is logged every this many steps and at the last step.
    pub eval_every: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 4,
            temperature: 0.7,
            clip_eps: 0.2,
            kl_beta: 0.04,
            adv_eps: 1e-4,
            lr: 0.05,
            epochs: 1,
            max_steps: None,
            batch: 4,
            mode: Mode::Think,
            seed: 0,
            think_slots: 2,
            think_vocab: 8,
            structures: 4,
            init_scale: 0.1,
            reward_weights: RewardWeights::default(),
            eval_every: 50,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::invalid("group_size", "must be at least 2"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::invalid("clip_eps", format!("{} is outside (0, 1)", self.clip_eps)));
        }
        if !(self.kl_beta.is_finite() && self.kl_beta >= 0.0) {
            return Err(Error::invalid("kl_beta", "must be >= 0"));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid("temp", "must be > 0"));
        }
        // lr = 0 is accepted so a run can reproduce its initialization.
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::invalid("lr", "must be >= 0"));
        }
        if !(self.adv_eps.is_finite() && self.adv_eps >= 0.0) {
            return Err(Error::invalid("adv_eps", "must be >= 0"));
        }
        if self.batch == 0 {
            return Err(Error::invalid("batch", "must be positive"));
        }
        if self.eval_every == 0 {
            return Err(Error::invalid("eval_every", "must be positive"));
        }
        Ok(())
    }

    pub fn schema(&self, num_answers: usize) -> ResponseSchema {
        let mut schema = ResponseSchema::new(self.mode, self.think_slots, num_answers);
        schema.think_vocab_size = self.think_vocab;
        schema.num_structures = self.structures;
        schema
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group<'a> {
    pub item: &'a VqaItem,
    pub responses: Vec<Response>,
    pub formats: Vec<u8>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// `(r_i - mean) / (popstd + eps)`.
pub fn group_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid("rewards", "a group needs at least 2 rewards"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + eps)).collect())
}

fn clamped_exp(x: f64) -> (f64, bool) {
    if x > EXP_CLAMP {
        (EXP_CLAMP.exp(), true)
    } else {
        (x.exp(), false)
    }
}

/// Per-sample estimate `r - ln r - 1` with `r = exp(logp_ref - logp_new)`.
pub fn kl_estimate(logp_new: f64, logp_ref: f64) -> f64 {
    kl_with_ratio(logp_new, logp_ref).0
}

/// KL estimate, the (possibly clamped) ratio `r`, and whether it was clamped.
fn kl_with_ratio(logp_new: f64, logp_ref: f64) -> (f64, f64, bool) {
    let d = logp_ref - logp_new;
    let (r, clamped) = clamped_exp(d);
    let kl = if clamped { r - d - 1.0 } else { d.exp_m1() - d };
    (kl, r, clamped)
}

pub fn clipped_term(ratio: f64, advantage: f64, clip_eps: f64) -> f64 {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps) * advantage;
    unclipped.min(clipped)
}

pub fn sample_group<'a, R: Rng + ?Sized>(
    policy_old: &PolicyParams,
    item: &'a VqaItem,
    cfg: &GrpoConfig,
    rng: &mut R,
) -> Result<Group<'a>> {
    let mut responses = Vec::with_capacity(cfg.group_size);
    let mut formats = Vec::with_capacity(cfg.group_size);
    let mut rewards = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let r = sample_response(policy_old, item, cfg.temperature, rng)?;
        let score = weighted_reward(&r.text, &item.answer, cfg.mode, cfg.reward_weights)?;
        formats.push(score.format);
        rewards.push(score.total);
        responses.push(r);
    }
    let advantages = group_advantages(&rewards, cfg.adv_eps)?;
    Ok(Group {
        item,
        responses,
        formats,
        rewards,
        advantages,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct ObjectiveStats {
    pub objective: f64,
    pub mean_kl: f64,
    pub clip_fraction: f64,
    pub exp_clamps: usize,
}

fn objective_and_gradient(
    new: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[Group],
    cfg: &GrpoConfig,
    want_grad: bool,
) -> Result<(ObjectiveStats, Option<Gradient>)> {
    if groups.is_empty() {
        return Err(Error::invalid("groups", "no groups"));
    }
    let tau = cfg.temperature;
    let mut stats = ObjectiveStats::default();
    let mut grad = want_grad.then(|| Gradient::zeros_like(new));
    let mut samples = 0usize;
    for group in groups {
        let weight = 1.0 / (groups.len() * group.responses.len()) as f64;
        for (resp, &adv) in group.responses.iter().zip(&group.advantages) {
            let lp_new = response_log_prob(new, resp, group.item, tau)?;
            let lp_old = response_log_prob(old, resp, group.item, tau)?;
            let lp_ref = response_log_prob(reference, resp, group.item, tau)?;

            let (ratio, ratio_clamped) = clamped_exp(lp_new - lp_old);
            let unclipped = ratio * adv;
            let clipped = ratio.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * adv;
            let (kl, r, kl_clamped) = kl_with_ratio(lp_new, lp_ref);

            stats.objective += weight * (unclipped.min(clipped) - cfg.kl_beta * kl);
            stats.mean_kl += kl;
            stats.exp_clamps += ratio_clamped as usize + kl_clamped as usize;
            samples += 1;
            // tie goes to the unclipped branch
            let unclipped_active = unclipped <= clipped;
            if !unclipped_active {
                stats.clip_fraction += 1.0;
            }

            if let Some(g) = grad.as_mut() {
                let surrogate = if unclipped_active { adv * ratio } else { 0.0 };
                let coef = weight * (surrogate - cfg.kl_beta * (1.0 - r));
                if coef != 0.0 {
                    g.add_scaled(&log_prob_gradient(new, resp, group.item, tau)?, coef);
                }
            }
        }
    }
    stats.mean_kl /= samples as f64;
    stats.clip_fraction /= samples as f64;
    Ok((stats, grad))
}

pub fn grpo_objective(
    new: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[Group],
    cfg: &GrpoConfig,
) -> Result<f64> {
    Ok(objective_and_gradient(new, old, reference, groups, cfg, false)?
        .0
        .objective)
}

/// Exact gradient of [`grpo_objective`] with respect to `new`.
pub fn grpo_gradient(
    new: &PolicyParams,
    old: &PolicyParams,
    reference: &PolicyParams,
    groups: &[Group],
    cfg: &GrpoConfig,
) -> Result<Gradient> {
    Ok(objective_and_gradient(new, old, reference, groups, cfg, true)?
        .1
        .expect("gradient requested"))
}

/// Structure 0, every think slot token 0, answer = ground truth.
pub fn gold_response(schema: &ResponseSchema, item: &VqaItem) -> Response {
    Response::from_choices(
        schema,
        0,
        vec![0; schema.num_think_slots],
        item.answer_index(),
    )
}

/// Summed log-likelihood of the gold responses.
pub fn sft_objective(params: &PolicyParams, items: &[&VqaItem], tau: f64) -> Result<f64> {
    items
        .iter()
        .map(|it| response_log_prob(params, &gold_response(&params.schema, it), it, tau))
        .sum()
}

pub fn sft_gradient(params: &PolicyParams, items: &[&VqaItem], tau: f64) -> Result<Gradient> {
    let mut grad = Gradient::zeros_like(params);
    for it in items {
        let g = log_prob_gradient(params, &gold_response(&params.schema, it), it, tau)?;
        grad.add_scaled(&g, 1.0);
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub iteration: usize,
    pub mean_reward: f64,
    pub format_rate: f64,
    pub mean_abs_advantage: f64,
    pub objective: f64,
    pub mean_kl: f64,
    pub exp_clamps: usize,
    pub greedy_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn last_accuracy(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.greedy_accuracy)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Trainer {
    Grpo,
    Sft,
}

impl Trainer {
    pub fn name(self) -> &'static str {
        match self {
            Trainer::Grpo => "grpo",
            Trainer::Sft => "sft",
        }
    }

    pub fn train(self, dataset: &SplitDataset, cfg: &GrpoConfig) -> Result<(PolicyParams, TrainLog)> {
        match self {
            Trainer::Grpo => train_grpo(dataset, cfg),
            Trainer::Sft => train_sft(dataset, cfg),
        }
    }
}

impl std::str::FromStr for Trainer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grpo" => Ok(Trainer::Grpo),
            "sft" => Ok(Trainer::Sft),
            other => Err(Error::invalid("trainer", format!("{other:?} is not grpo or sft"))),
        }
    }
}

/// Shared schedule: seeded shuffles per epoch, fixed-size batches.
struct Schedule {
    order: Vec<usize>,
    epoch: usize,
    cursor: usize,
    remaining: usize,
    seed: u64,
    batch: usize,
}

impl Schedule {
    fn new(n: usize, cfg: &GrpoConfig) -> Self {
        let per_epoch = n.div_ceil(cfg.batch);
        let mut s = Schedule {
            order: (0..n).collect(),
            epoch: 0,
            cursor: 0,
            remaining: cfg.max_steps.unwrap_or(cfg.epochs * per_epoch),
            seed: cfg.seed,
            batch: cfg.batch,
        };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        let mut rng = seed::stream(self.seed, "epoch", &self.epoch.to_string());
        self.order.shuffle(&mut rng);
    }

    fn next_batch(&mut self) -> Option<Vec<usize>> {
        if self.remaining == 0 {
            return None;
        }
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.cursor = 0;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        self.remaining -= 1;
        Some(batch)
    }

    fn is_done(&self) -> bool {
        self.remaining == 0
    }
}

/// Seeded initial New parameters and their frozen Reference copy.
pub fn initial_policies(dataset: &SplitDataset, cfg: &GrpoConfig) -> Result<(PolicyParams, PolicyParams)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::invalid("dataset", "empty train split"));
    }
    let (features, answers) = item_shape(&dataset.train)?;
    let schema = cfg.schema(answers);
    let new = init_policy(
        &schema,
        features,
        seed::derive_seed(cfg.seed, "init", ""),
        cfg.init_scale,
    )?;
    let reference = new.with_role(Role::Reference);
    Ok((new, reference))
}

fn periodic_accuracy(
    step: usize,
    last: bool,
    cfg: &GrpoConfig,
    params: &PolicyParams,
    train: &[VqaItem],
) -> Result<Option<f64>> {
    if last || (step + 1).is_multiple_of(cfg.eval_every) {
        Ok(Some(evaluate_accuracy(params, train)?.accuracy))
    } else {
        Ok(None)
    }
}

pub fn train_grpo(dataset: &SplitDataset, cfg: &GrpoConfig) -> Result<(PolicyParams, TrainLog)> {
    let (new, reference) = initial_policies(dataset, cfg)?;
    train_grpo_from(dataset, cfg, new, &reference)
}

/// [`train_grpo`] from explicit starting and reference parameters.
pub fn train_grpo_from(
    dataset: &SplitDataset,
    cfg: &GrpoConfig,
    mut new: PolicyParams,
    reference: &PolicyParams,
) -> Result<(PolicyParams, TrainLog)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::invalid("dataset", "empty train split"));
    }
    let train = &dataset.train;
    let mut schedule = Schedule::new(train.len(), cfg);
    let mut log = TrainLog::default();
    let mut step = 0;
    while let Some(batch) = schedule.next_batch() {
        let old = new.with_role(Role::OldSnapshot);
        let groups = batch
            .iter()
            .map(|&i| {
                let item = &train[i];
                let key = format!("{}#{step}", item.id);
                sample_group(&old, item, cfg, &mut seed::stream(cfg.seed, "rollout", &key))
            })
            .collect::<Result<Vec<_>>>()?;
        let (stats, grad) = objective_and_gradient(&new, &old, reference, &groups, cfg, true)?;
        new.ascend(&grad.expect("gradient requested"), cfg.lr)?;

        let n = (groups.len() * cfg.group_size) as f64;
        let sum = |f: &dyn Fn(&Group) -> f64| groups.iter().map(f).sum::<f64>() / n;
        log.records.push(TrainRecord {
            iteration: step,
            mean_reward: sum(&|g| g.rewards.iter().sum()),
            format_rate: sum(&|g| g.formats.iter().map(|&f| f as f64).sum()),
            mean_abs_advantage: sum(&|g| g.advantages.iter().map(|a| a.abs()).sum()),
            objective: stats.objective,
            mean_kl: stats.mean_kl,
            exp_clamps: stats.exp_clamps,
            greedy_accuracy: periodic_accuracy(step, schedule.is_done(), cfg, &new, train)?,
        });
        step += 1;
    }
    Ok((new, log))
}

/// Maximum-likelihood ascent on the gold response of each item.
pub fn train_sft(dataset: &SplitDataset, cfg: &GrpoConfig) -> Result<(PolicyParams, TrainLog)> {
    let (new, reference) = initial_policies(dataset, cfg)?;
    train_sft_from(dataset, cfg, new, &reference)
}

/// [`train_sft`] from explicit starting parameters; `reference` only feeds the logged KL.
pub fn train_sft_from(
    dataset: &SplitDataset,
    cfg: &GrpoConfig,
    mut new: PolicyParams,
    reference: &PolicyParams,
) -> Result<(PolicyParams, TrainLog)> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::invalid("dataset", "empty train split"));
    }
    let train = &dataset.train;
    let tau = cfg.temperature;
    let mut schedule = Schedule::new(train.len(), cfg);
    let mut log = TrainLog::default();
    let mut step = 0;
    while let Some(batch) = schedule.next_batch() {
        let items: Vec<&VqaItem> = batch.iter().map(|&i| &train[i]).collect();
        let n = items.len() as f64;
        let objective = sft_objective(&new, &items, tau)? / n;
        let mut mean_kl = 0.0;
        let mut reward = 0.0;
        let mut format = 0.0;
        for it in &items {
            let gold = gold_response(&new.schema, it);
            let lp_new = response_log_prob(&new, &gold, it, tau)?;
            let lp_ref = response_log_prob(reference, &gold, it, tau)?;
            mean_kl += kl_estimate(lp_new, lp_ref) / n;
            let out = greedy_decode(&new, it)?;
            let score = weighted_reward(&out.text, &it.answer, cfg.mode, cfg.reward_weights)?;
            reward += score.total / n;
            format += score.format as f64 / n;
        }
        let grad = sft_gradient(&new, &items, tau)?;
        new.ascend(&grad, cfg.lr / n)?;
        log.records.push(TrainRecord {
            iteration: step,
            mean_reward: reward,
            format_rate: format,
            mean_abs_advantage: 0.0,
            objective,
            mean_kl,
            exp_clamps: 0,
            greedy_accuracy: periodic_accuracy(step, schedule.is_done(), cfg, &new, train)?,
        });
        step += 1;
    }
    Ok((new, log))
}
