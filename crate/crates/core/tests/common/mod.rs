#![allow(dead_code)]

use std::path::PathBuf;

use grpo_core::policy::{init_policy, response_log_prob, Mode, PolicyParams, ResponseSchema, Role};
use grpo_core::task::{generate_suite, SuiteSpec, VqaItem};
use grpo_core::trainer::{
    grpo_gradient, grpo_objective, sample_group, sft_gradient, sft_objective, GrpoConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central differences of `f` at `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `||a - b|| / max(||a||, ||b||)`, with the scale floored at 1e-6.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    diff / scale.max(1e-6)
}

pub fn items(seed: u64, n: usize, features: usize, options: usize) -> Vec<VqaItem> {
    let spec = SuiteSpec {
        seed,
        num_domains: 1,
        items_per_domain: n,
        feature_dim: features,
        num_options: options,
        alpha: 0.5,
    };
    generate_suite(&spec).unwrap().swap_remove_index(0).unwrap().1
}

/// Random small schema for instance `seed`.
pub fn random_schema(rng: &mut ChaCha8Rng) -> ResponseSchema {
    let think = rng.random_bool(0.5);
    ResponseSchema {
        mode: if think { Mode::Think } else { Mode::NoThink },
        num_think_slots: if think { rng.random_range(0..3) } else { 0 },
        think_vocab_size: rng.random_range(2..5),
        num_structures: rng.random_range(2..5),
        num_answers: rng.random_range(2..5),
    }
}

pub struct Instance {
    pub items: Vec<VqaItem>,
    pub new: PolicyParams,
    pub old: PolicyParams,
    pub reference: PolicyParams,
    pub tau: f64,
    pub rng: ChaCha8Rng,
}

/// New = old + small noise so ratios straddle the clip band; independent reference.
pub fn instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let schema = random_schema(&mut rng);
    let f = rng.random_range(1..5);
    let items = items(seed, 6, f, schema.num_answers);
    let old = init_policy(&schema, f, seed, 0.6).unwrap().with_role(Role::OldSnapshot);
    let noise = init_policy(&schema, f, seed + 10_000, 0.15).unwrap();
    let new_flat: Vec<f64> = old.flat().iter().zip(noise.flat()).map(|(a, b)| a + b).collect();
    let new = old.from_flat(&new_flat).with_role(Role::New);
    let reference = init_policy(&schema, f, seed + 20_000, 0.6)
        .unwrap()
        .with_role(Role::Reference);
    let tau = rng.random_range(0.3..1.5);
    Instance {
        items,
        new,
        old,
        reference,
        tau,
        rng,
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Relative error of `grpo_gradient` on instance `seed`, and how many samples
/// sit on the clipped branch.
pub fn grpo_fd_error(seed: u64) -> (f64, usize) {
    let mut inst = instance(seed);
    let cfg = GrpoConfig {
        temperature: inst.tau,
        kl_beta: inst.rng.random_range(0.0..0.2),
        group_size: inst.rng.random_range(2..6),
        ..GrpoConfig::default()
    };
    let groups = inst.items[..3]
        .iter()
        .map(|it| sample_group(&inst.old, it, &cfg, &mut inst.rng).unwrap())
        .collect::<Vec<_>>();
    let mut clipped = 0;
    for g in &groups {
        for (r, &a) in g.responses.iter().zip(&g.advantages) {
            let lp_new = response_log_prob(&inst.new, r, g.item, inst.tau).unwrap();
            let rho = (lp_new - r.logp_old).exp();
            if rho * a > rho.clamp(1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps) * a {
                clipped += 1;
            }
        }
    }
    let analytic = grpo_gradient(&inst.new, &inst.old, &inst.reference, &groups, &cfg)
        .unwrap()
        .flat();
    let numeric = central_diff(
        |v| grpo_objective(&inst.new.from_flat(v), &inst.old, &inst.reference, &groups, &cfg).unwrap(),
        &inst.new.flat(),
        FD_STEP,
    );
    (relative_error(&analytic, &numeric), clipped)
}

/// Relative error of `sft_gradient` on instance `seed`.
pub fn sft_fd_error(seed: u64) -> f64 {
    let inst = instance(seed);
    let items: Vec<&VqaItem> = inst.items.iter().collect();
    let analytic = sft_gradient(&inst.new, &items, inst.tau).unwrap().flat();
    let numeric = central_diff(
        |v| sft_objective(&inst.new.from_flat(v), &items, inst.tau).unwrap(),
        &inst.new.flat(),
        FD_STEP,
    );
    relative_error(&analytic, &numeric)
}

/// One hand-labelled line of `fixtures/rewards.tsv`.
pub struct RewardCase {
    pub line: usize,
    pub mode: Mode,
    pub ground_truth: String,
    pub format: u8,
    pub accuracy: u8,
    pub text: String,
}

pub fn reward_cases() -> Vec<RewardCase> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/rewards.tsv");
    let body = std::fs::read_to_string(&path).unwrap();
    body.lines()
        .enumerate()
        .filter(|(_, l)| !l.starts_with('#') && !l.is_empty())
        .map(|(n, l)| {
            let f: Vec<&str> = l.splitn(5, '\t').collect();
            assert_eq!(f.len(), 5, "line {}", n + 1);
            RewardCase {
                line: n + 1,
                mode: match f[0] {
                    "think" => Mode::Think,
                    "no-think" => Mode::NoThink,
                    m => panic!("line {}: mode {m}", n + 1),
                },
                ground_truth: f[1].to_string(),
                format: f[2].parse().unwrap(),
                accuracy: f[3].parse().unwrap(),
                text: f[4].replace("\\n", "\n"),
            }
        })
        .collect()
}

pub mod tables;
