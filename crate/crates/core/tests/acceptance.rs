//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line.

mod common;

use std::fs;
use std::path::Path;
use std::time::Instant;

use common::tables::*;
use common::{grpo_fd_error, instance, reward_cases, sft_fd_error};
use grpo_core::cli;
use grpo_core::eval::{cross_matrix, evaluate_accuracy, overall_aggregates};
use grpo_core::policy::{
    greedy_decode, render, Mode, Response, ResponseSchema, Role, MAX_STRUCTURES,
};
use grpo_core::reward::{accuracy_reward, extract_answer, format_reward};
use grpo_core::task::{generate_suite, split_suite, SuiteSpec};
use grpo_core::trainer::{
    grpo_objective, group_advantages, kl_estimate, sample_group, train_grpo, GrpoConfig, Trainer,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: String) {
    println!("criterion {n}: {} — {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {n} failed: {detail}");
}

#[test]
fn criterion_1_published_aggregates() {
    let agg = overall_aggregates(&rows(&DOMAIN_CELLS)).unwrap();
    let (row, col, grand) = (agg.overall_row[0], agg.overall_col[0], agg.grand_overall);
    let pass = (row - 71.44).abs() <= 0.01 && (col - 66.30).abs() <= 0.01 && (grand - 69.91).abs() <= 0.01;
    report(1, pass, format!("CT row {row:.4}, CT column {col:.4}, grand {grand:.4}"));
}

#[test]
fn criterion_2_gradient_correctness() {
    let start = Instant::now();
    let mut worst_grpo = 0.0f64;
    let mut worst_sft = 0.0f64;
    for seed in 0..100 {
        worst_grpo = worst_grpo.max(grpo_fd_error(seed).0);
        worst_sft = worst_sft.max(sft_fd_error(seed));
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst_grpo < 1e-5 && worst_sft < 1e-5 && secs < 10.0;
    report(
        2,
        pass,
        format!("worst relative error grpo {worst_grpo:.2e}, sft {worst_sft:.2e}, {secs:.2} s"),
    );
}

#[test]
fn criterion_3_objective_identity() {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut inst = instance(1000 + seed);
        let cfg = GrpoConfig {
            temperature: inst.tau,
            group_size: inst.rng.random_range(2..8),
            kl_beta: inst.rng.random_range(0.0..1.0),
            ..GrpoConfig::default()
        };
        let old = inst.new.with_role(Role::OldSnapshot);
        let reference = inst.new.with_role(Role::Reference);
        let groups: Vec<_> = inst
            .items
            .iter()
            .map(|it| sample_group(&old, it, &cfg, &mut inst.rng).unwrap())
            .collect();
        let obj = grpo_objective(&inst.new, &old, &reference, &groups, &cfg).unwrap();
        worst = worst.max(obj.abs());
    }
    report(3, worst < 1e-10, format!("max |objective| {worst:.2e} over 50 trials"));
}

#[test]
fn criterion_4_advantage_and_kl() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_mean = 0.0f64;
    let mut constant_ok = true;
    for _ in 0..100_000 {
        let g = rng.random_range(2..17);
        let rewards: Vec<f64> = (0..g).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = group_advantages(&rewards, 1e-4).unwrap();
        worst_mean = worst_mean.max((a.iter().sum::<f64>() / g as f64).abs());
        let c = rng.random_range(0..3) as f64;
        constant_ok &= group_advantages(&vec![c; g], 1e-4).unwrap().iter().all(|&v| v == 0.0);
    }
    let mut min_kl = f64::INFINITY;
    let mut zero_iff_equal = true;
    for i in 0..100_000 {
        let a = rng.random_range(-40.0..0.0);
        let b = if i % 10 == 0 { a } else { rng.random_range(-40.0..0.0) };
        let kl = kl_estimate(a, b);
        min_kl = min_kl.min(kl);
        zero_iff_equal &= (kl == 0.0) == (a == b);
    }
    let pass = worst_mean < 1e-9 && constant_ok && min_kl >= -1e-12 && zero_iff_equal;
    report(
        4,
        pass,
        format!(
            "max |mean advantage| {worst_mean:.2e}, zero-variance groups zero: {constant_ok}, \
             min KL {min_kl:.2e}, zero iff equal: {zero_iff_equal}"
        ),
    );
}

#[test]
fn criterion_5_desk_scale_convergence() {
    let spec = SuiteSpec {
        seed: 7,
        num_domains: 8,
        items_per_domain: 500,
        feature_dim: 16,
        num_options: 4,
        alpha: 0.8,
    };
    let splits = split_suite(&generate_suite(&spec).unwrap(), spec.seed).unwrap();
    let cfg = GrpoConfig {
        seed: 7,
        max_steps: Some(300),
        ..GrpoConfig::default()
    };
    let (label, ds) = splits.get_index(0).unwrap();
    let start = Instant::now();
    let (policy, _) = train_grpo(ds, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let accuracy = evaluate_accuracy(&policy, &ds.train).unwrap().accuracy;
    let formatted = ds
        .train
        .iter()
        .filter(|it| greedy_decode(&policy, it).unwrap().structure == 0)
        .count() as f64
        / ds.train.len() as f64;
    let pass = accuracy >= 0.95 && formatted >= 0.99 && secs < 60.0;
    report(
        5,
        pass,
        format!("{label}: greedy train accuracy {accuracy:.3}, format rate {formatted:.3}, {secs:.2} s"),
    );
}

fn matrix_for(alpha: f64) -> grpo_core::eval::GeneralizationMatrix {
    let spec = SuiteSpec {
        seed: 7,
        num_domains: 8,
        items_per_domain: 20_000,
        feature_dim: 8,
        num_options: 4,
        alpha,
    };
    let splits = split_suite(&generate_suite(&spec).unwrap(), spec.seed).unwrap();
    let cfg = GrpoConfig {
        seed: 7,
        max_steps: Some(300),
        ..GrpoConfig::default()
    };
    let jobs = std::thread::available_parallelism().map_or(1, |n| n.get());
    cross_matrix(&splits, &cfg, Trainer::Grpo, jobs).unwrap().0
}

#[test]
fn criterion_6_generalization_matrix_sanity() {
    let shared = matrix_for(0.0);
    let spread = shared
        .cells
        .iter()
        .map(|row| {
            let max = row.iter().cloned().fold(f64::MIN, f64::max);
            let min = row.iter().cloned().fold(f64::MAX, f64::min);
            max - min
        })
        .fold(0.0, f64::max);
    let independent = matrix_for(1.0);
    let (diag, off) = (independent.diagonal_mean(), independent.off_diagonal_mean());
    let pass = spread <= 2.0 && diag - off >= 20.0;
    report(
        6,
        pass,
        format!("alpha 0 max row spread {spread:.2}; alpha 1 diagonal {diag:.2} vs off-diagonal {off:.2}"),
    );
}

#[test]
fn criterion_7_reward_rules() {
    let cases = reward_cases();
    let wrong: Vec<usize> = cases
        .iter()
        .filter(|c| {
            format_reward(&c.text, c.mode) != c.format
                || accuracy_reward(&c.text, &c.ground_truth).unwrap() != c.accuracy
        })
        .map(|c| c.line)
        .collect();
    let mut round_trips = 0;
    let mut bad_round_trips = 0;
    for mode in [Mode::Think, Mode::NoThink] {
        let k = if mode == Mode::Think { 3 } else { 0 };
        let schema = ResponseSchema {
            num_structures: MAX_STRUCTURES,
            think_vocab_size: 4,
            ..ResponseSchema::new(mode, k, 4)
        };
        for structure in 0..MAX_STRUCTURES {
            for answer in 0..4 {
                for token in 0..4 {
                    let r = Response::from_choices(&schema, structure, vec![token; k], answer);
                    let text = render(&r, &schema);
                    let ok = format_reward(&text, mode) == (structure == 0) as u8
                        && (structure != 0 || extract_answer(&text) == Some(schema.letter(answer)));
                    round_trips += 1;
                    bad_round_trips += !ok as usize;
                }
            }
        }
    }
    let pass = cases.len() >= 30 && wrong.is_empty() && bad_round_trips == 0;
    report(
        7,
        pass,
        format!(
            "{} fixture strings, mismatched lines {wrong:?}; {round_trips} rendered responses, {bad_round_trips} bad",
            cases.len()
        ),
    );
}

fn run_cli(args: &[&str]) -> i32 {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let code = cli::run(std::iter::once("grpo").chain(args.iter().copied()), &mut out, &mut err);
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    code
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let name = path.strip_prefix(dir).unwrap().display().to_string();
                files.push((name, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn criterion_8_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    run_cli(&["gen", "--seed", "3", "--domains", "4", "--items", "200", "--out", data.to_str().unwrap()]);
    let mut snaps = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        run_cli(&[
            "matrix",
            "--data",
            data.to_str().unwrap(),
            "--steps",
            "40",
            "--compare",
            "grpo,sft",
            "--jobs",
            if run == "a" { "1" } else { "4" },
            "--out",
            out.to_str().unwrap(),
        ]);
        // the resolved config records the output directory and job count
        let files: Vec<_> = snapshot(&out)
            .into_iter()
            .filter(|(name, _)| !name.ends_with(".conf"))
            .collect();
        snaps.push(files);
    }
    let csvs = snaps[0].iter().filter(|(n, _)| n.ends_with(".csv")).count();
    let logs = snaps[0].iter().filter(|(n, _)| n.ends_with(".jsonl")).count();
    let pass = snaps[0] == snaps[1] && csvs == 3 && logs == 8;
    report(
        8,
        pass,
        format!("{csvs} CSVs and {logs} logs per run, byte-identical: {}", snaps[0] == snaps[1]),
    );
}
