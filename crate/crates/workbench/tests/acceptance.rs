//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use cpql_core::envs::{normalized_score, EnvKind, EnvSpec, Quality, ScoreRef, HOPPER_REF};
use cpql_core::operators::pql_rate;
use cpql_core::online::TransitionBaseline;
use cpql_core::seed::rng_from_seed;
use cpql_core::theory::{CheckKind, CheckReport, SuiteGrid};
use cpql_workbench::config::{ExperimentConfig, Operator};
use cpql_workbench::o2o::{run_o2o, Arm};
use cpql_workbench::sweep::{run_sweep, write_sweep};
use cpql_workbench::verify::{run_verify, write_verify};
use rand::Rng;

const SUITE_SEED: u64 = 1;

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }
}

/// Reports of one check name, each gated on its own pass flag and on a
/// residual within the pinned tolerance.
struct Family<'a> {
    name: &'a str,
    reports: Vec<&'a CheckReport>,
}

impl<'a> Family<'a> {
    fn of(all: &'a [CheckReport], name: &'a str) -> Self {
        Self {
            name,
            reports: all.iter().filter(|r| r.name == name).collect(),
        }
    }

    fn failures(&self, pinned: f64) -> usize {
        self.reports
            .iter()
            .filter(|r| !(r.asserted && r.passed && r.residual <= pinned && r.tolerance <= pinned))
            .count()
    }

    fn worst(&self) -> f64 {
        self.reports.iter().map(|r| r.residual).fold(f64::NEG_INFINITY, f64::max)
    }

    fn lambdas(&self) -> BTreeSet<String> {
        self.reports.iter().filter_map(|r| r.instance.lambda).map(|l| format!("{l}")).collect()
    }

    fn alphas(&self) -> BTreeSet<String> {
        self.reports.iter().filter_map(|r| r.instance.alpha).map(|a| format!("{a}")).collect()
    }

    fn instances(&self) -> usize {
        self.reports.iter().map(|r| r.instance.seed).collect::<BTreeSet<_>>().len()
    }

    /// Every report passes at `pinned` and at least `min_count` exist.
    fn gate(&self, pinned: f64, min_count: usize) -> (bool, String) {
        let fails = self.failures(pinned);
        let ok = fails == 0 && self.reports.len() >= min_count;
        (
            ok,
            format!(
                "{}: {} reports, {} over {:e}, worst residual {:.3e}",
                self.name,
                self.reports.len(),
                fails,
                pinned,
                self.worst()
            ),
        )
    }
}

fn set(values: &[&str]) -> BTreeSet<String> {
    values.iter().map(|s| s.to_string()).collect()
}

fn criterion_1(reports: &[CheckReport], elapsed: Duration) -> Verdict {
    let f = Family::of(reports, "pql_fixed_point_matches_mixture");
    let (ok, msg) = f.gate(1e-8, 80);
    let shapes_ok = f
        .reports
        .iter()
        .all(|r| r.instance.num_states <= 10 && r.instance.num_actions <= 4 && [0.9, 0.99].contains(&r.instance.gamma));
    let grid_ok = f.lambdas() == set(&["0", "0.3", "0.7", "0.95"]) && f.instances() == 20;
    let fast = elapsed < Duration::from_secs(10);
    Verdict::new(
        ok && shapes_ok && grid_ok && fast,
        format!("{msg}; grid covered {grid_ok}; full suite {:.2} s", elapsed.as_secs_f64()),
    )
}

fn criterion_2(reports: &[CheckReport]) -> Verdict {
    let f = Family::of(reports, "pql_contraction_rate");
    let (ok, msg) = f.gate(1e-9, 80);
    let envelope = f
        .reports
        .iter()
        .map(|r| r.metrics.get("bound_excess").copied().unwrap_or(f64::NAN))
        .fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = (0.95, 0.9674 + 1e-6);
    let asym: Vec<f64> = f
        .reports
        .iter()
        .filter(|r| r.instance.gamma == 0.99 && r.instance.lambda == Some(0.7))
        .filter_map(|r| r.metrics.get("asymptotic_ratio").copied())
        .collect();
    let in_window = !asym.is_empty() && asym.iter().all(|x| (lo..=hi).contains(x));
    let (amin, amax) = asym
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
    Verdict::new(
        ok && envelope <= 1e-9 && in_window,
        format!(
            "{msg}; envelope excess {envelope:.2e}; asymptotic ratio at gamma=0.99, lambda=0.7 over {} instances in [{amin:.7}, {amax:.7}], window [{lo}, {hi:.7}], rate {:.7}",
            asym.len(),
            pql_rate(0.99, 0.7)
        ),
    )
}

fn criterion_3(reports: &[CheckReport]) -> Verdict {
    let lb = Family::of(reports, "exact_lower_bound");
    let (ok_lb, msg_lb) = lb.gate(1e-9, 20 * 12);
    let cover = lb.alphas() == set(&["0", "0.1", "1", "10"]) && lb.lambdas() == set(&["0", "0.5", "0.9"]) && lb.instances() == 20;
    let gap = Family::of(reports, "closed_form_conservative_gap");
    let (ok_gap, msg_gap) = gap.gate(1e-8, 20);
    // The asserted right-hand side is the closed form itself.
    let formula_ok = gap.reports.iter().all(|r| {
        let (a, l, g) = (r.instance.alpha.unwrap_or(f64::NAN), r.instance.lambda.unwrap_or(f64::NAN), r.instance.gamma);
        let expected = a * (1.0 - l) * (r.instance.num_actions as f64 - 1.0) / (1.0 - g);
        (r.rhs - expected).abs() <= 1e-12 * expected.abs().max(1.0)
    });
    Verdict::new(
        ok_lb && cover && ok_gap && formula_ok,
        format!("{msg_lb}; grid covered {cover}; {msg_gap}; closed form recomputed {formula_ok}"),
    )
}

fn criterion_4(reports: &[CheckReport]) -> Verdict {
    let f = Family::of(reports, "improvement_over_behavior");
    let (ok, msg) = f.gate(1e-8, 20);
    Verdict::new(ok, msg)
}

fn criterion_5(reports: &[CheckReport]) -> Verdict {
    let f = Family::of(reports, "suboptimality_gap_bound");
    let (ok, msg) = f.gate(1e-8, 20 * 6);
    let cover = f.lambdas().is_superset(&set(&["0", "0.3", "0.7"])) && f.alphas() == set(&["0.1", "1"]) && f.instances() >= 20;
    Verdict::new(ok && cover, format!("{msg}; grid covered {cover}"))
}

fn criterion_6(reports: &[CheckReport]) -> Verdict {
    let ratio = Family::of(reports, "ratio_nonnegative");
    let (ok_r, msg_r) = ratio.gate(1e-12, 1);
    let trials_ok = ratio
        .reports
        .iter()
        .all(|r| r.metrics.get("trials").copied() == Some(10_000.0));
    let mut parts = vec![msg_r];
    let mut ok = ok_r && trials_ok;
    for (name, pinned) in [
        ("ratio_zero_on_equal_pairs", 1e-12),
        ("ratio_one_hot_against_uniform", 1e-12),
        ("visitation_identity", 1e-10),
        ("visitation_bound", 1e-8),
        ("sampling_error_bound", 1e-8),
        ("return_difference_bound", 1e-8),
    ] {
        let (o, m) = Family::of(reports, name).gate(pinned, 1);
        ok &= o;
        parts.push(m);
    }
    for name in ["sampling_error_bound", "return_difference_bound"] {
        let steps: BTreeSet<u64> = Family::of(reports, name)
            .reports
            .iter()
            .filter_map(|r| r.metrics.get("steps").map(|s| *s as u64))
            .collect();
        let covered = steps.contains(&500) && steps.contains(&10_000);
        ok &= covered;
        parts.push(format!("{name} dataset sizes {steps:?}"));
    }
    Verdict::new(ok, parts.join("; "))
}

fn criterion_7(reports: &[CheckReport]) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, pinned) in [
        ("reduction_pql_lambda0_bellman", 1e-12),
        ("reduction_cpql_lambda0_cql", 1e-10),
        ("reduction_series_closed_form", 1e-8),
        ("reduction_nstep1_bellman", 1e-12),
    ] {
        let (o, m) = Family::of(reports, name).gate(pinned, 20);
        ok &= o;
        parts.push(m);
    }
    let truncation_ok = Family::of(reports, "reduction_series_closed_form").reports.iter().all(|r| {
        match (r.instance.lambda, r.metrics.get("n_max")) {
            (Some(l), Some(n)) => l.powf(*n) <= 1e-12,
            _ => false,
        }
    });
    parts.push(format!("lambda^n_max <= 1e-12: {truncation_ok}"));
    Verdict::new(ok && truncation_ok, parts.join("; "))
}

fn criterion_8(reports: &[CheckReport]) -> Verdict {
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, pinned) in [
        ("targets_lambda0_one_step", 0.0),
        ("targets_single_step", 0.0),
        ("targets_expansion", 1e-12),
    ] {
        let (o, m) = Family::of(reports, name).gate(pinned, 20);
        ok &= o;
        parts.push(m);
    }
    let lambdas_ok = Family::of(reports, "targets_expansion").lambdas() == set(&["0.9"]);
    Verdict::new(ok && lambdas_ok, parts.join("; "))
}

/// Chain of 10 states with slip 0.1 and discount 0.99, 50 medium-quality
/// episodes of 20 steps, learner defaults.
fn chain_fixture() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env = EnvSpec::new(EnvKind::Chain { len: 10, slip: 0.1 }, 0).with_gamma(0.99);
    cfg.dataset.quality = Quality::Medium;
    cfg.dataset.episodes = 50;
    cfg.dataset.horizon = 20;
    cfg.eval.env_refs = true;
    cfg.master_seed = 1;
    cfg.repeats = 5;
    cfg
}

fn alpha_fixture() -> ExperimentConfig {
    let mut cfg = chain_fixture();
    cfg.alpha_grid = vec![0.1, 1.0, 5.0, 10.0];
    cfg.lambda_grid = vec![0.7];
    cfg.operators = vec![Operator::Cpql, Operator::Cql];
    cfg
}

fn criterion_9(tmp: &Path) -> (Verdict, Duration) {
    let cfg = alpha_fixture();
    let t0 = Instant::now();
    let outcome = match run_sweep(&cfg, Some(1)) {
        Ok(o) => o,
        Err(e) => return (Verdict::new(false, format!("sweep failed: {e}")), t0.elapsed()),
    };
    let elapsed = t0.elapsed();
    if let Err(e) = write_sweep(&outcome, &cfg, &tmp.join("sweep_1")) {
        return (Verdict::new(false, format!("writing sweep failed: {e}")), elapsed);
    }
    let spread = |op: Operator| {
        outcome
            .spreads
            .iter()
            .find(|s| s.operator == op)
            .and_then(|s| s.spread_score)
    };
    let means: Vec<String> = outcome
        .summary
        .iter()
        .map(|r| format!("{}@{}={:.2}", r.operator.name(), r.alpha, r.mean_score.unwrap_or(f64::NAN)))
        .collect();
    let verdict = match (spread(Operator::Cpql), spread(Operator::Cql)) {
        (Some(c), Some(q)) => Verdict::new(
            c <= q && elapsed < Duration::from_secs(300) && outcome.failed_cells() == 0,
            format!(
                "score spread over alpha: cpql(lambda=0.7) {c:.4} vs cql(lambda=0) {q:.4}; means {}; {} cells in {:.1} s",
                means.join(" "),
                outcome.results.len(),
                elapsed.as_secs_f64()
            ),
        ),
        _ => Verdict::new(false, "spreads missing"),
    };
    (verdict, elapsed)
}

fn criterion_10() -> Verdict {
    let mut cfg = chain_fixture();
    cfg.alpha_grid = vec![1.0];
    cfg.o2o.baselines = vec![TransitionBaseline::ScratchPql];
    let runs = match run_o2o(&cfg, None) {
        Ok(r) => r,
        Err(e) => return Verdict::new(false, format!("o2o failed: {e}")),
    };
    let pre: Vec<_> = runs.iter().filter(|r| r.arm == Arm::Configured).collect();
    let scratch: Vec<_> = runs.iter().filter(|r| r.arm == Arm::Baseline(TransitionBaseline::ScratchPql)).collect();
    let carry_ok = !pre.is_empty() && pre.iter().all(|r| r.carry_over_gap() == Some(0.0));
    let finals = |v: &[&cpql_workbench::o2o::O2oRun]| v.iter().map(|r| r.trace.final_j_eval).collect::<Vec<f64>>();
    let (a, b) = (finals(&pre), finals(&scratch));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(",");
    Verdict::new(
        carry_ok && a.len() == 5 && b.len() == 5 && mean(&a) >= mean(&b),
        format!(
            "carry-over exact {carry_ok}; pretrained mean {:.3} [{}] vs scratch mean {:.3} [{}]",
            mean(&a),
            fmt(&a),
            mean(&b),
            fmt(&b)
        ),
    )
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        if let Ok(entries) = fs::read_dir(&d) {
            for e in entries.flatten() {
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    let rel = p.strip_prefix(dir).unwrap().display().to_string();
                    out.push((rel, fs::read(&p).unwrap_or_default()));
                }
            }
        }
    }
    out.sort();
    out
}

fn criterion_11(tmp: &Path, reports_default: &[CheckReport]) -> Verdict {
    let grid = SuiteGrid::default();
    let mut parts = Vec::new();
    let mut ok = true;
    for threads in [1usize, 4] {
        let dir = tmp.join(format!("verify_{threads}"));
        let written = run_verify(SUITE_SEED, &grid, Some(threads)).and_then(|r| write_verify(&r, SUITE_SEED, &grid, &dir));
        if let Err(e) = written {
            return Verdict::new(false, format!("verify with {threads} threads failed: {e}"));
        }
    }
    let dir = tmp.join("verify_default");
    if let Err(e) = write_verify(reports_default, SUITE_SEED, &grid, &dir) {
        return Verdict::new(false, format!("verify write failed: {e}"));
    }
    let v1 = files_under(&tmp.join("verify_1"));
    let same_verify = v1 == files_under(&tmp.join("verify_4")) && v1 == files_under(&dir) && !v1.is_empty();
    ok &= same_verify;
    parts.push(format!("verify outputs identical across 1, 4 and default threads: {same_verify}"));

    let cfg = alpha_fixture();
    match run_sweep(&cfg, Some(4)).and_then(|o| write_sweep(&o, &cfg, &tmp.join("sweep_4"))) {
        Ok(()) => {
            let s1 = files_under(&tmp.join("sweep_1"));
            let s4 = files_under(&tmp.join("sweep_4"));
            let same = s1 == s4 && !s1.is_empty();
            ok &= same;
            parts.push(format!("sweep outputs identical across 1 and 4 threads ({} files): {same}", s1.len()));
        }
        Err(e) => {
            ok = false;
            parts.push(format!("sweep with 4 threads failed: {e}"));
        }
    }
    Verdict::new(ok, parts.join("; "))
}

fn criterion_12() -> Verdict {
    let hopper = ScoreRef {
        ref_min: -20.27,
        ref_max: 3234.3,
    };
    let consts_ok = HOPPER_REF == hopper;
    let top = normalized_score(hopper.ref_max, HOPPER_REF);
    let bottom = normalized_score(hopper.ref_min, HOPPER_REF);
    let ends_ok = (top - 100.0).abs() <= 1e-10 && bottom.abs() <= 1e-10;
    let mid = normalized_score(1600.0, HOPPER_REF);
    let mid_ok = (mid - 49.79).abs() < 0.01;
    let mut rng = rng_from_seed(12);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let x: f64 = rng.random_range(-5000.0..5000.0);
        let y: f64 = rng.random_range(-5000.0..5000.0);
        let t: f64 = rng.random_range(0.0..1.0);
        let lhs = normalized_score(t * x + (1.0 - t) * y, HOPPER_REF);
        let rhs = t * normalized_score(x, HOPPER_REF) + (1.0 - t) * normalized_score(y, HOPPER_REF);
        worst = worst.max((lhs - rhs).abs());
    }
    Verdict::new(
        consts_ok && ends_ok && mid_ok && worst <= 1e-10,
        format!("refs {consts_ok}; score(max) {top}, score(min) {bottom}; score(1600) {mid:.4}; affine residual {worst:.2e} over 100 points"),
    )
}

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let grid = SuiteGrid::default();
    let t0 = Instant::now();
    let reports = run_verify(SUITE_SEED, &grid, None).expect("suite runs");
    let suite_time = t0.elapsed();
    let equalities = reports.iter().filter(|r| r.kind == CheckKind::Equality).count();
    println!(
        "suite: {} reports ({} equalities) at seed {SUITE_SEED} in {:.2} s",
        reports.len(),
        equalities,
        suite_time.as_secs_f64()
    );

    let (c9, _) = criterion_9(tmp.path());
    let verdicts = vec![
        (1, "fixed point equals mixture value", criterion_1(&reports, suite_time)),
        (2, "contraction rate", criterion_2(&reports)),
        (3, "conservative lower bound", criterion_3(&reports)),
        (4, "policy improvement", criterion_4(&reports)),
        (5, "sub-optimality gap", criterion_5(&reports)),
        (6, "supporting inequalities", criterion_6(&reports)),
        (7, "reductions", criterion_7(&reports)),
        (8, "target recursion", criterion_8(&reports)),
        (9, "alpha sensitivity on the chain", c9),
        (10, "offline-to-online carry-over", criterion_10()),
        (11, "thread-count determinism", criterion_11(tmp.path(), &reports)),
        (12, "normalized score", criterion_12()),
    ];
    let mut failed = 0;
    for (id, title, v) in &verdicts {
        let tag = if v.passed { "PASS" } else { "FAIL" };
        if !v.passed {
            failed += 1;
        }
        println!("criterion {id:>2} [{tag}] {title}: {}", v.detail);
    }
    println!("{} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
