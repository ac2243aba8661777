use std::io::Write;

use serde::Serialize;

use spgptd::experiments::{benchmark, posterior_curves, validate_all, SuiteReport};
use spgptd::simenv::{run_policy_evaluation, uniform_grid_pseudo, Estimator, EstimatorConfig};
use spgptd::PseudoInputSet;

use crate::config::ExperimentConfig;
use crate::output::{num, Header, OutDir};
use crate::Failure;

fn out_dir(command: &'static str, cfg: &ExperimentConfig) -> Result<OutDir, Failure> {
    Ok(OutDir::create(Header::new(command, cfg), &cfg.out)?)
}

fn coords(set: &PseudoInputSet) -> Vec<Vec<f64>> {
    set.points().iter().map(|z| z.coords().to_vec()).collect()
}

pub fn validate(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let out = out_dir("validate", cfg)?;
    let suites = validate_all(&cfg.validate, cfg.seed)?;
    let pass = suites.iter().all(|s| s.pass);

    #[derive(Serialize)]
    struct Report<'a> {
        pass: bool,
        suites: &'a [SuiteReport],
    }
    out.json("validate.json", &Report { pass, suites: &suites })?;
    for s in &suites {
        println!(
            "{:<14} cases={:<4} max_error={:.3e} tolerance={:.1e} {} ({:.2}s)",
            s.suite,
            s.cases,
            s.max_error,
            s.tolerance,
            if s.pass { "PASS" } else { "FAIL" },
            s.seconds
        );
    }
    if pass {
        Ok(())
    } else {
        let failed: Vec<String> = suites
            .iter()
            .filter(|s| !s.pass)
            .map(|s| format!("{} max_error {:e} > {:e}", s.suite, s.max_error, s.tolerance))
            .collect();
        Err(Failure::Suite(failed.join("; ")))
    }
}

pub fn bench(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let out = out_dir("bench", cfg)?;
    let report = benchmark(&cfg.bench, cfg.seed)?;

    let mut w = out.csv("bench.csv")?;
    w.write_record(["step", "recursive_update_seconds", "batch_rebuild_seconds", "k", "t"])?;
    for r in &report.rows {
        w.write_record([
            r.step.to_string(),
            num(r.recursive_update_seconds),
            num(r.batch_rebuild_seconds),
            r.k.to_string(),
            r.t.to_string(),
        ])?;
    }
    w.flush()?;

    // Windows at 10-30% and 80-100% of the run; 50-150 and 400-500 for N = 500.
    let n = cfg.bench.steps;
    let (early, late) = ((n / 10, 3 * n / 10), (4 * n / 5, n));
    let recursive_early = report.window_mean(early.0, early.1, |r| r.recursive_update_seconds);
    let recursive_late = report.window_mean(late.0, late.1, |r| r.recursive_update_seconds);
    let batch_bins = report.bin_means(5, |r| r.batch_rebuild_seconds);
    let batch_increasing = batch_bins.len() == 5 && batch_bins.windows(2).all(|w| w[1] > w[0]);
    let max_spot_error = report.max_spot_error();
    let spot_pass = max_spot_error <= cfg.bench.tolerance;

    #[derive(Serialize)]
    struct Report<'a> {
        steps: usize,
        pseudo: usize,
        early_window: (usize, usize),
        late_window: (usize, usize),
        recursive_early_mean_seconds: f64,
        recursive_late_mean_seconds: f64,
        recursive_ratio: f64,
        batch_quintile_mean_seconds: &'a [f64],
        batch_increasing: bool,
        spot_checks: &'a [spgptd::experiments::SpotCheck],
        max_spot_error: f64,
        tolerance: f64,
        pass: bool,
    }
    out.json(
        "bench.json",
        &Report {
            steps: n,
            pseudo: cfg.bench.pseudo,
            early_window: early,
            late_window: late,
            recursive_early_mean_seconds: recursive_early,
            recursive_late_mean_seconds: recursive_late,
            recursive_ratio: recursive_late / recursive_early,
            batch_quintile_mean_seconds: &batch_bins,
            batch_increasing,
            spot_checks: &report.spot_checks,
            max_spot_error,
            tolerance: cfg.bench.tolerance,
            pass: spot_pass,
        },
    )?;
    println!(
        "steps={n} recursive late/early={:.3} batch increasing={batch_increasing} max spot error={max_spot_error:.3e}",
        recursive_late / recursive_early
    );
    if spot_pass {
        Ok(())
    } else {
        Err(Failure::Suite(format!(
            "recursive and batch predictions differ by {max_spot_error:e} > {:e}",
            cfg.bench.tolerance
        )))
    }
}

pub fn posterior(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let out = out_dir("posterior", cfg)?;
    let curves = posterior_curves(&cfg.posterior, cfg.seed)?;

    let mut w = out.csv("posterior.csv")?;
    w.write_record([
        "x",
        "exact_mean",
        "exact_var",
        "sparse_random_mean",
        "sparse_random_var",
        "sparse_refined_mean",
        "sparse_refined_var",
    ])?;
    for r in &curves.rows {
        w.write_record([
            r.x,
            r.exact_mean,
            r.exact_var,
            r.sparse_random_mean,
            r.sparse_random_var,
            r.sparse_refined_mean,
            r.sparse_refined_var,
        ]
        .map(num))?;
    }
    w.flush()?;

    #[derive(Serialize)]
    struct Report {
        random_rmse: f64,
        refined_rmse: f64,
        initial_log_likelihood: f64,
        refined_log_likelihood: f64,
        evaluations: usize,
        random_pseudo: Vec<Vec<f64>>,
        refined_pseudo: Vec<Vec<f64>>,
    }
    out.json(
        "posterior.json",
        &Report {
            random_rmse: curves.random_rmse,
            refined_rmse: curves.refined_rmse,
            initial_log_likelihood: curves.initial_log_likelihood,
            refined_log_likelihood: curves.refined_log_likelihood,
            evaluations: curves.evaluations,
            random_pseudo: coords(&curves.random_pseudo),
            refined_pseudo: coords(&curves.refined_pseudo),
        },
    )?;
    println!(
        "rmse vs exact: random={:.4e} refined={:.4e} ({} likelihood evaluations)",
        curves.random_rmse, curves.refined_rmse, curves.evaluations
    );
    Ok(())
}

pub fn run(cfg: &ExperimentConfig) -> Result<(), Failure> {
    let out = out_dir("run", cfg)?;
    let rc = &cfg.run;
    let estimator = EstimatorConfig {
        kind: rc.estimator,
        kernel: rc.kernel.clone(),
        noise_var: rc.noise_var,
        pseudo: uniform_grid_pseudo(&rc.mdp, rc.pseudo_per_action)?,
    };
    let eval = run_policy_evaluation(&rc.mdp, &rc.policy, &estimator, rc.episodes, cfg.seed)?;
    let n_actions = rc.mdp.num_actions();
    let on_policy = rc.policy.action_probabilities(n_actions);

    let mut w = out.csv("values.csv")?;
    w.write_record(["state", "action", "mean", "variance", "dp_value", "dp_error"])?;
    for r in &eval.table.rows {
        let selected = on_policy.as_ref().is_none_or(|p| p[r.action] > 0.0);
        let dp_error = match r.dp_value {
            Some(v) if selected => num((r.mean - v).abs()),
            _ => String::new(),
        };
        w.write_record([
            num(r.state),
            r.action.to_string(),
            num(r.mean),
            num(r.variance),
            r.dp_value.map(num).unwrap_or_default(),
            dp_error,
        ])?;
    }
    w.flush()?;

    let mut csv_out = out.raw("episodes.csv")?;
    let mut sidecar = out.raw("episodes.json")?;
    eval.log
        .write(rc.noise_var, &mut csv_out, &mut sidecar, &[out.header().line()])?;
    csv_out.flush()?;
    writeln!(sidecar)?;
    sidecar.flush()?;

    if let Estimator::Recursive(state) = &eval.estimator {
        let mut file = out.raw("state.json")?;
        state.write_checkpoint(&mut file)?;
        file.flush()?;
    }

    let max_dp_error = eval.table.max_dp_error(&rc.policy, n_actions);
    #[derive(Serialize)]
    struct Report {
        episodes: usize,
        transitions: usize,
        max_dp_error: Option<f64>,
    }
    out.json(
        "run.json",
        &Report {
            episodes: eval.log.num_episodes(),
            transitions: eval.log.transitions.len(),
            max_dp_error,
        },
    )?;
    match max_dp_error {
        Some(e) => println!("{} transitions, max on-policy DP error {e:.4}", eval.log.transitions.len()),
        None => println!("{} transitions", eval.log.transitions.len()),
    }
    Ok(())
}
