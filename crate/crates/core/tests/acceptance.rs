//! Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
//! criterion fails. Everything is seeded from `SEED`, fixed before the first
//! run and never tuned.

use std::path::{Path, PathBuf};
use std::time::Instant;

use sur_core::experiment::{
    cmd_check, cmd_compare, cmd_run, run_check_suites, run_replications, summarize, CheckConfig,
    ExperimentConfig, Overrides, Suite, Summary,
};
use sur_core::functionals::{eval_kg, eval_vev};
use sur_core::grid::{
    build_prior, condition, Domain, GaussianMeasure, KernelFamily, KernelSpec, Observation,
    PathSampler,
};
use sur_core::rng::{derive_seed, rng_from_seed, standard_normals};
use sur_core::special::bvn_orthant;
use sur_core::strategy::Epsilon;

const SEED: u64 = 20261017;

struct Line {
    pass: bool,
    text: String,
}

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs_dir().join(name), &Overrides::default()).expect("config loads")
}

fn median_of(summary: &Summary, metric: &str) -> f64 {
    summary
        .metrics
        .iter()
        .find(|m| m.name == metric)
        .map(|m| m.normalized_final.median)
        .expect("metric present")
}

/// Per-functional summaries of the runs behind criteria 2-5, 8 and 9.
struct Runs {
    summaries: Vec<Summary>,
    seconds: f64,
}

fn run_all(config: &ExperimentConfig) -> Runs {
    let start = Instant::now();
    let (domain, specs) = config.validate_compare().expect("valid config");
    let summaries = specs
        .iter()
        .map(|spec| {
            let traces = run_replications(config, &domain, spec).expect("runs complete");
            summarize(spec, &domain, &traces).expect("summary")
        })
        .collect();
    Runs {
        summaries,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// The normalized final uncertainty per functional, as in criterion 2.
fn decay(runs: &Runs) -> Vec<(String, f64)> {
    runs.summaries
        .iter()
        .map(|s| {
            let value = if s.label == "ei" {
                median_of(s, "gap_best")
            } else {
                s.h_ratio.median
            };
            (s.label.clone(), value)
        })
        .collect()
}

fn describe(values: &[(String, f64)]) -> String {
    values
        .iter()
        .map(|(k, v)| format!("{k}={v:.3e}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn criterion_1() -> Line {
    let start = Instant::now();
    let suites = [
        Suite::SupermartingaleIbv,
        Suite::SupermartingaleVev,
        Suite::SupermartingaleKg,
        Suite::SupermartingaleEi,
    ];
    let report =
        run_check_suites(&CheckConfig::default(), SEED, &suites, false).expect("check runs");
    let seconds = start.elapsed().as_secs_f64();
    let detail = report
        .suites
        .iter()
        .map(|s| {
            format!(
                "{}: {}/{} failures, worst margin {:.2e}",
                s.name.name(),
                s.failures,
                s.comparisons,
                s.worst_margin
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Line {
        pass: report.pass && seconds <= 300.0,
        text: format!("supermartingale inequality ({detail}; {seconds:.0}s)"),
    }
}

fn criterion_2(runs: &Runs) -> Line {
    let values = decay(runs);
    Line {
        pass: values.iter().all(|(_, v)| *v <= 0.05) && runs.seconds <= 600.0,
        text: format!(
            "H_n -> 0, median final/initial <= 0.05 ({}; {:.0}s)",
            describe(&values),
            runs.seconds
        ),
    }
}

fn summary<'a>(runs: &'a Runs, label: &str) -> &'a Summary {
    runs.summaries
        .iter()
        .find(|s| s.label == label)
        .expect("functional was run")
}

fn criterion_3(runs: &Runs) -> Line {
    let s = summary(runs, "ibv");
    let (prob, plugin) = (median_of(s, "l2_prob"), median_of(s, "l2_plugin"));
    Line {
        pass: prob <= 0.05 && plugin <= 0.05,
        text: format!(
            "IBV consistency (median L2 {prob:.3e}, plug-in error {plugin:.3e}, per unit weight)"
        ),
    }
}

fn criterion_4(runs: &Runs) -> Line {
    let gap = median_of(summary(runs, "vev"), "volume_gap");
    Line {
        pass: gap <= 0.05,
        text: format!("VEV consistency (median volume gap {gap:.3e} per unit weight)"),
    }
}

fn criterion_5(runs: &Runs) -> Line {
    let gap = median_of(summary(runs, "kg"), "max_gap");
    Line {
        pass: gap <= 0.02,
        text: format!("KG consistency (median max gap {gap:.3e} of the path range)"),
    }
}

fn criterion_6() -> Line {
    let cfg = CheckConfig {
        instances: 100,
        ..CheckConfig::default()
    };
    let report = run_check_suites(
        &cfg,
        SEED,
        &[Suite::EiClosedVsQuadrature, Suite::KgExactVsMc],
        false,
    )
    .expect("check runs");
    let detail = report
        .suites
        .iter()
        .map(|s| {
            format!(
                "{}: {}/{} failures",
                s.name.name(),
                s.failures,
                s.comparisons
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    Line {
        pass: report.pass,
        text: format!("closed forms vs quadrature and MC ({detail})"),
    }
}

/// A conditioned posterior on a 5-point grid with a random threshold.
fn five_point_instance(seed: u64) -> (Domain, GaussianMeasure, f64) {
    use rand::Rng;
    let mut rng = rng_from_seed(seed);
    let family = [
        KernelFamily::Matern52,
        KernelFamily::SquaredExponential,
        KernelFamily::Matern32,
    ][rng.random_range(0..3)];
    let kernel = KernelSpec::new(
        family,
        rng.random_range(0.5..2.0),
        vec![rng.random_range(0.1..0.6)],
    );
    let noise: f64 = if rng.random_bool(0.5) {
        0.0
    } else {
        rng.random_range(0.05..0.3)
    };
    let domain = Domain::grid_1d(0.0, 1.0, 5)
        .unwrap()
        .with_noise(vec![noise; 5])
        .unwrap();
    let prior = build_prior(&domain, rng.random_range(-1.0..1.0), &kernel).unwrap();
    let obs: Vec<Observation> = (0..rng.random_range(0..3))
        .map(|_| Observation {
            index: rng.random_range(0..5),
            value: rng.random_range(-1.5..1.5),
        })
        .collect();
    let post = condition(&prior, &domain, &obs).unwrap();
    let threshold = rng.random_range(-1.0..1.0);
    (domain, post, threshold)
}

/// (estimate, stderr) of Var(Σ w 1{ξ ≥ T}) from `draws` sample paths.
fn vev_monte_carlo(
    domain: &Domain,
    measure: &GaussianMeasure,
    threshold: f64,
    draws: usize,
    seed: u64,
) -> (f64, f64) {
    let sampler = PathSampler::new(measure).unwrap();
    let n = measure.len();
    let z = standard_normals(seed, draws * n);
    let mut path = vec![0.0; n];
    let volumes: Vec<f64> = z
        .chunks(n)
        .map(|z| {
            sampler.sample_into(z, &mut path);
            path.iter()
                .zip(domain.weights())
                .filter(|(v, _)| **v >= threshold)
                .map(|(_, w)| w)
                .sum()
        })
        .collect();
    let count = draws as f64;
    let mean = volumes.iter().sum::<f64>() / count;
    let sq: Vec<f64> = volumes.iter().map(|v| (v - mean).powi(2)).collect();
    let var = sq.iter().sum::<f64>() / (count - 1.0);
    let spread = sq.iter().map(|s| (s - var).powi(2)).sum::<f64>() / (count - 1.0);
    (var, (spread / count).sqrt())
}

fn criterion_7() -> Line {
    let instances = 20;
    let mut vev_failures = 0;
    for i in 0..instances {
        let seed = derive_seed(SEED, 700 + i);
        let (domain, measure, threshold) = five_point_instance(seed);
        let exact = eval_vev(&measure, &domain, threshold).unwrap().value;
        let (mc, se) = vev_monte_carlo(
            &domain,
            &measure,
            threshold,
            1_000_000,
            derive_seed(seed, 1),
        );
        if (exact - mc).abs() > 3.0 * se {
            vev_failures += 1;
        }
    }
    let orthant_error = (-3..=3)
        .map(|k| {
            let rho = 0.3 * k as f64;
            (bvn_orthant(0.0, 0.0, rho) - (0.25 + rho.asin() / (2.0 * std::f64::consts::PI))).abs()
        })
        .fold(0.0, f64::max);
    let atoms = GaussianMeasure::new(vec![0.0, 0.0], nalgebra::DMatrix::identity(2, 2)).unwrap();
    let kg = eval_kg(&atoms, 1_000_000, derive_seed(SEED, 7)).unwrap();
    let kg_z = (kg.value - 1.0 / std::f64::consts::PI.sqrt()) / kg.stderr;
    Line {
        pass: vev_failures == 0 && orthant_error <= 1e-8 && kg_z.abs() <= 3.0,
        text: format!(
            "functional oracles (VEV vs MC: {vev_failures}/{instances} failures; orthant error {orthant_error:.1e}; KG two atoms z={kg_z:.2})"
        ),
    }
}

fn criterion_8(runs: &Runs) -> Line {
    let violations: usize = runs.summaries.iter().map(|s| s.variance_violations).sum();
    Line {
        pass: violations == 0,
        text: format!("monotone conditional variance ({violations} violations)"),
    }
}

fn criterion_9(exact: &Runs, quasi: &Runs, epsilon: Epsilon) -> Line {
    let violations: usize = exact
        .summaries
        .iter()
        .chain(&quasi.summaries)
        .map(|s| s.quasi_sur_violations)
        .sum();
    let values = decay(quasi);
    let decays = values.iter().all(|(_, v)| *v <= 0.10);
    Line {
        pass: violations == 0 && decays && matches!(epsilon, Epsilon::Harmonic { c } if c == 1.0),
        text: format!(
            "quasi-SUR compliance ({violations} violations; eps_n = 1/n decay {})",
            describe(&values)
        ),
    }
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            (
                path.file_name().unwrap().to_string_lossy().into_owned(),
                std::fs::read(&path).unwrap(),
            )
        })
        .collect();
    files.sort();
    files
}

fn criterion_10() -> Line {
    let tmp = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut checked = 0;
    for (name, command) in [
        ("minimal.json", "run"),
        ("compare.json", "compare"),
        ("check.json", "check"),
    ] {
        let mut outputs = Vec::new();
        for copy in 0..2 {
            let mut config = load(name);
            config.output_dir = tmp.path().join(format!("{command}_{copy}"));
            match command {
                "run" => drop(cmd_run(&config).unwrap()),
                "compare" => drop(cmd_compare(&config).unwrap()),
                _ => drop(cmd_check(&config, false).unwrap()),
            }
            outputs.push(read_tree(&config.output_dir));
        }
        checked += outputs[0].len();
        identical &= !outputs[0].is_empty() && outputs[0] == outputs[1];
    }
    Line {
        pass: identical,
        text: format!("determinism ({checked} output files compared byte for byte)"),
    }
}

fn main() {
    let exact_config = load("acceptance.json");
    let quasi_config = load("acceptance_quasi.json");
    let exact = run_all(&exact_config);
    let quasi = run_all(&quasi_config);
    let lines = [
        criterion_1(),
        criterion_2(&exact),
        criterion_3(&exact),
        criterion_4(&exact),
        criterion_5(&exact),
        criterion_6(),
        criterion_7(),
        criterion_8(&exact),
        criterion_9(&exact, &quasi, quasi_config.strategy.epsilon),
        criterion_10(),
    ];
    for (k, line) in lines.iter().enumerate() {
        println!(
            "{} criterion {:>2}: {}",
            if line.pass { "PASS" } else { "FAIL" },
            k + 1,
            line.text
        );
    }
    if lines.iter().any(|l| !l.pass) {
        std::process::exit(1);
    }
}
