// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//! Run with `cargo test --release -p steerlab --test acceptance`.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use steerlab::game::{self, Factor};
use steerlab::model::{
    build_model, planted_truth, CapturePosition, LanguageModel, ModelConfig, ToyTransformer,
};
use steerlab::runner::{
    self, analyze_run, artifacts, derive_seed, orthogonality_report, run_baseline, run_sweep,
    GridSpec, RunStore, SweepConfig, SweepGrid,
};
use steerlab::stats::{
    self, ci_overlap_flag, encode_design, fit_logistic, log_likelihood, score, standard_columns,
    DesignMatrix, INTERCEPT,
};
use steerlab::steering::{self, extract_default_iv, partial_against_others, MIN_GROUP_SIZE};
use steerlab::vecspace::{self, Vector};

const DESIGN_SEED: u64 = 1;
const SWEEP_SEED: u64 = 2;
const BASELINE_K: usize = 1000;
const CELL_K: usize = 100;

const ORTHO_REL_TOL: f64 = 1e-10;
const SINGLE_FORMULA_TOL: f64 = 1e-12;
const ORTHO_BUDGET: Duration = Duration::from_secs(10);
const COSINE_MIN: f64 = 0.95;
const ROTATION_MAX_DEG: f64 = 5.0;
const RECOVERY_BUDGET: Duration = Duration::from_secs(120);
const INJECTION_TOL: f64 = 1e-9;
const SPEARMAN_MIN: f64 = 0.9;
const SATURATED_TOL: f64 = 1e-6;
const SCORE_TOL: f64 = 1e-4;
const NULL_REPLICATES: u64 = 20;
const NULL_OVERLAP_MIN: f64 = 0.95;
const FLAG_BUDGET: f64 = 0.10;
const PIPELINE_BUDGET: Duration = Duration::from_secs(30 * 60);

struct Outcome {
    id: &'static str,
    pass: bool,
    gating: bool,
}

#[derive(Default)]
struct Board {
    outcomes: Vec<Outcome>,
}

impl Board {
    fn record(&mut self, id: &'static str, title: &str, pass: bool, detail: String) {
        self.push(id, title, pass, detail, true);
    }

    fn push(&mut self, id: &'static str, title: &str, pass: bool, detail: String, gating: bool) {
        let verdict = if pass { "PASS" } else { "FAIL" };
        let note = if gating || pass { "" } else { " [reported, not gating]" };
        println!("criterion {id:>3} {verdict}  {title}: {detail}{note}");
        self.outcomes.push(Outcome { id, pass, gating });
    }
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    Vector::new((0..dim).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn c1_orthogonalization(board: &mut Board) {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    let (mut worst_rel, mut worst_single, mut draws) = (0.0f64, 0.0f64, 0usize);
    for &dim in &[4usize, 64, 512] {
        for _ in 0..1000 {
            let target = gaussian(&mut rng, dim).scale(rng.gen_range(0.01..100.0));
            let m = rng.gen_range(1..=dim.min(8));
            let mut against: Vec<Vector> = (0..m)
                .map(|_| gaussian(&mut rng, dim).scale(rng.gen_range(0.01..100.0)))
                .collect();
            if m > 1 && rng.gen_bool(0.2) {
                // Nearly dependent conditioner.
                let mix = against[0].add_scaled(0.5, &against[1]).unwrap();
                against.push(mix.add_scaled(1e-9, &gaussian(&mut rng, dim)).unwrap());
            }
            let o = vecspace::orthogonalize(&target, &against).unwrap();
            for c in &against {
                let rel = vecspace::dot(&o.vector, c).unwrap().abs() / (target.norm() * c.norm());
                worst_rel = worst_rel.max(rel);
            }
            let c = &against[0];
            let single = vecspace::orthogonalize(&target, std::slice::from_ref(c)).unwrap();
            let k = vecspace::dot(&target, c).unwrap() / vecspace::dot(c, c).unwrap();
            for (got, (t, ci)) in single.vector.as_slice().iter().zip(target.as_slice().iter().zip(c.as_slice())) {
                let want = t - k * ci;
                worst_single = worst_single.max((got - want).abs() / target.norm());
            }
            draws += 1;
        }
    }
    let elapsed = start.elapsed();
    board.record(
        "1",
        "orthogonalization",
        worst_rel <= ORTHO_REL_TOL && worst_single <= SINGLE_FORMULA_TOL && elapsed < ORTHO_BUDGET,
        format!(
            "{draws} draws, max relative dot {worst_rel:.2e} (<= {ORTHO_REL_TOL:e}), \
             single-conditioner error {worst_single:.2e} (<= {SINGLE_FORMULA_TOL:e}), {:.2}s (< 10s)",
            elapsed.as_secs_f64()
        ),
    );
}

fn c2_recovery(board: &mut Board, model: &ToyTransformer) -> (RunStore, Duration) {
    let start = Instant::now();
    let store = run_baseline(model, BASELINE_K, DESIGN_SEED, CapturePosition::LastPromptToken).unwrap();
    let baseline_time = start.elapsed();
    let truth = planted_truth(model);
    let layer = truth.planting_layer;
    let ivs: Vec<_> = Factor::ALL
        .iter()
        .map(|&f| extract_default_iv(&store.records, f, layer, MIN_GROUP_SIZE).unwrap())
        .collect();
    let mut cosines = Vec::new();
    let mut rotations = Vec::new();
    for (f, iv) in Factor::ALL.iter().zip(&ivs) {
        cosines.push((f, vecspace::cosine(&iv.vector, truth.direction(*f)).unwrap().abs()));
        let partial = partial_against_others(*f, &ivs).unwrap();
        let c = vecspace::cosine(&iv.vector, &partial.vector).unwrap().clamp(-1.0, 1.0);
        rotations.push((f, c.acos().to_degrees()));
    }
    let elapsed = start.elapsed();
    let fmt = |v: &[(&Factor, f64)], p: usize| {
        v.iter().map(|(f, x)| format!("{f}={x:.p$}")).collect::<Vec<_>>().join(" ")
    };
    let cos_ok = cosines.iter().all(|c| c.1 >= COSINE_MIN);
    board.record(
        "2a",
        "planted-direction recovery, cosine",
        cos_ok && elapsed < RECOVERY_BUDGET,
        format!(
            "layer {layer}, n={BASELINE_K}: |cos| {} (>= {COSINE_MIN}), {:.1}s (< 120s)",
            fmt(&cosines, 3),
            elapsed.as_secs_f64()
        ),
    );
    let rot_ok = rotations.iter().all(|r| r.1 < ROTATION_MAX_DEG);
    board.push(
        "2b",
        "planted-direction recovery, partialing rotation",
        rot_ok,
        format!("degrees {} (< {ROTATION_MAX_DEG})", fmt(&rotations, 1)),
        false,
    );
    (store, baseline_time)
}

fn c3_injection_law(board: &mut Board, model: &ToyTransformer, baseline: &RunStore) {
    let truth = planted_truth(model);
    let w = &truth.decision_direction;
    let mut worst = 0.0f64;
    let mut checks = 0;
    for layer in 1..model.num_layers() {
        let mut cfg = SweepConfig::new(model.num_layers(), SWEEP_SEED);
        cfg.grid.layers = vec![layer];
        let p = runner::layer_injection(baseline, &cfg, layer).vector.unwrap();
        let per_unit = vecspace::dot(w, &p).unwrap();
        for index in 0..4 {
            let config = game::sample_config(DESIGN_SEED + 100, index);
            let prompt = model.tokenizer().encode(&game::build_prompt(&config)).unwrap();
            let gen = |spec: Option<&steerlab::model::InjectionSpec>| {
                model
                    .generate_with_capture(&prompt, spec, CapturePosition::LastPromptToken, config.trial_seed)
                    .unwrap()
                    .decision_log_odds
                    .unwrap()
            };
            let base = gen(None);
            for alpha in [-30.0, -1.0, 0.0, 1.0, 30.0] {
                let spec = steering::make_injection_spec(&p, layer, alpha, model.num_layers(), 30.0).unwrap();
                let shift = gen(Some(&spec)) - base;
                worst = worst.max((shift - alpha * per_unit).abs());
                checks += 1;
            }
        }
    }
    board.record(
        "3",
        "first-order injection law",
        worst <= INJECTION_TOL,
        format!("{checks} (layer, prompt, alpha) checks, max |shift - alpha<w_D,p>| {worst:.2e} (<= {INJECTION_TOL:e})"),
    );
}

fn nonzero_rates(grid: &SweepGrid) -> Vec<f64> {
    grid.cells.iter().map(|c| c.nonzero_rate.unwrap_or(f64::NAN)).collect()
}

fn c4_monotonicity(board: &mut Board, model: &ToyTransformer, baseline: &RunStore) {
    let alphas = [-30.0, -10.0, 0.0, 10.0, 30.0];
    let layer = planted_truth(model).planting_layer;
    let mut rhos = Vec::new();
    let mut lines = Vec::new();
    for rep in 0..5u64 {
        let mut cfg = SweepConfig::new(model.num_layers(), derive_seed(0xC4, rep));
        cfg.grid = GridSpec {
            alphas: alphas.to_vec(),
            layers: vec![layer],
        };
        cfg.k = CELL_K;
        let grid = run_sweep(model, baseline, &cfg).unwrap();
        let rates = nonzero_rates(&grid);
        let rho = stats::spearman(&alphas, &rates).unwrap_or(f64::NAN);
        lines.push(rates.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>().join("/"));
        rhos.push(rho);
    }
    board.record(
        "4",
        "behavioral steering monotonicity",
        rhos.iter().all(|&r| r > SPEARMAN_MIN),
        format!(
            "layer {layer}, rho per replicate {} (> {SPEARMAN_MIN}); rates {}",
            rhos.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(" "),
            lines.join(" | ")
        ),
    );
}

fn c5_regression(board: &mut Board, baseline: &RunStore) {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (x, ones) in [(0.0, 4), (1.0, 8)] {
        for i in 0..10 {
            rows.push(vec![x, 1.0]);
            y.push(if i < ones { 1.0 } else { 0.0 });
        }
    }
    let design = DesignMatrix::new(vec!["x".into(), INTERCEPT.into()], &rows, y).unwrap();
    let fit = fit_logistic(&design).unwrap();
    let b0 = fit.coefficient(INTERCEPT).unwrap().estimate;
    let b1 = fit.coefficient("x").unwrap().estimate;
    let err_closed = (b0 - (4.0f64 / 6.0).ln()).abs().max((b1 - 6.0f64.ln()).abs());

    let d = encode_design(&baseline.records).unwrap();
    let f = fit_logistic(&d).unwrap();
    let beta = f.estimates();
    let h = 1e-7;
    let mut worst_fd = 0.0f64;
    for j in 0..beta.len() {
        let (mut up, mut down) = (beta.clone(), beta.clone());
        up[j] += h;
        down[j] -= h;
        let g = (log_likelihood(&d.x, &d.y, &up) - log_likelihood(&d.x, &d.y, &down)) / (2.0 * h);
        worst_fd = worst_fd.max(g.abs());
    }
    let analytic = score(&d.x, &d.y, &beta).iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let or = 1.059f64.exp();
    board.record(
        "5",
        "regression oracle",
        err_closed <= SATURATED_TOL && worst_fd <= SCORE_TOL && (or - 2.88).abs() <= 0.01,
        format!(
            "2x2 saturated error {err_closed:.2e} (<= {SATURATED_TOL:e}), finite-difference score {worst_fd:.2e} \
             (<= {SCORE_TOL:e}; analytic {analytic:.2e}) on n={}, exp(1.059) = {or:.4} (2.88 +- 0.01)",
            d.n()
        ),
    );
}

fn c6_grid(board: &mut Board, grid: &SweepGrid) {
    let large = GridSpec::default_for(32).cell_count();
    let toy = GridSpec::default_for(8).cell_count();
    let product = grid.config.grid.alphas.len() * grid.config.grid.layers.len();
    let accounted = grid.completed() + grid.missing();
    board.record(
        "6",
        "grid accounting",
        large == 1891 && toy == 427 && accounted == product && grid.cells.len() == product,
        format!(
            "31 layers x 61 alphas = {large} (1891), toy = {toy} (427), completed {} + missing {} = {accounted} (product {product})",
            grid.completed(),
            grid.missing()
        ),
    );
}

fn c7_null_injection(board: &mut Board, model: &ToyTransformer, baseline: &RunStore) {
    let variables = standard_columns();
    let (mut cells, mut overlapping, mut missing) = (0usize, 0usize, 0usize);
    let mut per_variable = vec![0usize; variables.len()];
    for rep in 0..NULL_REPLICATES {
        let replicate = runner::run_trials(
            model,
            derive_seed(0xC7, 2 * rep),
            BASELINE_K,
            None,
            CapturePosition::LastPromptToken,
            false,
        );
        assert!(replicate.1.is_none());
        let reference = fit_logistic(&encode_design(&replicate.0).unwrap()).unwrap();
        let mut cfg = SweepConfig::new(model.num_layers(), derive_seed(0xC7, 2 * rep + 1));
        cfg.grid.alphas = vec![0.0];
        cfg.k = CELL_K;
        let grid = run_sweep(model, baseline, &cfg).unwrap();
        for cell in &grid.cells {
            cells += 1;
            let Some(r) = cell.regression.as_ref().filter(|_| cell.is_completed()) else {
                missing += 1;
                continue;
            };
            let mut all = true;
            for (i, v) in variables.iter().enumerate() {
                if ci_overlap_flag(&reference, r, v).unwrap() {
                    all = false;
                } else {
                    per_variable[i] += 1;
                }
            }
            overlapping += usize::from(all);
        }
    }
    let share = overlapping as f64 / cells as f64;
    board.record(
        "7",
        "null-injection equivalence",
        share >= NULL_OVERLAP_MIN,
        format!(
            "{NULL_REPLICATES} replicates, {overlapping}/{cells} alpha=0 cells overlap on every variable = {:.1}% (>= 95%), \
             {missing} missing; per variable {}",
            100.0 * share,
            variables
                .iter()
                .zip(&per_variable)
                .map(|(v, n)| format!("{v}={n}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    );
}

/// Baseline, sweep and report into `dir`. Returns the sweep grid.
fn pipeline(model: &ToyTransformer, baseline: Option<RunStore>, grid: GridSpec, k: usize, dir: &Path) -> (RunStore, SweepGrid) {
    let baseline = baseline.unwrap_or_else(|| {
        run_baseline(model, BASELINE_K, DESIGN_SEED, CapturePosition::LastPromptToken).unwrap()
    });
    let mut cfg = SweepConfig::new(model.num_layers(), SWEEP_SEED);
    cfg.grid = grid;
    cfg.k = k;
    let sweep = run_sweep(model, &baseline, &cfg).unwrap();
    let report = analyze_run(&baseline).unwrap();
    let ortho = orthogonality_report(&report.regression, &sweep).unwrap();
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("trials.csv"), artifacts::trials_csv(&baseline)).unwrap();
    artifacts::write_run_report(dir, &report).unwrap();
    artifacts::write_sweep_report(dir, &sweep, &ortho).unwrap();
    artifacts::write_manifest(dir).unwrap();
    (baseline, sweep)
}

fn c9_determinism(board: &mut Board, model: &ToyTransformer) {
    let tmp = tempfile::tempdir().unwrap();
    let grid = GridSpec {
        alphas: vec![-10.0, 0.0, 10.0],
        layers: (1..model.num_layers()).collect(),
    };
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    pipeline(model, None, grid.clone(), 20, &a);
    rayon::ThreadPoolBuilder::new()
        .num_threads(3)
        .build()
        .unwrap()
        .install(|| pipeline(model, None, grid, 20, &b));
    let manifest_a = fs::read_to_string(a.join(artifacts::MANIFEST_NAME)).unwrap();
    let manifest_b = fs::read_to_string(b.join(artifacts::MANIFEST_NAME)).unwrap();
    let files = manifest_a.lines().count();
    let differing: Vec<String> = manifest_a
        .lines()
        .filter_map(|l| l.split_once("  ").map(|x| x.1.to_owned()))
        .filter(|f| fs::read(a.join(f)).ok() != fs::read(b.join(f)).ok())
        .collect();
    board.record(
        "9",
        "determinism",
        manifest_a == manifest_b && differing.is_empty() && files > 0,
        format!("{files} CSV files compared across two end-to-end runs (default pool vs 3 threads), {} differ", differing.len()),
    );
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        // Keeps `cargo test -- --list` working for harness-free targets.
        return ExitCode::SUCCESS;
    }
    let mut board = Board::default();
    let model = build_model(ModelConfig::default()).unwrap();
    println!(
        "acceptance: toy model L={} d={}, {} worker threads",
        model.num_layers(),
        model.hidden_dim(),
        rayon::current_num_threads()
    );

    c1_orthogonalization(&mut board);
    let (baseline, baseline_time) = c2_recovery(&mut board, &model);
    c3_injection_law(&mut board, &model, &baseline);
    c4_monotonicity(&mut board, &model, &baseline);
    c5_regression(&mut board, &baseline);

    let tmp = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let (_, grid) = pipeline(
        &model,
        Some(baseline.clone()),
        GridSpec::default_for(model.num_layers()),
        CELL_K,
        tmp.path(),
    );
    let total = baseline_time + start.elapsed();
    c6_grid(&mut board, &grid);

    let report = analyze_run(&baseline).unwrap();
    let ortho = orthogonality_report(&report.regression, &grid).unwrap();
    let s = &ortho.summary;
    board.record(
        "8",
        "orthogonality false-positive budget",
        s.completed > 0 && s.flagged_fraction <= FLAG_BUDGET,
        format!(
            "{} of {} completed cells flag a non-steered variable = {:.1}% (<= 10%); per variable {}",
            (s.flagged_fraction * s.completed as f64).round(),
            s.completed,
            100.0 * s.flagged_fraction,
            s.flag_rates
                .iter()
                .map(|(v, r)| format!("{v}={:.1}%", 100.0 * r))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    );

    c7_null_injection(&mut board, &model, &baseline);
    c9_determinism(&mut board, &model);

    board.record(
        "10",
        "desk-scale performance",
        total < PIPELINE_BUDGET,
        format!(
            "baseline {BASELINE_K} + {} cells x {CELL_K} + report in {:.1} min on {} threads (< 30 min)",
            grid.cells.len(),
            total.as_secs_f64() / 60.0,
            rayon::current_num_threads()
        ),
    );

    let passed = board.outcomes.iter().filter(|o| o.pass).count();
    let gating_failures: Vec<&str> = board
        .outcomes
        .iter()
        .filter(|o| o.gating && !o.pass)
        .map(|o| o.id)
        .collect();
    let reported: Vec<&str> = board
        .outcomes
        .iter()
        .filter(|o| !o.gating && !o.pass)
        .map(|o| o.id)
        .collect();
    println!(
        "acceptance: {passed}/{} checks pass; gating failures: [{}]; non-gating failures: [{}]",
        board.outcomes.len(),
        gating_failures.join(", "),
        reported.join(", ")
    );
    if gating_failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
