// SPDX-License-Identifier: MIT OR Apache-2.0

//! `steerlab` command-line driver.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use steerlab::game::Factor;
use steerlab::model::{build_model, CapturePosition, ModelConfig, ToyTransformer, DEFAULT_MAX_ALPHA};
use steerlab::runner::{
    self, analyze_run, artifacts, layer_injection, orthogonality_report, run_sweep, GridSpec,
    RunStore, SweepConfig, SweepGrid, DEFAULT_BASELINE_K, DEFAULT_CELL_K,
};
use steerlab::steering::{
    self, extract_default_iv, extract_dv_vector, extract_dv_vector_orthogonalized,
    partial_against_others, InjectionVector, PartialSteeringVector, VectorMeta, DV_ANCHOR_HIGH,
    DV_ANCHOR_LOW, MIN_GROUP_SIZE,
};
use steerlab::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal or model failure
  2  usage error (bad flags or values)
  3  invalid config file
  4  missing or malformed input (store, vector file, sweep file, model mismatch)
  5  invalid sweep grid
  6  vector extraction failed
  7  analysis failed (too few trials, singular design)

Errors are printed as one line on stderr:
  steerlab: error code=<N> kind=<kind>: <message>

Config file format: one `key = value` per line, `#` comments.
Keys: layers, hidden_dim, seed, noise_sd, planting_gain, logic_fail_rate.
Unknown keys are rejected.";

#[derive(Parser, Debug)]
#[command(name = "steerlab", version, about = "Steering-vector experiments on a planted toy transformer", after_help = EXIT_CODES)]
struct Cli {
    /// Model config file (`key = value` lines). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Output directory for every artifact of the command.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Design seed of the command.
    #[arg(long, global = true, env = "STEERLAB_SEED", default_value_t = 1)]
    seed: u64,

    /// Maximum number of worker threads.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run uninjected trials and store every layer's capture.
    Baseline(BaselineArgs),
    /// Extract factor, decision, partial and projected vectors from a baseline.
    Extract(ExtractArgs),
    /// Per-layer alignment of each factor vector with the decision vector.
    Profile(ProfileArgs),
    /// Run trials under a single injection.
    Steer(SteerArgs),
    /// Run the (layer, alpha) injection grid.
    Sweep(SweepArgs),
    /// Tables and heatmaps for a run and, optionally, a sweep.
    Report(ReportArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Capture {
    LastPromptToken,
    MeanPrompt,
    FirstGenerated,
}

impl From<Capture> for CapturePosition {
    fn from(c: Capture) -> Self {
        match c {
            Capture::LastPromptToken => Self::LastPromptToken,
            Capture::MeanPrompt => Self::MeanPrompt,
            Capture::FirstGenerated => Self::FirstGenerated,
        }
    }
}

fn parse_factor(s: &str) -> Result<Factor, String> {
    Factor::parse(s).ok_or_else(|| {
        let names: Vec<_> = Factor::ALL.iter().map(|f| f.name()).collect();
        format!("unknown factor `{s}` (expected one of {})", names.join(", "))
    })
}

#[derive(Args, Debug)]
struct BaselineArgs {
    /// Number of trials.
    #[arg(long, default_value_t = DEFAULT_BASELINE_K)]
    k: usize,
    /// Token position whose residual stream is captured.
    #[arg(long, value_enum, default_value = "last-prompt-token")]
    capture: Capture,
}

#[derive(Args, Debug, Clone)]
struct ExtractionArgs {
    /// Minimum trials per contrast group.
    #[arg(long, default_value_t = MIN_GROUP_SIZE)]
    min_group: usize,
    /// Lower decision anchor of the decision vector.
    #[arg(long, default_value_t = DV_ANCHOR_LOW, allow_hyphen_values = true)]
    anchor_low: i32,
    /// Upper decision anchor of the decision vector.
    #[arg(long, default_value_t = DV_ANCHOR_HIGH, allow_hyphen_values = true)]
    anchor_high: i32,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Baseline store directory.
    #[arg(long, value_name = "DIR")]
    baseline: PathBuf,
    /// Layers to extract at, e.g. `1..7` or `1,3,5`. Defaults to every captured layer.
    #[arg(long)]
    layers: Option<String>,
    /// Also write the decision vector with the factor vectors removed.
    #[arg(long)]
    orthogonalized_dv: bool,
    #[command(flatten)]
    extraction: ExtractionArgs,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    /// Baseline store directory.
    #[arg(long, value_name = "DIR")]
    baseline: PathBuf,
    #[command(flatten)]
    extraction: ExtractionArgs,
}

#[derive(Args, Debug)]
struct InjectionArgs {
    /// Factor whose partial vector is injected.
    #[arg(long, value_parser = parse_factor, default_value = "female")]
    factor: Factor,
    /// Inject the raw partial vector instead of its projection onto the decision vector.
    #[arg(long)]
    full_vector: bool,
    /// Bound on |alpha|.
    #[arg(long, default_value_t = DEFAULT_MAX_ALPHA)]
    max_alpha: f64,
}

#[derive(Args, Debug)]
struct SteerArgs {
    /// Baseline store directory the vector is extracted from.
    #[arg(long, value_name = "DIR")]
    baseline: PathBuf,
    /// Injection layer (1-based, below the final block).
    #[arg(long)]
    layer: usize,
    /// Injection coefficient.
    #[arg(long, allow_hyphen_values = true)]
    alpha: f64,
    /// Number of trials.
    #[arg(long, default_value_t = DEFAULT_CELL_K)]
    k: usize,
    /// Token position whose residual stream is captured.
    #[arg(long, value_enum, default_value = "last-prompt-token")]
    capture: Capture,
    #[command(flatten)]
    injection: InjectionArgs,
    #[command(flatten)]
    extraction: ExtractionArgs,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Baseline store directory the vectors are extracted from.
    #[arg(long, value_name = "DIR")]
    baseline: PathBuf,
    /// Alpha values, e.g. `-30..30` or `-5,0,5`.
    #[arg(long, default_value = "-30..30", allow_hyphen_values = true)]
    alphas: String,
    /// Layers, e.g. `1..7`. Defaults to every injectable layer.
    #[arg(long)]
    layers: Option<String>,
    /// Trials per cell.
    #[arg(long, default_value_t = DEFAULT_CELL_K)]
    k: usize,
    #[command(flatten)]
    injection: InjectionArgs,
    #[command(flatten)]
    extraction: ExtractionArgs,
}

#[derive(Args, Debug)]
struct ReportArgs {
    /// Run store directory (baseline or steer).
    #[arg(long, value_name = "DIR")]
    run: PathBuf,
    /// Sweep file written by `sweep`, compared against the run's regression.
    #[arg(long, value_name = "FILE")]
    sweep: Option<PathBuf>,
}

#[derive(Debug)]
struct Failure {
    code: u8,
    kind: &'static str,
    message: String,
}

impl Failure {
    fn new(code: u8, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            message: message.into(),
        }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(1, "internal", e.to_string())
    }
    fn config(e: impl std::fmt::Display) -> Self {
        Self::new(3, "config", e.to_string())
    }
    fn input(e: impl std::fmt::Display) -> Self {
        Self::new(4, "input", e.to_string())
    }
    fn grid(e: impl std::fmt::Display) -> Self {
        Self::new(5, "grid", e.to_string())
    }
    fn extraction(e: impl std::fmt::Display) -> Self {
        Self::new(6, "extraction", e.to_string())
    }
    fn analysis(e: impl std::fmt::Display) -> Self {
        Self::new(7, "analysis", e.to_string())
    }

    fn line(&self) -> String {
        let msg = self.message.split_whitespace().collect::<Vec<_>>().join(" ");
        format!("steerlab: error code={} kind={}: {msg}", self.code, self.kind)
    }
}

type CliResult<T> = Result<T, Failure>;

fn output_error(e: Error) -> Failure {
    Failure::internal(format!("writing outputs: {e}"))
}

fn load_model(path: Option<&Path>) -> CliResult<ToyTransformer> {
    let config = match path {
        None => ModelConfig::default(),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?;
            ModelConfig::from_kv_text(&text)
                .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
        }
    };
    build_model(config).map_err(Failure::config)
}

fn load_store(dir: &Path) -> CliResult<RunStore> {
    RunStore::load(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))
}

fn check_model(model: &ToyTransformer, store: &RunStore) -> CliResult<()> {
    use steerlab::model::LanguageModel;
    if store.manifest.model_hash != model.config_hash() {
        return Err(Failure::input(format!(
            "store {} was produced by model {}, current config is {}",
            store.manifest.run_id,
            short(&store.manifest.model_hash),
            short(&model.config_hash())
        )));
    }
    Ok(())
}

fn short(hash: &str) -> &str {
    &hash[..hash.len().min(12)]
}

/// Parses `a..b` (inclusive integer range) or comma lists of numbers and ranges.
fn parse_list(text: &str) -> Result<Vec<f64>, String> {
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim) {
        if part.is_empty() {
            return Err(format!("empty entry in `{text}`"));
        }
        let range = part
            .char_indices()
            .skip(1)
            .find(|&(i, _)| part[i..].starts_with(".."))
            .map(|(i, _)| (&part[..i], &part[i + 2..]));
        match range {
            Some((a, b)) => {
                let a: i64 = a.trim().parse().map_err(|_| format!("bad range start in `{part}`"))?;
                let b: i64 = b.trim().parse().map_err(|_| format!("bad range end in `{part}`"))?;
                if a > b {
                    return Err(format!("range `{part}` is empty"));
                }
                out.extend((a..=b).map(|v| v as f64));
            }
            None => out.push(part.parse().map_err(|_| format!("bad number `{part}`"))?),
        }
    }
    Ok(out)
}

fn parse_layers(text: &str) -> Result<Vec<usize>, String> {
    parse_list(text)?
        .into_iter()
        .map(|v| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(format!("layer {v} is not a positive integer"))
            }
        })
        .collect()
}

fn sweep_config(
    num_layers: usize,
    seed: u64,
    injection: &InjectionArgs,
    extraction: &ExtractionArgs,
) -> SweepConfig {
    let mut cfg = SweepConfig::new(num_layers, seed);
    cfg.factor = injection.factor;
    cfg.mode = if injection.full_vector {
        InjectionVector::FullPartial
    } else {
        InjectionVector::DvProjection
    };
    cfg.max_alpha = injection.max_alpha;
    cfg.anchors = (extraction.anchor_low, extraction.anchor_high);
    cfg.min_group_size = extraction.min_group;
    cfg
}

fn write_text(dir: &Path, name: &str, text: &str) -> CliResult<()> {
    fs::write(dir.join(name), text).map_err(|e| Failure::internal(format!("writing {name}: {e}")))
}

fn finish_outputs(dir: &Path) -> CliResult<()> {
    artifacts::write_manifest(dir).map(|_| ()).map_err(output_error)
}

fn save_run(dir: &Path, store: &RunStore, model: &ToyTransformer) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(Failure::internal)?;
    store.save(dir).map_err(output_error)?;
    write_text(dir, "trials.csv", &artifacts::trials_csv(store))?;
    write_text(dir, "model_config.json", &(model.config().canonical_text() + "\n"))?;
    finish_outputs(dir)?;
    if !store.manifest.complete {
        return Err(Failure::internal(format!(
            "run incomplete after {} of {} trials: {}",
            store.records.len(),
            store.manifest.k,
            store.manifest.failure.clone().unwrap_or_default()
        )));
    }
    Ok(())
}

fn cmd_baseline(cli: &Cli, args: &BaselineArgs) -> CliResult<()> {
    let model = load_model(cli.config.as_deref())?;
    let store = runner::run_baseline(&model, args.k, cli.seed, args.capture.into())
        .map_err(|e| Failure::new(2, "usage", e.to_string()))?;
    save_run(&cli.out, &store, &model)
}

fn partial_meta(p: &PartialSteeringVector) -> VectorMeta {
    VectorMeta::Partial {
        layer: p.layer(),
        contrast: p.base.contrast,
        conditioned_on: p.conditioned_on.clone(),
        skipped_conditioners: p.skipped_conditioners.clone(),
        degenerate: p.degenerate,
    }
}

fn captured_layers(store: &RunStore) -> usize {
    store.records.first().map_or(0, |r| r.captures.layers.len())
}

fn cmd_extract(cli: &Cli, args: &ExtractArgs) -> CliResult<()> {
    let store = load_store(&args.baseline)?;
    let available = captured_layers(&store);
    let layers = match &args.layers {
        Some(t) => parse_layers(t).map_err(Failure::grid)?,
        None => (1..=available).collect(),
    };
    if let Some(l) = layers.iter().find(|&&l| l == 0 || l > available) {
        return Err(Failure::grid(format!("layer {l} outside captured layers 1..={available}")));
    }
    let x = &args.extraction;
    let root = cli.out.join("vectors");
    let mut csv = String::from("layer,file,kind,norm,signed_magnitude\n");
    for &layer in &layers {
        let dir = root.join(format!("layer_{layer}"));
        fs::create_dir_all(&dir).map_err(Failure::internal)?;
        let mut put = |name: String, meta: VectorMeta, v: &steerlab::vecspace::Vector, mag: Option<f64>| {
            let kind = match &meta {
                VectorMeta::Steering { .. } => "steering",
                VectorMeta::Partial { .. } => "partial",
                VectorMeta::Projection { .. } => "projection",
            };
            let _ = writeln!(
                csv,
                "{layer},layer_{layer}/{name},{kind},{},{}",
                v.norm(),
                mag.map(|m| m.to_string()).unwrap_or_default()
            );
            steering::write_vector_file(&dir.join(&name), &meta, v).map_err(output_error)
        };
        let dv = extract_dv_vector(&store.records, layer, x.anchor_low, x.anchor_high, x.min_group)
            .map_err(Failure::extraction)?;
        put("dv.vec".into(), dv.meta(), &dv.vector, None)?;
        let ivs = Factor::ALL
            .iter()
            .map(|&f| extract_default_iv(&store.records, f, layer, x.min_group))
            .collect::<Result<Vec<_>, _>>()
            .map_err(Failure::extraction)?;
        for iv in &ivs {
            let f = iv.contrast.factor().expect("factor contrast");
            put(format!("iv_{}.vec", f.name()), iv.meta(), &iv.vector, None)?;
        }
        for f in Factor::ALL {
            let partial = partial_against_others(f, &ivs).map_err(Failure::extraction)?;
            put(format!("partial_{}.vec", f.name()), partial_meta(&partial), &partial.vector, None)?;
            let (p, mag) = steering::project_onto_dv(&partial, &dv).map_err(Failure::extraction)?;
            let meta = VectorMeta::Projection {
                layer,
                contrast: partial.base.contrast,
                signed_magnitude: mag,
            };
            put(format!("proj_{}.vec", f.name()), meta, &p, Some(mag))?;
        }
        if args.orthogonalized_dv {
            let o = extract_dv_vector_orthogonalized(&store.records, layer, x.anchor_low, x.anchor_high, x.min_group)
                .map_err(Failure::extraction)?;
            put("dv_orthogonalized.vec".into(), partial_meta(&o), &o.vector, None)?;
        }
    }
    write_text(&cli.out, "vectors.csv", &csv)?;
    finish_outputs(&cli.out)
}

fn cmd_profile(cli: &Cli, args: &ProfileArgs) -> CliResult<()> {
    let store = load_store(&args.baseline)?;
    let x = &args.extraction;
    let profile = steering::layer_profile(
        &store.records,
        &Factor::ALL,
        (x.anchor_low, x.anchor_high),
        x.min_group,
    )
    .map_err(Failure::extraction)?;
    fs::create_dir_all(&cli.out).map_err(Failure::internal)?;
    write_text(&cli.out, "profile.csv", &profile.to_csv())?;
    write_text(&cli.out, "profile_without_framing.csv", &profile.without_framing_csv())?;
    finish_outputs(&cli.out)
}

fn cmd_steer(cli: &Cli, args: &SteerArgs) -> CliResult<()> {
    use steerlab::model::LanguageModel;
    let model = load_model(cli.config.as_deref())?;
    let baseline = load_store(&args.baseline)?;
    check_model(&model, &baseline)?;
    let cfg = sweep_config(model.num_layers(), cli.seed, &args.injection, &args.extraction);
    if args.layer == 0 || args.layer >= model.num_layers() {
        return Err(Failure::grid(format!(
            "injection layer {} outside 1..={}",
            args.layer,
            model.num_layers() - 1
        )));
    }
    if !args.alpha.is_finite() || args.alpha.abs() > cfg.max_alpha {
        return Err(Failure::grid(format!("|alpha| = {} exceeds {}", args.alpha.abs(), cfg.max_alpha)));
    }
    let inj = layer_injection(&baseline, &cfg, args.layer);
    let vector = inj
        .vector
        .ok_or_else(|| Failure::extraction(inj.error.unwrap_or_default()))?;
    let spec = steering::make_injection_spec(&vector, args.layer, args.alpha, model.num_layers(), cfg.max_alpha)
        .map_err(Failure::grid)?;
    let store = runner::run_steered(&model, args.k, cli.seed, &spec, args.capture.into())
        .map_err(|e| Failure::new(2, "usage", e.to_string()))?;
    save_run(&cli.out, &store, &model)
}

fn cmd_sweep(cli: &Cli, args: &SweepArgs) -> CliResult<()> {
    use steerlab::model::LanguageModel;
    let model = load_model(cli.config.as_deref())?;
    let baseline = load_store(&args.baseline)?;
    check_model(&model, &baseline)?;
    let mut cfg = sweep_config(model.num_layers(), cli.seed, &args.injection, &args.extraction);
    cfg.k = args.k;
    cfg.capture = baseline.manifest.capture;
    cfg.grid = GridSpec {
        alphas: parse_list(&args.alphas).map_err(Failure::grid)?,
        layers: match &args.layers {
            Some(t) => parse_layers(t).map_err(Failure::grid)?,
            None => GridSpec::default_for(model.num_layers()).layers,
        },
    };
    cfg.grid.validate(model.num_layers(), cfg.max_alpha).map_err(Failure::grid)?;
    if cfg.k == 0 {
        return Err(Failure::grid("cells need at least one trial"));
    }
    let grid = run_sweep(&model, &baseline, &cfg).map_err(Failure::internal)?;
    fs::create_dir_all(&cli.out).map_err(Failure::internal)?;
    let mut text = serde_json::to_string(&grid).map_err(Failure::internal)?;
    text.push('\n');
    write_text(&cli.out, "sweep.json", &text)?;
    finish_outputs(&cli.out)?;
    if grid.completed() == 0 {
        return Err(Failure::extraction(format!(
            "all {} cells are missing",
            grid.cells.len()
        )));
    }
    Ok(())
}

fn load_sweep(path: &Path) -> CliResult<SweepGrid> {
    let bytes = fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn cmd_report(cli: &Cli, args: &ReportArgs) -> CliResult<()> {
    let store = load_store(&args.run)?;
    if !store.manifest.complete {
        return Err(Failure::input(format!("store {} is incomplete", args.run.display())));
    }
    let report = analyze_run(&store).map_err(Failure::analysis)?;
    let grid = match &args.sweep {
        Some(p) => {
            let grid = load_sweep(p)?;
            if grid.baseline_run_id != store.manifest.run_id {
                return Err(Failure::input(format!(
                    "sweep was built from run {}, not {}",
                    grid.baseline_run_id, store.manifest.run_id
                )));
            }
            Some(grid)
        }
        None => None,
    };
    artifacts::write_run_report(&cli.out, &report).map_err(output_error)?;
    if let Some(grid) = grid {
        let ortho = orthogonality_report(&report.regression, &grid).map_err(Failure::analysis)?;
        artifacts::write_sweep_report(&cli.out, &grid, &ortho).map_err(output_error)?;
    }
    finish_outputs(&cli.out)
}

fn run(cli: &Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::new(2, "usage", "--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(Failure::internal)?;
    }
    match &cli.command {
        Command::Baseline(a) => cmd_baseline(cli, a),
        Command::Extract(a) => cmd_extract(cli, a),
        Command::Profile(a) => cmd_profile(cli, a),
        Command::Steer(a) => cmd_steer(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Report(a) => cmd_report(cli, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.kind().to_string();
            let detail = e.render().to_string();
            let first = detail
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or(&text)
                .trim_start_matches("error: ");
            eprintln!("{}", Failure::new(2, "usage", first).line());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("{}", f.line());
            ExitCode::from(f.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn every_flag_is_documented() {
        let mut root = Cli::command();
        root.build();
        let mut commands = vec![root.clone()];
        commands.extend(root.get_subcommands().cloned());
        for mut cmd in commands {
            let help = cmd.render_long_help().to_string();
            for arg in cmd.get_arguments() {
                let id = arg.get_id().as_str();
                if id == "help" || id == "version" {
                    continue;
                }
                assert!(arg.get_help().is_some(), "{} --{id} has no help", cmd.get_name());
                if let Some(long) = arg.get_long() {
                    assert!(help.contains(&format!("--{long}")), "{} help lacks --{long}", cmd.get_name());
                }
            }
        }
    }

    #[test]
    fn help_lists_exit_codes() {
        let help = Cli::command().render_long_help().to_string();
        for code in 1..=7 {
            assert!(help.contains(&format!("  {code}  ")), "exit code {code} undocumented");
        }
    }

    #[test]
    fn lists_and_ranges() {
        assert_eq!(parse_list("-2..1").unwrap(), [-2.0, -1.0, 0.0, 1.0]);
        assert_eq!(parse_list("-5, 0.5,3..4").unwrap(), [-5.0, 0.5, 3.0, 4.0]);
        assert_eq!(parse_list("-30..30").unwrap().len(), 61);
        assert!(parse_list("3..1").is_err());
        assert!(parse_list("1,,2").is_err());
        assert!(parse_list("x").is_err());
        assert_eq!(parse_layers("1..3,5").unwrap(), [1, 2, 3, 5]);
        assert!(parse_layers("0.5").is_err());
    }

    #[test]
    fn error_line_is_single_line() {
        let f = Failure::input("a\nb   c");
        assert_eq!(f.line(), "steerlab: error code=4 kind=input: a b c");
    }
}
