//! Command-line frontend: simulation runs, analysis of shipped or imported
//! detection matrices, key-rate sweeps, Fried-parameter estimation, the
//! image-encryption demo, and phase-screen export.
//!
//! Every command is deterministic given its config and seed, and every
//! generated artifact embeds the version, the seed, and the config it was
//! produced from. Exit codes: 0 success, 1 domain error (valid input, no
//! valid result), 2 input error (unreadable or unparseable input).

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use hdqkd::encdemo::{self, KeyStream, SymbolImage};
use hdqkd::io::{self, RgbImage};
use hdqkd::keyrate_dual::key_rate_dual;
use hdqkd::linksim::{
    accidental_rate, build_detection_matrix, run_protocol, target_correction, CorrectionPolicy,
    LinkBudget, TurbulentChannel,
};
use hdqkd::mubs::mub_for_dim;
use hdqkd::protocol::{key_rate_analytic, qber, DetectionMatrix, Provenance};
use hdqkd::turbulence::{
    fried_from_centroids, CentroidSeries, ScreenGenerator, TurbulenceParams,
};

#[derive(Parser)]
#[command(name = "hdqkd", version, about = "High-dimensional QKD link simulator and analyzer")]
struct Cli {
    /// Worker threads for parallel sections (default: all cores). Results
    /// are identical for any thread count.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full protocol over the modeled link and emit detection
    /// matrices plus a QBER / key-rate report.
    Simulate(SimulateArgs),
    /// Compute QBER and key rates for a stored detection matrix.
    Analyze(AnalyzeArgs),
    /// Tabulate numeric (dual bound) and analytic key rates over an error
    /// rate grid.
    KeyrateSweep(SweepArgs),
    /// Estimate the Fried parameter from a centroid-displacement series.
    Fried(FriedArgs),
    /// Encrypt an image with a one-time key and decrypt it through a
    /// measured confusion channel.
    EncryptDemo(EncryptArgs),
    /// Generate Kolmogorov phase screens and export them as binary files.
    Screens(ScreensArgs),
}

/// Input/parse failures exit with 2, domain failures with 1.
enum AppError {
    Input(String),
    Domain(String),
}

impl From<hdqkd::Error> for AppError {
    fn from(e: hdqkd::Error) -> Self {
        match e {
            hdqkd::Error::Parse { .. } | hdqkd::Error::Io(_) => AppError::Input(e.to_string()),
            other => AppError::Domain(other.to_string()),
        }
    }
}

impl From<std::io::Error> for AppError {
    fn from(e: std::io::Error) -> Self {
        AppError::Input(e.to_string())
    }
}

fn input_err(context: impl std::fmt::Display) -> AppError {
    AppError::Input(context.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .is_err()
        {
            eprintln!("error: thread pool already initialized");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Analyze(args) => cmd_analyze(args),
        Command::KeyrateSweep(args) => cmd_keyrate_sweep(args),
        Command::Fried(args) => cmd_fried(args),
        Command::EncryptDemo(args) => cmd_encrypt_demo(args),
        Command::Screens(args) => cmd_screens(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(AppError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(AppError::Input(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

// ---------------------------------------------------------------- simulate

/// Full run description; serialized verbatim into every output. All
/// physical quantities carry their SI unit in the key name.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    run: RunSection,
    /// Omit for a vacuum (turbulence-free) link.
    turbulence: Option<TurbulenceSection>,
    #[serde(default)]
    link: LinkSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunSection {
    dimension: usize,
    /// OAM order ℓ of the encoded modes.
    oam: i32,
    seed: u64,
    bins_per_setting: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TurbulenceSection {
    cn2_m_to_minus_2_3: f64,
    link_length_m: f64,
    wavelength_m: f64,
    beam_waist_m: f64,
    /// Phase screens averaged into the modal crosstalk estimate.
    #[serde(default = "default_crosstalk_screens")]
    crosstalk_screens: usize,
}

fn default_crosstalk_screens() -> usize {
    24
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct LinkSection {
    signal_loss_db: f64,
    idler_loss_db: f64,
    source_coincidence_rate_hz: f64,
    signal_singles_rate_hz: f64,
    idler_singles_rate_hz: f64,
    coincidence_window_s: f64,
    background_rate_hz: f64,
    coupling_waist_m: f64,
    bin_duration_s: f64,
}

impl Default for LinkSection {
    fn default() -> Self {
        let b = LinkBudget::paper_default();
        LinkSection {
            signal_loss_db: b.signal_loss_db,
            idler_loss_db: b.idler_loss_db,
            source_coincidence_rate_hz: b.source_coincidence_rate_hz,
            signal_singles_rate_hz: b.signal_singles_rate_hz,
            idler_singles_rate_hz: b.idler_singles_rate_hz,
            coincidence_window_s: b.coincidence_window_s,
            background_rate_hz: b.background_rate_hz,
            coupling_waist_m: b.coupling_waist_m,
            bin_duration_s: b.bin_duration_s,
        }
    }
}

impl LinkSection {
    fn budget(&self) -> Result<LinkBudget, AppError> {
        Ok(LinkBudget::new(
            self.signal_loss_db,
            self.idler_loss_db,
            self.source_coincidence_rate_hz,
            self.signal_singles_rate_hz,
            self.idler_singles_rate_hz,
            self.coincidence_window_s,
            self.background_rate_hz,
            self.coupling_waist_m,
            self.bin_duration_s,
        )?)
    }
}

fn default_config() -> RunConfig {
    RunConfig {
        run: RunSection {
            dimension: 4,
            oam: 2,
            seed: 1,
            bins_per_setting: 50,
        },
        turbulence: Some(TurbulenceSection {
            cn2_m_to_minus_2_3: 2.5e-15,
            link_length_m: 300.0,
            wavelength_m: 850e-9,
            beam_waist_m: 0.012,
            crosstalk_screens: default_crosstalk_screens(),
        }),
        link: LinkSection::default(),
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML run description; command-line flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Protocol dimension (2 or 4).
    #[arg(long)]
    dim: Option<usize>,
    /// OAM order ℓ (default: 1 for d=2, 2 for d=4).
    #[arg(long)]
    oam: Option<i32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Accumulation bins per (sent, projector) setting.
    #[arg(long)]
    bins: Option<usize>,
    /// Simulate a vacuum link (no turbulence section).
    #[arg(long)]
    no_turbulence: bool,
    /// Turbulence strength Cₙ² in m^(−2/3).
    #[arg(long)]
    cn2: Option<f64>,
    /// How surviving bins are combined after the dropout floor.
    #[arg(long, value_parser = ["reweight", "discard-only"], default_value = "reweight")]
    correction: String,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Serialize)]
struct ChannelReport {
    p_keep: f64,
    p_flip: f64,
    fried_r0_m: f64,
    wander_sigma2_m2: f64,
}

#[derive(Serialize)]
struct RateReport {
    qber: f64,
    qber_per_basis: [f64; 2],
    key_rate_analytic_bits: f64,
}

#[derive(Serialize)]
struct SimulateReport {
    version: &'static str,
    config: RunConfig,
    correction: String,
    channel: Option<ChannelReport>,
    raw: RateReport,
    corrected: RateReport,
    accidental_rate_at_source_hz: f64,
}

fn load_config(args: &SimulateArgs) -> Result<RunConfig, AppError> {
    let mut config = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| input_err(format!("{}: {e}", path.display())))?;
            toml::from_str(&text).map_err(|e| input_err(format!("{}: {e}", path.display())))?
        }
        None => default_config(),
    };
    if let Some(d) = args.dim {
        config.run.dimension = d;
        if args.oam.is_none() && args.config.is_none() {
            config.run.oam = if d == 2 { 1 } else { 2 };
        }
    }
    if let Some(oam) = args.oam {
        config.run.oam = oam;
    }
    if let Some(seed) = args.seed {
        config.run.seed = seed;
    }
    if let Some(bins) = args.bins {
        config.run.bins_per_setting = bins;
    }
    if args.no_turbulence {
        config.turbulence = None;
    } else if let Some(cn2) = args.cn2 {
        let t = config.turbulence.get_or_insert(TurbulenceSection {
            cn2_m_to_minus_2_3: cn2,
            link_length_m: 300.0,
            wavelength_m: 850e-9,
            beam_waist_m: 0.012,
            crosstalk_screens: default_crosstalk_screens(),
        });
        t.cn2_m_to_minus_2_3 = cn2;
    }
    Ok(config)
}

fn rate_report(matrix: &DetectionMatrix) -> RateReport {
    let report = qber(matrix);
    let analytic = key_rate_analytic(report.q, report.d)
        .map(|k| k.r)
        .unwrap_or(f64::NAN);
    RateReport {
        qber: report.q,
        qber_per_basis: report.per_basis,
        key_rate_analytic_bits: analytic,
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<(), AppError> {
    let config = load_config(&args)?;
    let policy = match args.correction.as_str() {
        "discard-only" => CorrectionPolicy::DiscardOnly,
        _ => CorrectionPolicy::Reweight,
    };
    let mubs = mub_for_dim(config.run.dimension, config.run.oam)?;
    let budget = config.link.budget()?;
    let channel = match &config.turbulence {
        None => None,
        Some(t) => {
            let params = TurbulenceParams::new(
                t.cn2_m_to_minus_2_3,
                t.link_length_m,
                t.wavelength_m,
                t.beam_waist_m,
            )?;
            // The crosstalk ensemble seed derives from the run seed so a
            // (config, seed) pair pins every random draw in the run.
            Some(TurbulentChannel::from_screens(
                params,
                config.run.oam.abs(),
                t.crosstalk_screens,
                config.run.seed ^ 0x5eed_5eed,
            )?)
        }
    };

    let records = run_protocol(
        &mubs,
        &budget,
        channel.as_ref(),
        config.run.bins_per_setting,
        config.run.seed,
    )?;
    let raw_matrix = build_detection_matrix(&records, &mubs, Provenance::Simulated)?;
    let corrected_records = target_correction(&records, policy)?;
    let corrected_matrix =
        build_detection_matrix(&corrected_records, &mubs, Provenance::TargetCorrected)?;

    fs::create_dir_all(&args.out)?;
    let config_toml = toml::to_string_pretty(&config)
        .map_err(|e| AppError::Domain(format!("config serialization: {e}")))?;
    let annotate = |csv: String| -> String {
        let mut out = String::new();
        out.push_str(&format!("# version = {}\n", hdqkd::VERSION));
        for line in config_toml.lines() {
            out.push_str("# config: ");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(&csv);
        out
    };
    fs::write(
        args.out.join("raw_matrix.csv"),
        annotate(io::matrix_to_csv(&raw_matrix)),
    )?;
    fs::write(
        args.out.join("corrected_matrix.csv"),
        annotate(io::matrix_to_csv(&corrected_matrix)),
    )?;

    let report = SimulateReport {
        version: hdqkd::VERSION,
        correction: args.correction.clone(),
        channel: channel.as_ref().map(|ch| ChannelReport {
            p_keep: ch.p_keep(),
            p_flip: ch.p_flip(),
            fried_r0_m: ch.params().fried_r0_m().unwrap_or(f64::INFINITY),
            wander_sigma2_m2: ch.params().wander_sigma2_m2(),
        }),
        raw: rate_report(&raw_matrix),
        corrected: rate_report(&corrected_matrix),
        accidental_rate_at_source_hz: accidental_rate(
            config.link.signal_singles_rate_hz,
            config.link.idler_singles_rate_hz,
            config.link.coincidence_window_s,
        )?,
        config,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| AppError::Domain(format!("report serialization: {e}")))?;
    fs::write(args.out.join("report.json"), &json)?;
    println!("{json}");
    Ok(())
}

// ----------------------------------------------------------------- analyze

#[derive(Args)]
struct AnalyzeArgs {
    /// Shipped fixture name (e.g. d4_corrected) or a matrix CSV path.
    matrix: String,
    /// Cross-check: fail unless the matrix has this dimension.
    #[arg(long)]
    dim: Option<usize>,
    /// Skip the numeric dual bound (analytic rate only).
    #[arg(long)]
    no_dual: bool,
    /// Random restarts for the dual optimizer.
    #[arg(long, default_value_t = 4)]
    restarts: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Serialize)]
struct AnalyzeReport {
    version: &'static str,
    source: String,
    provenance: String,
    d: usize,
    qber: f64,
    qber_per_basis: [f64; 2],
    key_rate_analytic_bits: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    key_rate_dual_bits: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dual_converged: Option<bool>,
    seed: u64,
}

fn load_matrix(name_or_path: &str) -> Result<DetectionMatrix, AppError> {
    if io::FIXTURE_NAMES.contains(&name_or_path) {
        return Ok(io::fixture(name_or_path)?);
    }
    let path = Path::new(name_or_path);
    let text =
        fs::read_to_string(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
    Ok(io::parse_matrix_csv(&text)?)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), AppError> {
    let matrix = load_matrix(&args.matrix)?;
    if let Some(dim) = args.dim {
        if matrix.d() != dim {
            return Err(AppError::Domain(format!(
                "matrix dimension {} does not match requested {dim}",
                matrix.d()
            )));
        }
    }
    let report = qber(&matrix);
    let analytic = key_rate_analytic(report.q, report.d)?;
    let (dual_rate, dual_converged) = if args.no_dual {
        (None, None)
    } else {
        let mubs = mub_for_dim(report.d, if report.d == 2 { 1 } else { 2 })?;
        let dual = key_rate_dual(&mubs, report.q, args.restarts, args.seed)?;
        (Some(dual.rate_bits), Some(dual.converged))
    };
    let out = AnalyzeReport {
        version: hdqkd::VERSION,
        source: args.matrix.clone(),
        provenance: matrix.provenance().to_string(),
        d: report.d,
        qber: report.q,
        qber_per_basis: report.per_basis,
        key_rate_analytic_bits: analytic.r,
        key_rate_dual_bits: dual_rate,
        dual_converged,
        seed: args.seed,
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&out)
            .map_err(|e| AppError::Domain(format!("report serialization: {e}")))?
    );
    Ok(())
}

// ------------------------------------------------------------ keyrate-sweep

#[derive(Args)]
struct SweepArgs {
    /// Protocol dimension (2 or 4).
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Grid points, evenly spaced on [0, q_max].
    #[arg(long, default_value_t = 9)]
    points: usize,
    #[arg(long, default_value_t = 0.18)]
    q_max: f64,
    #[arg(long, default_value_t = 4)]
    restarts: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output CSV path (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_keyrate_sweep(args: SweepArgs) -> Result<(), AppError> {
    if args.points < 2 {
        return Err(AppError::Domain("need at least two grid points".into()));
    }
    let mubs = mub_for_dim(args.dim, if args.dim == 2 { 1 } else { 2 })?;
    let mut csv = String::new();
    csv.push_str(&format!(
        "# version = {}, d = {}, restarts = {}, seed = {}\n",
        hdqkd::VERSION,
        args.dim,
        args.restarts,
        args.seed
    ));
    csv.push_str("q,key_rate_dual_bits,key_rate_analytic_bits\n");
    for i in 0..args.points {
        let q = args.q_max * i as f64 / (args.points - 1) as f64;
        let dual = key_rate_dual(&mubs, q, args.restarts, args.seed)?;
        let analytic = key_rate_analytic(q, args.dim)?;
        csv.push_str(&format!("{q},{},{}\n", dual.rate_bits, analytic.r));
    }
    match &args.out {
        Some(path) => fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

// -------------------------------------------------------------------- fried

#[derive(Args)]
struct FriedArgs {
    /// Two-column CSV of centroid displacements in meters.
    centroids: PathBuf,
    #[arg(long, default_value_t = 300.0)]
    link_length_m: f64,
    #[arg(long, default_value_t = 850e-9)]
    wavelength_m: f64,
    #[arg(long, default_value_t = 0.012)]
    beam_waist_m: f64,
    /// Camera exposure per sample, seconds.
    #[arg(long, default_value_t = 0.01)]
    exposure_s: f64,
}

#[derive(Serialize)]
struct FriedReport {
    version: &'static str,
    samples: usize,
    link_length_m: f64,
    wavelength_m: f64,
    beam_waist_m: f64,
    fried_r0_m: f64,
    cn2_m_to_minus_2_3: f64,
    wander_sigma2_m2: f64,
}

fn cmd_fried(args: FriedArgs) -> Result<(), AppError> {
    let text = fs::read_to_string(&args.centroids)
        .map_err(|e| input_err(format!("{}: {e}", args.centroids.display())))?;
    let samples = io::parse_centroids_csv(&text)?;
    let count = samples.len();
    let series = CentroidSeries::new(samples, args.exposure_s)?;
    let params = fried_from_centroids(
        &series,
        args.link_length_m,
        args.wavelength_m,
        args.beam_waist_m,
    )?;
    let report = FriedReport {
        version: hdqkd::VERSION,
        samples: count,
        link_length_m: args.link_length_m,
        wavelength_m: args.wavelength_m,
        beam_waist_m: args.beam_waist_m,
        fried_r0_m: params.fried_r0_m()?,
        cn2_m_to_minus_2_3: params.cn2,
        wander_sigma2_m2: params.wander_sigma2_m2(),
    };
    println!(
        "{}",
        serde_json::to_string_pretty(&report)
            .map_err(|e| AppError::Domain(format!("report serialization: {e}")))?
    );
    Ok(())
}

// ------------------------------------------------------------- encrypt-demo

#[derive(Args)]
struct EncryptArgs {
    /// Input image: binary PPM (P6) or PNG by extension.
    image: PathBuf,
    /// Symbol alphabet size (2 or 4).
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Confusion channel: shipped fixture name or matrix CSV path.
    #[arg(long, default_value = "d4_noisy")]
    matrix: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write PNG copies of the stage images.
    #[arg(long)]
    png: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Serialize)]
struct EncryptReport {
    version: &'static str,
    image: String,
    matrix: String,
    dim: usize,
    seed: u64,
    width: usize,
    height: usize,
    symbols: usize,
    symbol_error_rate: f64,
    channel_qber: f64,
}

fn read_image(path: &Path) -> Result<RgbImage, AppError> {
    let is_png = path
        .extension()
        .map(|e| e.eq_ignore_ascii_case("png"))
        .unwrap_or(false);
    if is_png {
        let img = image::open(path)
            .map_err(|e| input_err(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        Ok(RgbImage::new(w as usize, h as usize, img.into_raw())?)
    } else {
        let mut file =
            fs::File::open(path).map_err(|e| input_err(format!("{}: {e}", path.display())))?;
        Ok(io::read_ppm(&mut file)?)
    }
}

fn write_stage(
    dir: &Path,
    name: &str,
    img: &SymbolImage,
    png: bool,
) -> Result<(), AppError> {
    let rgb = RgbImage::new(img.width(), img.height(), encdemo::render(img))?;
    let mut file = fs::File::create(dir.join(format!("{name}.ppm")))?;
    io::write_ppm(&rgb, &mut file)?;
    if png {
        let buffer = image::RgbImage::from_raw(
            rgb.width as u32,
            rgb.height as u32,
            rgb.data.clone(),
        )
        .expect("raster length matches dimensions");
        buffer
            .save(dir.join(format!("{name}.png")))
            .map_err(|e| AppError::Domain(format!("png encode: {e}")))?;
    }
    Ok(())
}

fn cmd_encrypt_demo(args: EncryptArgs) -> Result<(), AppError> {
    let raster = read_image(&args.image)?;
    let matrix = load_matrix(&args.matrix)?;
    let plain = encdemo::discretize(raster.width, raster.height, &raster.data, args.dim)?;
    let key = KeyStream::random(args.dim, plain.symbols().len(), args.seed)?;
    let cipher = encdemo::encrypt(&plain, &key)?;
    let received = encdemo::channel_corrupt(&cipher, &matrix, args.seed.wrapping_add(1))?;
    let decrypted = encdemo::decrypt(&received, &key)?;

    fs::create_dir_all(&args.out)?;
    write_stage(&args.out, "original", &plain, args.png)?;
    write_stage(&args.out, "encrypted", &cipher, args.png)?;
    write_stage(&args.out, "decrypted", &decrypted, args.png)?;

    let report = EncryptReport {
        version: hdqkd::VERSION,
        image: args.image.display().to_string(),
        matrix: args.matrix.clone(),
        dim: args.dim,
        seed: args.seed,
        width: plain.width(),
        height: plain.height(),
        symbols: plain.symbols().len(),
        symbol_error_rate: plain.symbol_error_rate(&decrypted)?,
        channel_qber: qber(&matrix).q,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| AppError::Domain(format!("report serialization: {e}")))?;
    fs::write(args.out.join("report.json"), &json)?;
    println!("{json}");
    Ok(())
}

// ------------------------------------------------------------------ screens

#[derive(Args)]
struct ScreensArgs {
    /// Fried parameter in meters (alternative: --cn2).
    #[arg(long, conflicts_with = "cn2")]
    r0_m: Option<f64>,
    /// Turbulence strength Cₙ² in m^(−2/3), converted at the link
    /// geometry below.
    #[arg(long)]
    cn2: Option<f64>,
    #[arg(long, default_value_t = 300.0)]
    link_length_m: f64,
    #[arg(long, default_value_t = 850e-9)]
    wavelength_m: f64,
    /// Grid size (power of two).
    #[arg(long, default_value_t = 512)]
    n: usize,
    #[arg(long, default_value_t = 0.002)]
    pitch_m: f64,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Also write a grayscale PNG preview of the first screen.
    #[arg(long)]
    png: bool,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Serialize)]
struct ScreensManifest {
    version: &'static str,
    fried_r0_m: f64,
    n: usize,
    pitch_m: f64,
    count: usize,
    seed: u64,
    files: Vec<String>,
}

fn cmd_screens(args: ScreensArgs) -> Result<(), AppError> {
    let r0 = match (args.r0_m, args.cn2) {
        (Some(r0), None) => r0,
        (None, Some(cn2)) => {
            TurbulenceParams::new(cn2, args.link_length_m, args.wavelength_m, 0.012)?
                .fried_r0_m()?
        }
        _ => {
            return Err(AppError::Domain(
                "specify exactly one of --r0-m or --cn2".into(),
            ))
        }
    };
    let gen = ScreenGenerator::new(r0, args.n, args.pitch_m)?;
    let screens = gen.generate_ensemble(args.count, args.seed);
    fs::create_dir_all(&args.out)?;
    let mut files = Vec::with_capacity(screens.len());
    for (i, screen) in screens.iter().enumerate() {
        let name = format!("screen_{i:03}.bin");
        let mut file = fs::File::create(args.out.join(&name))?;
        io::write_screen(&screen.to_data(), &mut file)?;
        files.push(name);
    }
    if args.png {
        let first = &screens[0];
        let values = first.values();
        let (lo, hi) = values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        let pixels: Vec<u8> = values
            .iter()
            .map(|&v| ((v - lo) / span * 255.0).round() as u8)
            .collect();
        let buffer =
            image::GrayImage::from_raw(first.n() as u32, first.n() as u32, pixels)
                .expect("raster length matches dimensions");
        buffer
            .save(args.out.join("preview.png"))
            .map_err(|e| AppError::Domain(format!("png encode: {e}")))?;
    }
    let manifest = ScreensManifest {
        version: hdqkd::VERSION,
        fried_r0_m: r0,
        n: args.n,
        pitch_m: args.pitch_m,
        count: args.count,
        seed: args.seed,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| AppError::Domain(format!("manifest serialization: {e}")))?;
    fs::write(args.out.join("manifest.json"), &json)?;
    println!("{json}");
    Ok(())
}
