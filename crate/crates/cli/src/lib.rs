//! `nxfp` command-line tool.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nxfp::analysis::{
    ablation_sweep, block_size_csv, block_size_sweep, default_recycle_candidates, evaluate,
    format_sig9, microexp_config_sweep, microexp_csv, profile_scaled_distribution,
    recycled_value_sweep, ErrorReport, DEFAULT_BLOCK_SIZES,
};
use nxfp::ingest::write_npy;
use nxfp::{
    dequantize_tensor, footprint_bits_per_element, load_tensor, quantize_tensor, DequantTarget,
    Dtype, ElementKind, NanoSearch, PackedTensor, QuantConfig, RecycleRule, SynthModel, Tensor,
    TensorSource,
};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_IO: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "nxfp",
    version,
    about = "Block quantization with NanoMantissa, adaptive microexponents and code recycling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a tensor into a .nxt file.
    Quantize {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        format: FormatArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode a .nxt file to .npy.
    Dequantize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Output precision: f32, f16 or bf16 (bf16 values are stored as f32 in the .npy).
        #[arg(long, default_value = "f32")]
        dtype: DequantTarget,
    },
    /// Print the header and per-block scale statistics of a .nxt file.
    Inspect {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Quantization error report and scaled-value histogram for one format.
    Analyze {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        format: FormatArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        hist_out: Option<PathBuf>,
    },
    /// Run one of the parameter sweeps.
    Sweep {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        format: FormatArgs,
        #[arg(long)]
        sweep: SweepKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare several comma-separated formats on one tensor.
    Compare {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        format: FormatArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Ablation,
    BlockSize,
    RecycledValue,
    Microexp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthArg {
    Gaussian,
    Outliers,
    Pairs,
}

impl From<SynthArg> for SynthModel {
    fn from(s: SynthArg) -> Self {
        match s {
            SynthArg::Gaussian => SynthModel::Gaussian,
            SynthArg::Outliers => SynthModel::OutlierInjected,
            SynthArg::Pairs => SynthModel::ClusteredScatteredPairs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NanoSearchArg {
    Alg1,
    Exhaustive,
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// Input tensor (.npy, .safetensors, or raw little-endian with --dtype and --shape).
    #[arg(
        long = "in",
        required_unless_present = "synth",
        conflicts_with = "synth"
    )]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub tensor_name: Option<String>,
    #[arg(long)]
    pub dtype: Option<Dtype>,
    /// Comma-separated dimensions for raw input.
    #[arg(long)]
    pub shape: Option<String>,
    /// Generate a synthetic tensor instead of reading one.
    #[arg(long, requires_all = ["seed", "len"])]
    pub synth: Option<SynthArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of synthetic values.
    #[arg(long)]
    pub len: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FormatArgs {
    /// Format name such as nxfp4, mxfp6-e2m3 or bfp8 (a comma-separated list for compare).
    #[arg(long, default_value = "nxfp4")]
    pub format: String,
    #[arg(long)]
    pub block_size: Option<usize>,
    #[arg(long)]
    pub no_nano: bool,
    #[arg(long)]
    pub no_adaptive: bool,
    #[arg(long)]
    pub no_recycle: bool,
    /// half-smallest, midpoint-top, midpoint-K or level-K.
    #[arg(long)]
    pub recycle_rule: Option<RecycleRule>,
    #[arg(long)]
    pub nano_search: Option<NanoSearchArg>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(nxfp::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Core(e) if e.is_numeric_input() => EXIT_NUMERIC,
            CliError::Core(e) => match e.root() {
                nxfp::Error::InvalidFormat(_) | nxfp::Error::InvalidConfig(_) => EXIT_USAGE,
                _ => EXIT_IO,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<nxfp::Error> for CliError {
    fn from(e: nxfp::Error) -> Self {
        CliError::Core(e)
    }
}

type CliResult<T> = Result<T, CliError>;

/// Parses `mxfp4`, `nxfp5`, `bfp8`, `mxfp6-e3m2`, optionally followed by
/// `+nm`, `+am`, `+cr` feature tags.
pub fn parse_format_spec(spec: &str) -> CliResult<QuantConfig> {
    let bad = || CliError::Usage(format!("unrecognized format {spec:?}"));
    let mut parts = spec.trim().split('+');
    let base = parts.next().unwrap_or_default().to_ascii_lowercase();
    let (family, rest) = ["mxfp", "nxfp", "bfp"]
        .iter()
        .find_map(|f| base.strip_prefix(f).map(|r| (*f, r)))
        .ok_or_else(bad)?;
    let (bits, suffix) = match rest.split_once('-') {
        Some((b, s)) => (b, Some(s)),
        None => (rest, None),
    };
    let bits: u8 = bits.parse().map_err(|_| bad())?;
    if !(3..=8).contains(&bits) {
        return Err(CliError::Usage(format!(
            "element width in {spec:?} must be 3 to 8 bits"
        )));
    }
    let microexp = match suffix {
        None if family == "bfp" => 0,
        None => QuantConfig::default_microexp_bits(bits),
        Some(s) => {
            let (e, m) = s
                .strip_prefix('e')
                .and_then(|s| s.split_once('m'))
                .ok_or_else(bad)?;
            let (e, m): (u8, u8) = (e.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?);
            if e as u32 + m as u32 + 1 != bits as u32 {
                return Err(CliError::Usage(format!(
                    "e{e}m{m} in {spec:?} does not fill {bits} bits with a sign bit"
                )));
            }
            if family == "bfp" && e != 0 {
                return Err(CliError::Usage(format!(
                    "{spec:?}: block floating point has no exponent field"
                )));
            }
            e
        }
    };
    let mut cfg = if family == "nxfp" {
        QuantConfig::nxfp(bits, microexp)
    } else {
        QuantConfig::mxfp(bits, microexp)
    };
    for tag in parts {
        match tag.to_ascii_lowercase().as_str() {
            "nm" => cfg.nano_enabled = true,
            "am" => cfg.adaptive_enabled = true,
            "cr" => cfg.recycle_enabled = true,
            _ => return Err(bad()),
        }
    }
    cfg.validate()
        .map_err(|e| CliError::Usage(format!("{spec:?}: {e}")))?;
    Ok(cfg)
}

impl FormatArgs {
    fn apply(&self, mut cfg: QuantConfig) -> CliResult<QuantConfig> {
        if let Some(bs) = self.block_size {
            cfg.block_size = bs;
        }
        cfg.nano_enabled &= !self.no_nano;
        cfg.adaptive_enabled &= !self.no_adaptive;
        cfg.recycle_enabled &= !self.no_recycle;
        if let Some(rule) = self.recycle_rule {
            cfg.recycle_rule = rule;
        }
        if let Some(search) = self.nano_search {
            cfg.nano_search = match search {
                NanoSearchArg::Alg1 => NanoSearch::AsAlgorithm1,
                NanoSearchArg::Exhaustive => NanoSearch::Exhaustive4,
            };
        }
        cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(cfg)
    }

    fn single(&self) -> CliResult<QuantConfig> {
        if self.format.contains(',') {
            return Err(CliError::Usage(
                "this command takes a single --format".into(),
            ));
        }
        self.apply(parse_format_spec(&self.format)?)
    }

    fn list(&self) -> CliResult<Vec<(String, QuantConfig)>> {
        self.format
            .split(',')
            .map(|s| Ok((s.trim().to_string(), self.apply(parse_format_spec(s)?)?)))
            .collect()
    }
}

fn parse_shape(s: &str) -> CliResult<Vec<usize>> {
    s.split(',')
        .map(|d| {
            d.trim()
                .parse()
                .map_err(|_| CliError::Usage(format!("bad --shape {s:?}")))
        })
        .collect()
}

impl InputArgs {
    fn source(&self) -> CliResult<TensorSource> {
        if let Some(model) = self.synth {
            let (Some(seed), Some(n)) = (self.seed, self.len) else {
                return Err(CliError::Usage("--synth needs --seed and --len".into()));
            };
            return Ok(TensorSource::Synthetic {
                model: model.into(),
                n,
                seed,
            });
        }
        let path = self
            .input
            .clone()
            .ok_or_else(|| CliError::Usage("either --in or --synth is required".into()))?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        Ok(match ext.as_str() {
            "npy" => TensorSource::Npy {
                path,
                dtype: self.dtype,
            },
            "safetensors" => TensorSource::Safetensors {
                path,
                name: self.tensor_name.clone(),
                dtype: self.dtype,
            },
            _ => {
                let (Some(dtype), Some(shape)) = (self.dtype, self.shape.as_deref()) else {
                    return Err(CliError::Usage(format!(
                        "{}: raw input needs --dtype and --shape",
                        path.display()
                    )));
                };
                TensorSource::Raw {
                    path,
                    dtype,
                    shape: parse_shape(shape)?,
                }
            }
        })
    }

    fn load(&self) -> CliResult<Tensor> {
        Ok(load_tensor(&self.source()?)?)
    }
}

fn write_text(out: Option<&Path>, text: &str, stdout: &mut dyn std::io::Write) -> CliResult<()> {
    match out {
        Some(path) => fs::write(path, text).map_err(|e| io_error(path, e)),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| io_error(Path::new("<stdout>"), e)),
    }
}

fn io_error(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(nxfp::Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Text report printed by `inspect`.
pub fn inspect_text(p: &PackedTensor, file_bytes: usize) -> String {
    let cfg = p.config();
    let shape: Vec<String> = p.shape().iter().map(|d| d.to_string()).collect();
    let exps: Vec<i32> = p
        .scales()
        .iter()
        .filter_map(|s| s.e_shared.map(i32::from))
        .collect();
    let mut nano = [0usize; 4];
    for s in p.scales().iter().filter(|s| s.e_shared.is_some()) {
        nano[s.m_nano as usize] += 1;
    }
    let bfp = p
        .scales()
        .iter()
        .filter(|s| s.e_shared.is_some() && s.fmt == ElementKind::Bfp)
        .count();
    let opt = |v: Option<&i32>| v.map_or("none".to_string(), |v| v.to_string());
    let mut s = String::new();
    let mut line = |k: &str, v: String| writeln!(s, "{k:<18}{v}").unwrap();
    line("format", cfg.name());
    line("shape", shape.join(","));
    line("logical_len", p.logical_len().to_string());
    line("block_size", cfg.block_size.to_string());
    line("element_bits", cfg.element_bits.to_string());
    line("microexp_bits", cfg.microexp_bits.to_string());
    line("nano", cfg.nano_enabled.to_string());
    line("adaptive", cfg.adaptive_enabled.to_string());
    line("recycle", cfg.recycle_enabled.to_string());
    line("recycle_rule", cfg.recycle_rule.to_string());
    line("recycle_sign", cfg.recycle_sign.to_string());
    line("nano_search", cfg.nano_search.to_string());
    line(
        "bits_per_element",
        format_sig9(footprint_bits_per_element(cfg)),
    );
    line("file_bytes", file_bytes.to_string());
    line("blocks", p.num_blocks().to_string());
    line("zero_blocks", (p.num_blocks() - exps.len()).to_string());
    line("e_shared_min", opt(exps.iter().min()));
    line("e_shared_max", opt(exps.iter().max()));
    line("m_nano_counts", nano.map(|c| c.to_string()).join(","));
    let frac = if exps.is_empty() {
        0.0
    } else {
        bfp as f64 / exps.len() as f64
    };
    line("bfp_fraction", format_sig9(frac));
    s
}

fn run(cli: Cli, stdout: &mut dyn std::io::Write) -> CliResult<()> {
    match cli.command {
        Command::Quantize { input, format, out } => {
            let cfg = format.single()?;
            let t = input.load()?;
            let p = quantize_tensor(t.data(), t.shape(), &cfg)?;
            let bytes = p.serialize();
            fs::write(&out, &bytes).map_err(|e| io_error(&out, e))?;
            let mut s = String::new();
            writeln!(s, "format {}", cfg.name()).unwrap();
            writeln!(s, "elements {}", p.logical_len()).unwrap();
            writeln!(s, "blocks {}", p.num_blocks()).unwrap();
            writeln!(
                s,
                "bits_per_element {}",
                format_sig9(footprint_bits_per_element(&cfg))
            )
            .unwrap();
            writeln!(s, "payload_bits {}", p.footprint_bits()).unwrap();
            writeln!(s, "file_bytes {}", bytes.len()).unwrap();
            write_text(None, &s, stdout)
        }
        Command::Dequantize { input, out, dtype } => {
            let p = PackedTensor::read_file(&input)?;
            let t = dequantize_tensor(&p, dtype)?;
            let stored = match dtype {
                DequantTarget::Binary16 => Dtype::F16,
                DequantTarget::BFloat16 => Dtype::BF16,
                DequantTarget::Binary32 => Dtype::F32,
            };
            write_npy(&out, &t, stored)?;
            Ok(())
        }
        Command::Inspect { input } => {
            let bytes = fs::read(&input).map_err(|e| io_error(&input, e))?;
            let p = PackedTensor::deserialize(&bytes)?;
            write_text(None, &inspect_text(&p, bytes.len()), stdout)
        }
        Command::Analyze {
            input,
            format,
            out,
            hist_out,
        } => {
            let cfg = format.single()?;
            let t = input.load()?;
            let report = ErrorReport::compare(t.data(), &[(format.format.clone(), cfg)])?;
            if let Some(path) = hist_out {
                let h = profile_scaled_distribution(t.data(), &cfg)?;
                write_text(Some(&path), &h.to_csv(), stdout)?;
            }
            write_text(out.as_deref(), &report.to_csv(), stdout)
        }
        Command::Sweep {
            input,
            format,
            sweep,
            out,
        } => {
            let cfg = format.single()?;
            let t = input.load()?;
            let v = t.data();
            let (b, bs) = (cfg.element_bits, cfg.block_size);
            let csv = match sweep {
                SweepKind::Ablation => ablation_sweep(v, b, bs)?.to_csv(),
                SweepKind::BlockSize => {
                    block_size_csv(&block_size_sweep(v, b, &DEFAULT_BLOCK_SIZES)?)
                }
                SweepKind::RecycledValue => {
                    let cfg = QuantConfig {
                        recycle_enabled: true,
                        ..cfg
                    };
                    let candidates = default_recycle_candidates(&cfg)?;
                    recycled_value_sweep(v, &cfg, &candidates)?.to_csv()
                }
                SweepKind::Microexp => microexp_csv(&microexp_config_sweep(v, b, bs)?),
            };
            write_text(out.as_deref(), &csv, stdout)
        }
        Command::Compare { input, format, out } => {
            let configs = format.list()?;
            let t = input.load()?;
            // Evaluated once here so a bad tensor fails before any output is written.
            evaluate(t.data(), &configs[0].1)?;
            let report = ErrorReport::compare(t.data(), &configs)?;
            write_text(out.as_deref(), &report.to_csv(), stdout)
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var("NXFP_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::Usage(format!("NXFP_THREADS={raw:?} is not a positive integer"))
    })?;
    // A pool may already exist when the tool runs in-process more than once.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

/// Parses `args`, runs the command, prints a one-line diagnostic on failure
/// and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = configure_threads().and_then(|()| run(cli, &mut std::io::stdout().lock()));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("nxfp: error: {e}");
            e.exit_code()
        }
    }
}
