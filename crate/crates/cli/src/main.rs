use std::fs::{self, File};
use std::io::{self, BufWriter, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vlc_cp::bits::BitString;
use vlc_cp::config::{Preset, RunConfig, DEFAULT_KEY};
use vlc_cp::cpm::{
    cpm_size_bits, decode_cpm, encode_cpm, etsi_cpm_size_bits, field_layout, verify_mac, CollectivePerceptionMessage,
    MacKey, MAC_BITS, MAX_OBJECTS,
};
use vlc_cp::harness::experiment::{n_frame, points, stream_plan, stream_spec, CALIBRATION_DISTANCE};
use vlc_cp::harness::link::run_stream_observed;
use vlc_cp::harness::{calibrate, check_invariants, run_experiment, to_csv, ExperimentResult};

/// Compact CPM codec and LED-to-camera link simulator.
#[derive(Parser)]
#[command(name = "vlccp", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Encode a message file (TOML) to hex.
    Encode {
        message: PathBuf,
        #[arg(long)]
        key: Option<MacKey>,
    },
    /// Decode a hex frame to a message file, checking the MAC.
    Decode {
        /// Hex bytes; read from stdin when absent.
        hex: Option<String>,
        #[arg(long)]
        key: Option<MacKey>,
        /// Message length in bits, when the frame is not byte-padded.
        #[arg(long)]
        bits: Option<usize>,
    },
    /// Show the field layout and size of a hex frame.
    Inspect {
        hex: Option<String>,
        #[arg(long)]
        key: Option<MacKey>,
        #[arg(long)]
        bits: Option<usize>,
    },
    /// Run one experiment and write its CSV.
    Run {
        #[command(flatten)]
        common: Common,
        /// Write the first N captures of the first stream as PGM images.
        #[arg(long, value_name = "N")]
        dump_frames: Option<usize>,
    },
    /// Search the noise sigma that puts the 100 m BER in the target band.
    Calibrate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        seed: Option<u64>,
        /// Where to write the calibrated config; defaults to the input
        /// config file, or stdout when running from a preset.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run presets over custom sweep axes; all presets when none is given.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        fps: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        distances: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        speeds: Option<Vec<f64>>,
        #[arg(long)]
        packets: Option<usize>,
        #[arg(long)]
        runs: Option<usize>,
    },
}

#[derive(Args)]
struct Source {
    /// Config file (TOML), or a result CSV to rerun from its header.
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset, conflicts_with = "config")]
    preset: Option<Preset>,
}

#[derive(Args)]
struct Common {
    #[command(flatten)]
    source: Source,
    #[arg(long)]
    seed: Option<u64>,
    /// Pixel noise sigma in gray levels.
    #[arg(long)]
    noise: Option<f64>,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: vlc_cp::config::UnknownPreset| e.to_string())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Encode { message, key } => encode(&message, &key.unwrap_or(DEFAULT_KEY)),
        Command::Decode { hex, key, bits } => decode(hex, &key.unwrap_or(DEFAULT_KEY), bits),
        Command::Inspect { hex, key, bits } => inspect(hex, &key.unwrap_or(DEFAULT_KEY), bits),
        Command::Run { common, dump_frames } => {
            let cfg = common.resolve(None)?;
            execute(&[cfg], &common.out, dump_frames)
        }
        Command::Calibrate { source, seed, out } => {
            let mut cfg = source.load(Preset::OutdoorRange)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let from_csv = source.config.as_ref().is_some_and(|p| p.extension().is_some_and(|e| e == "csv"));
            run_calibration(cfg, out.or(if from_csv { None } else { source.config }))
        }
        Command::Sweep {
            common,
            fps,
            distances,
            speeds,
            packets,
            runs,
        } => {
            let presets = match (&common.source.config, common.source.preset) {
                (None, None) => Preset::ALL.to_vec(),
                _ => vec![common.resolve(None)?.preset],
            };
            let mut cfgs = Vec::new();
            for p in presets {
                let mut cfg = common.resolve(Some(p))?;
                if let Some(v) = &fps {
                    cfg.fps = v.clone();
                }
                if let Some(v) = &distances {
                    cfg.distances_m = v.clone();
                }
                if let Some(v) = &speeds {
                    cfg.speeds_kmh = v.clone();
                }
                if let Some(n) = packets {
                    cfg.packets = n;
                }
                if let Some(n) = runs {
                    cfg.runs = n;
                }
                cfgs.push(cfg);
            }
            execute(&cfgs, &common.out, None)
        }
    }
}

impl Source {
    fn load(&self, fallback: Preset) -> Result<RunConfig> {
        match (&self.config, self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let cfg = if text.lines().any(|l| l.starts_with("#| ")) {
                    RunConfig::from_csv_header(&text)
                } else {
                    RunConfig::from_toml(&text)
                };
                cfg.with_context(|| format!("loading {}", path.display()))
            }
            (None, p) => Ok(RunConfig::preset(p.unwrap_or(fallback))),
        }
    }
}

impl Common {
    /// The config to run: the file, the named preset, or `preset` when
    /// neither was given on the command line.
    fn resolve(&self, preset: Option<Preset>) -> Result<RunConfig> {
        let mut cfg = match preset {
            Some(p) if self.source.config.is_none() => RunConfig::preset(p),
            _ if self.source.config.is_none() && self.source.preset.is_none() => {
                bail!("give a config file or --preset (indoor-stationary, outdoor-range, outdoor-driving)")
            }
            _ => self.source.load(Preset::OutdoorRange)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(n) = self.noise {
            cfg.scene.noise_sigma = n;
        }
        Ok(cfg)
    }
}

fn read_hex(arg: Option<String>) -> Result<Vec<u8>> {
    let text = match arg {
        Some(s) => s,
        None => {
            let mut s = String::new();
            io::stdin().read_to_string(&mut s)?;
            s
        }
    };
    let bits = BitString::from_hex(&text).map_err(|e| anyhow!("{e}"))?;
    Ok(bits.as_bytes().to_vec())
}

/// Message length in bits for a byte-padded frame of `bytes` bytes.
fn bits_for_bytes(bytes: usize) -> Option<usize> {
    (0..=MAX_OBJECTS)
        .map(cpm_size_bits)
        .find(|b| b.div_ceil(8) == bytes)
}

fn frame_bits(bytes: &[u8], bits: Option<usize>) -> Result<BitString> {
    let len = match bits {
        Some(b) => b,
        None => bits_for_bytes(bytes.len())
            .ok_or_else(|| anyhow!("{} bytes is not the padded length of any 272 + 74n bit message", bytes.len()))?,
    };
    BitString::from_bytes_truncated(bytes, len).map_err(|e| anyhow!("{e}"))
}

fn size_report(n: usize) -> String {
    let bits = cpm_size_bits(n);
    format!("272 + 74n = {bits} bits (padded {}), n = {n}", bits.div_ceil(8) * 8)
}

fn encode(path: &Path, key: &MacKey) -> Result<ExitCode> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let msg: CollectivePerceptionMessage =
        toml::from_str(&text).with_context(|| format!("parsing message {}", path.display()))?;
    let bits = encode_cpm(&msg, key).with_context(|| format!("encoding {}", path.display()))?;
    println!("{}", bits.padded_to_byte().to_hex());
    println!("{}", size_report(msg.objects.len()));
    Ok(ExitCode::SUCCESS)
}

fn message_toml(msg: &CollectivePerceptionMessage) -> Result<String> {
    let unsigned = CollectivePerceptionMessage { mac: 0, ..msg.clone() };
    let mut table = toml::Table::try_from(unsigned).context("message is not representable as TOML")?;
    table.remove("mac");
    Ok(toml::to_string(&table)?)
}

fn decode(hex: Option<String>, key: &MacKey, bits: Option<usize>) -> Result<ExitCode> {
    let frame = frame_bits(&read_hex(hex)?, bits)?;
    let msg = decode_cpm(&frame, key)?;
    println!("# mac = {:016x} (verified)", msg.mac);
    print!("{}", message_toml(&msg)?);
    Ok(ExitCode::SUCCESS)
}

fn inspect(hex: Option<String>, key: &MacKey, bits: Option<usize>) -> Result<ExitCode> {
    let bytes = read_hex(hex)?;
    let frame = frame_bits(&bytes, bits)?;
    let n = vlc_cp::cpm::object_count_for_len(frame.len())
        .ok_or_else(|| anyhow!("{} bits is not of the form 272 + 74n", frame.len()))?;
    println!("{} bytes, {}", bytes.len(), size_report(n));
    println!("ETSI CPM with {n} objects and one sensor: {} bits", etsi_cpm_size_bits(n, 1));
    println!("{:>6} {:>5}  {:<20} value", "offset", "width", "field");
    for f in field_layout(n) {
        let name = match f.object {
            Some(i) => format!("objects[{i}].{}", f.name),
            None => f.name.to_string(),
        };
        let v = f.read(&frame).expect("layout fits the frame");
        let shown = if f.name == "mac" { format!("{v:016x}") } else { v.to_string() };
        println!("{:>6} {:>5}  {:<20} {shown}", f.offset, f.width, name);
    }
    let body_len = frame.len() - MAC_BITS as usize;
    let tag = frame.read_bits(body_len, MAC_BITS).expect("length checked");
    let ok = verify_mac(&frame.slice(0, body_len), key, tag);
    println!("mac {}", if ok { "verifies" } else { "does NOT verify under this key" });
    Ok(ExitCode::SUCCESS)
}

fn describe(r: &ExperimentResult) -> String {
    let p = &r.point;
    let ber = r.ber.map_or("NA (all erased)".to_string(), |b| format!("{b:.3e}"));
    let lat = r.latency_mean.map_or("NA".to_string(), |l| format!("{:.2} ms", l * 1e3));
    format!(
        "  fps {:>6} d {:>5} m v {:>3} km/h: {}/{} packets, ber {ber} (upper {:.2e}), latency {lat} (model {:.2} ms)",
        p.fps,
        p.distance_m,
        p.speed_kmh,
        r.trials,
        r.packets_sent,
        r.ber_upper_95,
        r.latency_eq1 * 1e3
    )
}

fn execute(cfgs: &[RunConfig], out: &Path, dump_frames: Option<usize>) -> Result<ExitCode> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut failures = Vec::new();
    for cfg in cfgs {
        println!("{} (seed {}, noise sigma {})", cfg.preset, cfg.seed, cfg.scene.noise_sigma);
        let results = run_experiment(cfg)?;
        for r in &results {
            println!("{}", describe(r));
        }
        let path = out.join(format!("{}.csv", cfg.preset));
        fs::write(&path, to_csv(cfg, &results)).with_context(|| format!("writing {}", path.display()))?;
        println!("  wrote {}", path.display());
        if let Some(n) = dump_frames {
            let dir = out.join("frames");
            let written = dump(cfg, &dir, n)?;
            println!("  wrote {written} frames to {}", dir.display());
        }
        failures.extend(check_invariants(cfg, &results).into_iter().map(|m| format!("{}: {m}", cfg.preset)));
    }
    if failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for f in &failures {
        eprintln!("invariant failed: {f}");
    }
    Ok(ExitCode::from(2))
}

/// Writes the first `n` captures of the first stream at the first point.
fn dump(cfg: &RunConfig, dir: &Path, n: usize) -> Result<usize> {
    fs::create_dir_all(dir)?;
    let p = points(cfg)[0];
    let (seed, packets) = stream_plan(cfg, &p)[0];
    // each packet spans at least two captures per data byte
    let packets = packets.min(n.div_ceil(2 * n_frame(cfg)) + 1);
    let mut spec = stream_spec(cfg, &p, seed, packets);
    spec.partial_render = false;
    let mut written = 0;
    let mut err = None;
    run_stream_observed(&spec, |i, frame| {
        if (i as usize) < n && err.is_none() {
            let path = dir.join(format!("{}_{i:05}.pgm", cfg.preset));
            match File::create(&path).and_then(|f| frame.write_pgm(BufWriter::new(f))) {
                Ok(()) => written += 1,
                Err(e) => err = Some(e),
            }
        }
    });
    match err {
        Some(e) => Err(e).context("writing frame dump"),
        None => Ok(written),
    }
}

fn run_calibration(mut cfg: RunConfig, out: Option<PathBuf>) -> Result<ExitCode> {
    let result = calibrate(&cfg);
    let trace = match &result {
        Ok(c) => &c.trace,
        Err(vlc_cp::harness::CalibrationError::BracketNotFound { trace, .. }) => trace,
        Err(_) => &Vec::new(),
    };
    for (sigma, ber) in trace {
        let ber = ber.map_or("NA (all erased)".to_string(), |b| format!("{b:.3e}"));
        eprintln!("sigma {sigma:>9.4}: {CALIBRATION_DISTANCE} m ber {ber}");
    }
    let c = result?;
    let r = &c.result;
    let ber = r.ber.expect("calibrated point has packets");
    cfg.scene.noise_sigma = c.sigma;
    let text = format!(
        "# calibrated noise_sigma = {} (ber {ber:.3e} at {CALIBRATION_DISTANCE} m, {} errors in {} bits)\n{}",
        c.sigma,
        r.bit_errors,
        r.bits_sent,
        cfg.to_toml()
    );
    match out {
        Some(path) => {
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            eprintln!("noise_sigma = {} written to {}", c.sigma, path.display());
        }
        None => print!("{text}"),
    }
    Ok(ExitCode::SUCCESS)
}
