use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ovinet_cli::client::HttpRegistry;
use ovinet_cli::control::TcpControl;
use ovinet_cli::{build_sim, exit_code, shared, BlankDevice, EXIT_OTHER};
use ovinet_core::detector::DetectorConfig;
use ovinet_core::provisioner::{self, ControlChannel, ProvisionError, ProvisioningForm};
use ovinet_core::scenario::{table_iii, table_iv, validate_corpus, ControlRequest, ControlResponse, Report};
use ovinet_core::synthgen::{parse_corpus_spec, scene_corpus, GeneratorParams};
use ovinet_core::time::sim_epoch;
use ovinet_core::{Scenario, Simulation};

const DEFAULT_CORPUS: &str = include_str!("../data/corpus.csv");

#[derive(Parser)]
#[command(name = "ovinet", version, about = "Ovitrap surveillance twin: experiments, platform server and provisioning")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Replay a scenario on the virtual clock and print the result table.
    Run {
        /// Scenario TOML; the built-in 28-day proof of concept if omitted.
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Write the platform store as line-delimited JSON.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Count eggs on a synthetic corpus and print the validation table.
    Validate {
        /// CSV of scene_id,egg_count,distractor_count.
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, default_value_t = 2023)]
        seed: u64,
        /// Save each scene's snapshots and truth record here.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Print the built-in proof-of-concept scenario as TOML.
    Scenario,
    /// Host the platform REST API and the devices' control channel.
    Serve {
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        #[arg(long, default_value = "127.0.0.1:7878")]
        control: SocketAddr,
        /// Simulated seconds per wall-clock second; 0 advances only on
        /// POST /sim/advance.
        #[arg(long, default_value_t = 60.0)]
        speed: f64,
        /// Unprovisioned device to host, SERIAL or SERIAL:EGGS. Repeatable.
        #[arg(long = "blank")]
        blanks: Vec<BlankDevice>,
    },
    /// Provision a device from a form and register it with the platform.
    Provision {
        #[arg(long)]
        file: PathBuf,
        #[command(flatten)]
        target: Target,
    },
    /// Run a calibration reading and check the platform stored it.
    TestRead {
        #[command(flatten)]
        target: Target,
    },
    /// Show a device's state over the control channel.
    Status {
        #[command(flatten)]
        target: Target,
    },
}

#[derive(clap::Args)]
struct Target {
    /// Device serial on the control channel.
    #[arg(long)]
    device: String,
    #[arg(long, env = "OVINET_CONTROL", default_value = "127.0.0.1:7878")]
    control: String,
    #[arg(long, env = "OVINET_PLATFORM", default_value = "http://127.0.0.1:8080")]
    platform: String,
    /// Seconds to wait for any single reply.
    #[arg(long, default_value_t = 30.0)]
    timeout: f64,
}

impl Target {
    fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout.max(0.001))
    }

    fn control(&self) -> Result<TcpControl, ProvisionError> {
        TcpControl::new(&self.control, &self.device, self.timeout())
    }

    fn registry(&self) -> Result<HttpRegistry, ProvisionError> {
        HttpRegistry::new(&self.platform, self.timeout())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = match e.downcast_ref::<ProvisionError>() {
                Some(pe) => {
                    report_provision_error(pe);
                    exit_code(pe)
                }
                None => {
                    eprintln!("error: {e:#}");
                    EXIT_OTHER
                }
            };
            ExitCode::from(code as u8)
        }
    }
}

fn report_provision_error(e: &ProvisionError) {
    match e {
        ProvisionError::Validation(problems) => {
            eprintln!("error: the form is invalid");
            for p in problems {
                eprintln!("  {}: {}", p.field, p.message);
            }
        }
        other => eprintln!("error: {other}"),
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Run {
            scenario,
            seed,
            json,
            export,
        } => run(scenario.as_deref(), seed, json.as_deref(), export.as_deref()),
        Cmd::Validate { corpus, seed, save } => validate(corpus.as_deref(), seed, save.as_deref()),
        Cmd::Scenario => {
            print!("{}", Scenario::poc28().to_toml());
            Ok(())
        }
        Cmd::Serve {
            scenario,
            seed,
            listen,
            control,
            speed,
            blanks,
        } => serve(scenario.as_deref(), seed, listen, control, speed, &blanks),
        Cmd::Provision { file, target } => provision(&file, &target),
        Cmd::TestRead { target } => test_read(&target),
        Cmd::Status { target } => status(&target),
    }
}

fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    let scn = match path {
        Some(p) => Scenario::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => Scenario::poc28(),
    };
    scn.validate().context("invalid scenario")?;
    Ok(scn)
}

fn run(path: Option<&Path>, seed: Option<u64>, json: Option<&Path>, export: Option<&Path>) -> Result<()> {
    let scn = load_scenario(path)?;
    let seed = seed.unwrap_or(scn.seed);
    let mut sim = Simulation::from_scenario(&scn, seed)?;
    sim.run_until(scn.end() - chrono::Duration::milliseconds(1))?;
    let report = Report::build(&scn, &sim, seed);
    print!("{}", table_iv(&report));
    println!();
    println!("scenario         {} (seed {seed})", report.scenario);
    println!("communications   {}", report.communications);
    println!("readings stored  {}", report.readings_stored);
    println!("max lag          {:.3} s", report.max_lag_s);
    println!("alarms           {}", report.alarms.len());
    println!(
        "accuracy         {:.2} % ({} measured of {} existing, mean over columns)",
        report.accuracy_pct,
        report.measured_totals.iter().map(u64::to_string).collect::<Vec<_>>().join("/"),
        report.truth_total
    );
    if let Some(p) = json {
        std::fs::write(p, report.to_json()).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = export {
        sim.platform()
            .save(p)
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn validate(corpus: Option<&Path>, seed: u64, save: Option<&Path>) -> Result<()> {
    let spec = match corpus {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        None => DEFAULT_CORPUS.to_string(),
    };
    let rows = parse_corpus_spec(&spec)?;
    let scenes = scene_corpus(&rows, &GeneratorParams::with_seed(seed))?;
    if let Some(dir) = save {
        for s in &scenes {
            s.save(dir)?;
        }
    }
    let v = validate_corpus(&scenes, &DetectorConfig::default(), sim_epoch())?;
    print!("{}", table_iii(&v));
    let (existing, read) = v.totals();
    println!();
    println!("eggs read        {read} of {existing}");
    if let Some(c) = v.min_confidence() {
        println!("min confidence   {c:.3}");
    }
    if !v.all_counts_match() {
        bail!("some scenes were miscounted");
    }
    Ok(())
}

fn serve(
    path: Option<&Path>,
    seed: Option<u64>,
    listen: SocketAddr,
    control: SocketAddr,
    speed: f64,
    blanks: &[BlankDevice],
) -> Result<()> {
    if !(speed.is_finite() && speed >= 0.0) {
        bail!("speed must be a non-negative number");
    }
    let scn = path.map(|p| load_scenario(Some(p))).transpose()?;
    let seed = seed.or(scn.as_ref().map(|s| s.seed)).unwrap_or(1);
    let sim = shared(build_sim(scn.as_ref(), seed, blanks)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(ovinet_cli::serve(sim, listen, control, speed, |b| {
        println!("platform http://{}  control {}", b.http, b.control);
    }))?;
    Ok(())
}

fn provision(file: &Path, target: &Target) -> Result<()> {
    let form = ProvisioningForm::load(file)?;
    let base = file.parent().unwrap_or(Path::new("."));
    let mut ctl = target.control()?;
    let mut reg = target.registry()?;
    let c = provisioner::provision(&form, base, &mut ctl, &mut reg)?;
    println!("device      {} (serial {})", c.device_id, c.serial);
    println!("registry    {}", if c.registered { "created" } else { "already registered" });
    println!("config      {}", if c.config_changed { "written" } else { "unchanged" });
    println!("operating   since {}", c.started_at.to_rfc3339());
    Ok(())
}

fn test_read(target: &Target) -> Result<()> {
    let mut ctl = target.control()?;
    let mut reg = target.registry()?;
    let r = provisioner::test_reading(&mut ctl, &mut reg)?;
    println!("device      {}", r.device_id);
    println!("assay       {}", r.assay_id);
    println!("eggs        {}", r.egg_count);
    println!("timestamp   {}", r.ts.to_rfc3339());
    if !r.confidences.is_empty() {
        let c: Vec<String> = r.confidences.iter().map(|c| format!("{c:.2}")).collect();
        println!("confidence  {}", c.join(" "));
    }
    println!("platform    {}", if r.delivered { "received" } else { "not received" });
    for w in &r.warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn status(target: &Target) -> Result<()> {
    let mut ctl = target.control()?;
    match ctl.request(ControlRequest::Status)? {
        ControlResponse::Status {
            device_id,
            phase,
            battery_pct,
            readings_done,
            pending_readings,
            last_reading,
            sensors,
        } => {
            println!("device      {}", device_id.as_deref().unwrap_or("(unprovisioned)"));
            println!("phase       {phase}");
            println!("battery     {battery_pct:.1} %");
            println!("readings    {readings_done} done, {pending_readings} queued");
            if let Some((ts, n)) = last_reading {
                println!("last        {n} eggs at {}", ts.to_rfc3339());
            }
            println!(
                "sensors     tilt {}, lid {}, water {}, {:.1} °C, {:.0} %RH",
                sensors.tilt.as_str(),
                if sensors.lid_open { "open" } else { "closed" },
                if sensors.water_present { "present" } else { "missing" },
                sensors.temperature_c,
                sensors.humidity_pct
            );
            Ok(())
        }
        ControlResponse::Error { code, message } => Err(match code.as_str() {
            "timeout" => ProvisionError::Timeout(message),
            _ => ProvisionError::DeviceFault(message),
        }
        .into()),
        other => bail!("unexpected reply {other:?}"),
    }
}
