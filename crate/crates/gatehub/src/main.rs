use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gatehub::client::Client;
use gatehub::config::{bundled_local_sites, bundled_sim_sites, load_sites, load_workflow};
use gatehub::local::{run_local, LocalConfig};
use gatehub::runs::{CreateRun, ManagerConfig, RunManager};
use gatehub::service::{self, AppState};
use gatehub::store::{RunStatus, Store, TemplateRef};
use gatehub::stub::sibling_stub_dir;
use gatehub_core::driver::simulate;
use gatehub_core::scheduler::{to_ndjson, JobState, Policy, RunSummary};
use gatehub_core::sim::{BackendKind, SimConfig};
use gatehub_core::workflow::{expand_sweep, SweepSpec, SweepValue, Workflow};

/// `println!` that treats a closed stdout (e.g. `| head`) as a normal exit.
macro_rules! say {
    ($($t:tt)*) => {{
        if let Err(e) = writeln!(std::io::stdout().lock(), $($t)*) {
            quit_on_pipe(e);
        }
    }};
}

macro_rules! say_raw {
    ($($t:tt)*) => {{
        if let Err(e) = write!(std::io::stdout().lock(), $($t)*) {
            quit_on_pipe(e);
        }
    }};
}

fn quit_on_pipe(e: std::io::Error) {
    if e.kind() == std::io::ErrorKind::BrokenPipe {
        std::process::exit(0);
    }
    eprintln!("error: cannot write output: {e}");
    std::process::exit(1);
}

#[derive(Parser)]
#[command(name = "gatehub", version, about = "Workflow runs on local processes or simulated batch clusters")]
struct Cli {
    /// Print machine-readable JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a workflow file.
    Validate { workflow: PathBuf },
    /// List the jobs a workflow expands to.
    Expand {
        workflow: PathBuf,
        #[arg(long, default_value = "run")]
        run_id: String,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Run a workflow on a simulated cluster.
    Simulate(SimulateArgs),
    /// Run a workflow on this machine.
    Run(RunArgs),
    /// Start the service.
    Serve(ServeArgs),
    /// Obtain an API token.
    Login {
        #[command(flatten)]
        api: ApiArgs,
        #[arg(long)]
        user: String,
        #[arg(long, env = "GATEHUB_PASSWORD", hide_env_values = true)]
        password: String,
    },
    /// Submit a run of a stored template.
    Submit(SubmitArgs),
    /// Show a run's state.
    Status {
        #[command(flatten)]
        api: ApiArgs,
        run: String,
    },
    /// Show a run's summary.
    Summary {
        #[command(flatten)]
        api: ApiArgs,
        run: String,
    },
    /// Cancel a run.
    Cancel {
        #[command(flatten)]
        api: ApiArgs,
        run: String,
    },
    /// Download an artifact.
    Fetch {
        #[command(flatten)]
        api: ApiArgs,
        run: String,
        #[arg(long)]
        job: String,
        #[arg(long)]
        port: String,
        /// Destination file (default: standard output).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ApiArgs {
    #[arg(long, env = "GATEHUB_API", default_value = "http://127.0.0.1:8080")]
    api: String,
    #[arg(long, env = "GATEHUB_TOKEN", hide_env_values = true)]
    token: Option<String>,
}

impl ApiArgs {
    fn client(&self) -> Client {
        Client::new(&self.api, self.token.clone())
    }
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep axis as `name=v1,v2,...`; replaces the workflow's sweep when given.
    #[arg(long = "axis")]
    axes: Vec<String>,
    /// Constant as `name=value`.
    #[arg(long = "constant")]
    constants: Vec<String>,
}

impl SweepArgs {
    fn spec(&self) -> Result<Option<SweepSpec>, Failure> {
        if self.axes.is_empty() && self.constants.is_empty() {
            return Ok(None);
        }
        let mut s = SweepSpec::default();
        for axis in &self.axes {
            let (n, values) = split_pair(axis)?;
            s = s.axis(n, values.split(',').map(sweep_value));
        }
        for c in &self.constants {
            let (n, v) = split_pair(c)?;
            s.constants.insert(n.into(), sweep_value(v));
        }
        Ok(Some(s))
    }

    fn apply(&self, wf: Workflow) -> Result<Workflow, Failure> {
        match self.spec()? {
            Some(s) => Ok(wf.with_sweep(s)?),
            None => Ok(wf),
        }
    }
}

#[derive(Args)]
struct PolicyArgs {
    /// Walltime safety factor.
    #[arg(long)]
    safety: Option<f64>,
    #[arg(long)]
    max_attempts: Option<u32>,
}

impl PolicyArgs {
    fn policy(&self) -> Result<Policy, String> {
        let mut p = Policy::default();
        if let Some(s) = self.safety {
            p.safety = s;
        }
        if let Some(m) = self.max_attempts {
            p.max_attempts = m;
        }
        p.validate().map_err(|e| format!("invalid policy: {e}"))?;
        Ok(p)
    }
}

#[derive(Args)]
struct SimulateArgs {
    workflow: PathBuf,
    /// Site file (default: the bundled cluster).
    #[arg(long)]
    sites: Option<PathBuf>,
    #[arg(long, default_value = "sim")]
    run_id: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Runtime noise; 0 runs every job exactly at its estimate.
    #[arg(long, default_value_t = 0.1)]
    sigma: f64,
    #[arg(long, default_value_t = 0.0)]
    failure_rate: f64,
    #[command(flatten)]
    sweep: SweepArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    /// Print only the summary, not the event trace.
    #[arg(long, short)]
    quiet: bool,
    /// Write the transition log here as NDJSON.
    #[arg(long)]
    events: Option<PathBuf>,
    /// Write the cluster trace here as NDJSON.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    workflow: PathBuf,
    /// Site file (default: the bundled single-machine site).
    #[arg(long)]
    sites: Option<PathBuf>,
    #[arg(long, default_value = "local")]
    run_id: String,
    /// Where job directories are created.
    #[arg(long, default_value = "gatehub-runs")]
    work_dir: PathBuf,
    /// Directory with the mock tool binaries.
    #[arg(long)]
    stub_dir: Option<PathBuf>,
    /// Real milliseconds per estimated minute.
    #[arg(long, default_value_t = 10.0)]
    ms_per_minute: f64,
    #[arg(long, default_value_t = 8)]
    max_parallel: usize,
    #[command(flatten)]
    sweep: SweepArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long)]
    events: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, env = "GATEHUB_ADDR", default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, env = "GATEHUB_STORE", default_value = "gatehub-store")]
    store: PathBuf,
    /// Static web client directory served under /ui.
    #[arg(long, env = "GATEHUB_UI")]
    ui: Option<PathBuf>,
    #[arg(long)]
    allow_register: bool,
    #[arg(long, env = "GATEHUB_SIM_SITES")]
    sim_sites: Option<PathBuf>,
    #[arg(long, env = "GATEHUB_LOCAL_SITES")]
    local_sites: Option<PathBuf>,
    /// Real milliseconds per simulated minute (0: as fast as possible).
    #[arg(long, env = "GATEHUB_SIM_MS_PER_MINUTE", default_value_t = 0.0)]
    sim_ms_per_minute: f64,
    #[arg(long, env = "GATEHUB_LOCAL_MS_PER_MINUTE", default_value_t = 10.0)]
    local_ms_per_minute: f64,
    /// Relative input files of local runs resolve against this directory.
    #[arg(long, env = "GATEHUB_BASE_DIR", default_value = "workflows")]
    base_dir: PathBuf,
    #[arg(long, env = "GATEHUB_STUB_DIR")]
    stub_dir: Option<PathBuf>,
    #[arg(long, env = "GATEHUB_ADMIN_USER", default_value = "admin")]
    admin_user: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Sim,
    Local,
}

#[derive(Args)]
struct SubmitArgs {
    #[command(flatten)]
    api: ApiArgs,
    /// Template as `name` or `name@version`.
    template: String,
    #[command(flatten)]
    sweep: SweepArgs,
    #[arg(long, value_enum, default_value = "sim")]
    backend: BackendArg,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long)]
    idempotency_key: Option<String>,
    /// Poll until the run ends.
    #[arg(long)]
    wait: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl<E: std::fmt::Display> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: 1, message: e.to_string() }
    }
}

type CliResult = Result<(), Failure>;

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_env("GATEHUB_LOG").unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cli: Cli) -> CliResult {
    let json = cli.json;
    match cli.command {
        Command::Validate { workflow } => validate(&workflow, json),
        Command::Expand { workflow, run_id, sweep } => expand(&workflow, &run_id, &sweep, json),
        Command::Simulate(args) => simulate_cmd(args, json),
        Command::Run(args) => run_cmd(args, json),
        Command::Serve(args) => serve_cmd(args),
        Command::Login { api, user, password } => {
            let mut c = api.client();
            let login = c.login(&user, &password)?;
            if json {
                say!("{}", serde_json::to_string(&login)?);
            } else {
                say!("{}", login.token);
            }
            Ok(())
        }
        Command::Submit(args) => submit(args, json),
        Command::Status { api, run } => {
            let r = api.client().run(&run)?;
            if json {
                say!("{}", serde_json::to_string(&r)?);
            } else {
                let s = r.summary.clone().unwrap_or_else(|| RunSummary::from_jobs(&r.id, &r.jobs));
                say!("{} {}", r.id, status_word(r.status));
                print_counts(&s);
            }
            Ok(())
        }
        Command::Summary { api, run } => {
            let s = api.client().summary(&run)?;
            if json {
                say!("{}", serde_json::to_string(&s)?);
            } else {
                print_summary(&s);
            }
            Ok(())
        }
        Command::Cancel { api, run } => {
            api.client().cancel(&run)?;
            Ok(())
        }
        Command::Fetch { api, run, job, port, output } => {
            let bytes = api.client().download(&run, &job, &port)?;
            match output {
                Some(p) => fs::write(&p, bytes).map_err(|e| format!("{}: {e}", p.display()))?,
                None => std::io::stdout().write_all(&bytes)?,
            }
            Ok(())
        }
    }
}

fn status_word(s: RunStatus) -> &'static str {
    match s {
        RunStatus::Running => "running",
        RunStatus::Completed => "completed",
        RunStatus::Cancelled => "cancelled",
        RunStatus::Failed => "failed",
    }
}

fn load(path: &Path) -> Result<Workflow, Failure> {
    Ok(load_workflow(path)?)
}

fn validate(path: &Path, json: bool) -> CliResult {
    let wf = load(path)?;
    let points = wf.sweep.axes.points();
    if json {
        let v = serde_json::json!({
            "valid": true,
            "nodes": wf.graph.nodes.len(),
            "edges": wf.graph.edges.len(),
            "points": points,
        });
        say!("{v}");
    } else {
        say!(
            "{}: ok ({} nodes, {} edges, {} sweep points)",
            path.display(),
            wf.graph.nodes.len(),
            wf.graph.edges.len(),
            points
        );
    }
    Ok(())
}

fn expand(path: &Path, run_id: &str, sweep: &SweepArgs, json: bool) -> CliResult {
    let wf = sweep.apply(load(path)?)?;
    let set = expand_sweep(&wf, run_id)?;
    if json {
        say!("{}", serde_json::to_string(&set)?);
        return Ok(());
    }
    for j in &set.jobs {
        let params: Vec<String> = j.params.iter().map(|(k, v)| format!("{k}={v}")).collect();
        let deps: Vec<&str> = j.depends_on.iter().map(|d| d.as_str()).collect();
        say!(
            "{}\t{}\t{:.1} min\t{} cores\t[{}]\tafter [{}]",
            j.id,
            j.node_id,
            j.estimate.runtime,
            j.estimate.cores,
            params.join(" "),
            deps.join(" ")
        );
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(())
}

fn print_counts(s: &RunSummary) {
    for state in JobState::ALL {
        let n = s.count(state);
        if n > 0 {
            say!("  {state:<18} {n}");
        }
    }
}

fn print_summary(s: &RunSummary) {
    say!("jobs: {}", s.total);
    print_counts(s);
    if !s.faulty.is_empty() {
        say!("faulty attempts:");
        for f in &s.faulty {
            say!("  {} attempt {}: {} at {}s, now {} ({})", f.job, f.attempt, f.state, f.ts, f.final_state, f.detail);
        }
    }
}

fn all_finished(s: &RunSummary) -> bool {
    s.count(JobState::Finished) == s.total
}

fn simulate_cmd(a: SimulateArgs, json: bool) -> CliResult {
    let wf = a.sweep.apply(load(&a.workflow)?)?;
    let sites = match &a.sites {
        Some(p) => load_sites(p)?,
        None => bundled_sim_sites(),
    };
    let set = expand_sweep(&wf, &a.run_id)?;
    let config = SimConfig { seed: a.seed, sigma: a.sigma, failure_rate: a.failure_rate };
    let out = simulate(set, sites, a.policy.policy()?, config)?;
    if let Some(p) = &a.events {
        write_file(p, &to_ndjson(&out.records))?;
    }
    if let Some(p) = &a.trace {
        let text: String = out.trace.iter().map(|e| serde_json::to_string(e).expect("trace serializes") + "\n").collect();
        write_file(p, &text)?;
    }
    if json {
        let v = serde_json::json!({
            "events": out.records,
            "summary": out.summary,
            "makespan": out.makespan,
            "artifacts": out.artifacts,
        });
        say!("{v}");
    } else {
        if !a.quiet {
            say_raw!("{}", to_ndjson(&out.records));
        }
        print_summary(&out.summary);
        say!("makespan: {:.1} min", out.makespan as f64 / 60.0);
    }
    if all_finished(&out.summary) {
        Ok(())
    } else {
        Err(Failure { code: 1, message: "some jobs did not finish".into() })
    }
}

fn run_cmd(a: RunArgs, json: bool) -> CliResult {
    let wf = a.sweep.apply(load(&a.workflow)?)?;
    let sites = match &a.sites {
        Some(p) => load_sites(p)?,
        None => bundled_local_sites(),
    };
    let set = expand_sweep(&wf, &a.run_id)?;
    let mut cfg = LocalConfig::new(&a.work_dir);
    cfg.base_dir = a.workflow.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.stub_dir = a.stub_dir.clone().or_else(sibling_stub_dir);
    cfg.ms_per_minute = a.ms_per_minute;
    cfg.max_parallel = a.max_parallel.max(1);
    let out = run_local(set, sites, a.policy.policy()?, cfg)?;
    if let Some(p) = &a.events {
        write_file(p, &to_ndjson(&out.records))?;
    }
    if json {
        let v = serde_json::json!({ "summary": out.summary, "makespan": out.makespan, "artifacts": out.artifacts });
        say!("{v}");
    } else {
        print_summary(&out.summary);
        for art in &out.artifacts {
            let flag = if art.within_expected { "" } else { "  (outside expected size)" };
            say!("  {} {} {} bytes {}{flag}", art.job, art.port, art.bytes, art.path);
        }
    }
    if all_finished(&out.summary) {
        Ok(())
    } else {
        Err(Failure { code: 1, message: "some jobs did not finish".into() })
    }
}

fn serve_cmd(a: ServeArgs) -> CliResult {
    let store = Arc::new(Store::open(&a.store)?);
    match std::env::var("GATEHUB_ADMIN_PASSWORD") {
        Ok(pw) if !pw.is_empty() => {
            if store.ensure_admin(&a.admin_user, &pw)? {
                tracing::info!(user = %a.admin_user, "created admin account");
            }
        }
        _ => {
            if store.users()?.is_empty() {
                tracing::warn!("no accounts exist; set GATEHUB_ADMIN_PASSWORD to create an admin");
            }
        }
    }
    let mut local = LocalConfig::new(store.runs_dir());
    local.base_dir = a.base_dir.clone();
    local.stub_dir = a.stub_dir.clone().or_else(sibling_stub_dir);
    local.ms_per_minute = a.local_ms_per_minute;
    let cfg = ManagerConfig {
        sim_sites: match &a.sim_sites {
            Some(p) => load_sites(p)?,
            None => bundled_sim_sites(),
        },
        local_sites: match &a.local_sites {
            Some(p) => load_sites(p)?,
            None => bundled_local_sites(),
        },
        sim_ms_per_minute: a.sim_ms_per_minute,
        local,
    };
    let runs = RunManager::start(store, cfg)?;
    let state = Arc::new(AppState { runs, allow_register: a.allow_register });
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(service::serve(&a.addr, state, a.ui.clone()))?;
    Ok(())
}

fn sweep_value(text: &str) -> SweepValue {
    match serde_json::from_str::<serde_json::Number>(text) {
        Ok(n) => SweepValue::Number(n),
        Err(_) => SweepValue::Text(text.into()),
    }
}

fn split_pair(text: &str) -> Result<(&str, &str), Failure> {
    text.split_once('=').ok_or_else(|| Failure { code: 2, message: format!("expected name=value, got {text:?}") })
}

fn submit(a: SubmitArgs, json: bool) -> CliResult {
    let (name, version) = match a.template.split_once('@') {
        Some((n, v)) => (n, v.parse().map_err(|_| Failure { code: 2, message: format!("bad version {v:?}") })?),
        None => (a.template.as_str(), 1),
    };
    let sweep = a.sweep.spec()?;
    let req = CreateRun {
        template: TemplateRef { name: name.into(), version },
        sweep,
        backend: Some(match a.backend {
            BackendArg::Sim => BackendKind::Sim,
            BackendArg::Local => BackendKind::Local,
        }),
        seed: a.seed,
        run_id: a.run_id.clone(),
        ..CreateRun::default()
    };
    let client = a.api.client();
    let mut record = client.submit(&req, a.idempotency_key.as_deref())?;
    if a.wait {
        while record.status == RunStatus::Running {
            std::thread::sleep(Duration::from_millis(200));
            record = client.run(&record.id)?;
        }
    }
    if json {
        say!("{}", serde_json::to_string(&record)?);
    } else {
        say!("{}", record.id);
        if a.wait {
            say!("{}", status_word(record.status));
            if let Some(s) = &record.summary {
                print_summary(s);
            }
        }
    }
    Ok(())
}
