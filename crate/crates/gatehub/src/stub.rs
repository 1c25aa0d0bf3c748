//! Stand-ins for the real scientific tools. Each sleeps for its simulated
//! runtime and writes output files of its tool's size class.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Duration;

use clap::Parser;
use gatehub_core::workflow::{DataClass, DESK_SCALE};

/// Exit status for a segment whose input checkpoint is missing.
pub const MISSING_CHECKPOINT: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tool {
    Lammps,
    R,
    AtomEye,
    Ffmpeg,
    Debyer,
    Pizza,
}

impl Tool {
    pub const ALL: [Tool; 6] = [Tool::Lammps, Tool::R, Tool::AtomEye, Tool::Ffmpeg, Tool::Debyer, Tool::Pizza];

    pub fn binary(self) -> &'static str {
        match self {
            Tool::Lammps => "mock-lammps",
            Tool::R => "mock-r",
            Tool::AtomEye => "mock-atomeye",
            Tool::Ffmpeg => "mock-ffmpeg",
            Tool::Debyer => "mock-debyer",
            Tool::Pizza => "mock-pizza",
        }
    }

    pub fn data_class(self) -> DataClass {
        match self {
            Tool::Lammps | Tool::Pizza => DataClass::TextHuge,
            Tool::R | Tool::AtomEye => DataClass::ImageSmall,
            Tool::Ffmpeg => DataClass::VideoSmall,
            Tool::Debyer => DataClass::TextMedium,
        }
    }

    pub fn default_output(self) -> &'static str {
        match self {
            Tool::Lammps => "dump.txt",
            Tool::R => "plot.png",
            Tool::AtomEye => "frame.png",
            Tool::Ffmpeg => "movie.mp4",
            Tool::Debyer => "pattern.txt",
            Tool::Pizza => "frames.cfg",
        }
    }
}

#[derive(Debug, Parser)]
struct StubArgs {
    /// Model size.
    #[arg(long)]
    atoms: Option<u64>,
    /// Simulated runtime; defaults to $GATEHUB_WORK_MINUTES, then 0.
    #[arg(long)]
    minutes: Option<f64>,
    /// Exit with status 1 after the runtime.
    #[arg(long)]
    fail: bool,
    /// Output file, repeatable.
    #[arg(long)]
    out: Vec<String>,
}

fn env_f64(name: &str) -> Option<f64> {
    std::env::var(name).ok().and_then(|v| v.trim().parse().ok())
}

/// Bytes a stub writes for `class` at `desk_scale`.
pub fn output_bytes(class: DataClass, desk_scale: f64) -> u64 {
    (class.nominal_bytes() as f64 * desk_scale) as u64
}

fn write_output(path: &Path, tool: Tool, bytes: u64, atoms: u64) -> std::io::Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    let header = format!("# {} atoms={atoms}\n", tool.binary());
    let line = b"1 0.000000 0.000000 0.000000 0.0 0.0 0.0\n";
    let mut left = bytes;
    let head = header.as_bytes();
    let n = head.len().min(left as usize);
    f.write_all(&head[..n])?;
    left -= n as u64;
    while left > 0 {
        let n = line.len().min(left as usize);
        f.write_all(&line[..n])?;
        left -= n as u64;
    }
    f.flush()
}

fn checkpoint() -> Result<u64, String> {
    let Some(input) = std::env::var_os("CKPT_IN").filter(|v| !v.is_empty()) else {
        return Ok(0);
    };
    let text = fs::read_to_string(&input).map_err(|_| format!("missing checkpoint {}", Path::new(&input).display()))?;
    text.trim().parse().map_err(|_| format!("corrupt checkpoint {}", Path::new(&input).display()))
}

/// Directory holding the stub binaries built alongside the running
/// executable (test harness binaries live one level down, in `deps`).
pub fn sibling_stub_dir() -> Option<std::path::PathBuf> {
    let exe = std::env::current_exe().ok()?;
    let mut dir = exe.parent()?.to_path_buf();
    if dir.ends_with("deps") {
        dir.pop();
    }
    dir.join(Tool::Lammps.binary()).is_file().then_some(dir)
}

/// Entry point shared by the stub binaries; returns the exit status.
pub fn run(tool: Tool, args: impl IntoIterator<Item = OsString>) -> i32 {
    let args = match StubArgs::try_parse_from(args) {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    let counter = match checkpoint() {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("{}: {msg}", tool.binary());
            return MISSING_CHECKPOINT;
        }
    };
    let minutes = args.minutes.or_else(|| env_f64("GATEHUB_WORK_MINUTES")).unwrap_or(0.0).max(0.0);
    let ms_per_minute = env_f64("GATEHUB_MS_PER_MINUTE").unwrap_or(0.0).max(0.0);
    let desk_scale = env_f64("GATEHUB_DESK_SCALE").unwrap_or(DESK_SCALE);
    std::thread::sleep(Duration::from_secs_f64(minutes * ms_per_minute / 1000.0));
    if args.fail {
        eprintln!("{}: injected failure", tool.binary());
        return 1;
    }
    let atoms = args.atoms.unwrap_or(0);
    let outs = if args.out.is_empty() { vec![tool.default_output().to_string()] } else { args.out };
    let bytes = output_bytes(tool.data_class(), desk_scale);
    for out in &outs {
        if let Err(e) = write_output(Path::new(out), tool, bytes, atoms) {
            eprintln!("{}: cannot write {out}: {e}", tool.binary());
            return 1;
        }
        println!("{}: wrote {out} ({bytes} bytes)", tool.binary());
    }
    if let Some(path) = std::env::var_os("CKPT_OUT").filter(|v| !v.is_empty()) {
        if let Err(e) = fs::write(&path, format!("{}\n", counter + 1)) {
            eprintln!("{}: cannot write checkpoint: {e}", tool.binary());
            return 1;
        }
    }
    println!("{}: atoms={atoms} minutes={minutes} segment_counter={}", tool.binary(), counter + 1);
    0
}
