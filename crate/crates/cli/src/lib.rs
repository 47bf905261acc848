//! Command-line front end: CSV ingestion, subcommand dispatch and atomic
//! report writing.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;
use pwtest::pipeline::{multi_split_test, TestConfig};
use pwtest::simbench::{gen_model, power_study, BenchConfig, Model, ModelSpec};
use pwtest::stiefel::{default_rho_ladder, l0_fit_projection, manpg_fit_projection, ManPGOptions};
use pwtest::transport::empirical_projected_w1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error(transparent)]
    Core(#[from] pwtest::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// A parsed numeric table.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTable {
    pub rows: DMatrix<f64>,
    pub source: PathBuf,
    pub delimiter: u8,
    pub had_header: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_cell(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

/// Reads a comma- (or tab-, for `.tsv`) separated numeric file. The first
/// row is taken as a header iff any of its cells fails to parse as a number.
pub fn load_dataset(path: impl AsRef<Path>) -> CliResult<InputTable> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let delimiter = if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("tsv"))
    {
        b'\t'
    } else {
        b','
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .delimiter(delimiter)
        .from_reader(text.as_bytes());
    let mut data: Vec<f64> = Vec::new();
    let mut width: Option<usize> = None;
    let mut n = 0usize;
    let mut had_header = false;
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
        let line = rec.position().map_or(idx as u64 + 1, |p| p.line());
        if rec.iter().all(|c| c.trim().is_empty()) {
            continue;
        }
        if idx == 0 && rec.iter().any(|c| parse_cell(c).is_none()) {
            had_header = true;
            width = Some(rec.len());
            continue;
        }
        match width {
            Some(w) if w != rec.len() => {
                return Err(CliError::Input(format!(
                    "{}: line {line}: expected {w} fields, found {}",
                    path.display(),
                    rec.len()
                )))
            }
            _ => width = Some(rec.len()),
        }
        for (c, cell) in rec.iter().enumerate() {
            let v = parse_cell(cell).ok_or_else(|| {
                CliError::Input(format!(
                    "{}: row {line}, column {}: cannot parse '{}' as a finite number",
                    path.display(),
                    c + 1,
                    cell.trim()
                ))
            })?;
            data.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(CliError::Input(format!("{}: no data rows", path.display())));
    }
    let d = width.unwrap_or(0);
    Ok(InputTable {
        rows: DMatrix::from_row_slice(n, d, &data),
        source: path.to_path_buf(),
        delimiter,
        had_header,
    })
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn atomic_write(path: impl AsRef<Path>, bytes: &[u8]) -> CliResult<()> {
    let path = path.as_ref();
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Input(format!("{}: not a file path", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        CliError::Io {
            path: path.to_path_buf(),
            source: e,
        }
    })
}

/// Comma-separated rows with shortest round-trip float formatting.
pub fn matrix_to_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

#[derive(Debug, Parser)]
#[command(
    name = "pwtest",
    version,
    about = "Neural projection-Wasserstein two-sample testing"
)]
pub struct Cli {
    /// Master seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for candidate fitting and replications (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the two-sample test and print the p-value and decision.
    Test(TestArgs),
    /// Fit a projection on the full data and print the projected W1 value.
    Pw(PwArgs),
    /// Draw a dataset from a simulation model.
    Simulate(SimulateArgs),
    /// Run a power study and write the rejection-rate table.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct TestArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    /// JSON test configuration; defaults apply to omitted keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Where to write the JSON report.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PwArgs {
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub y: PathBuf,
    #[arg(long)]
    pub k: usize,
    /// ℓ1 penalty.
    #[arg(long, conflicts_with = "omega")]
    pub rho: Option<f64>,
    /// ℓ0 budget (number of nonzero entries).
    #[arg(long)]
    pub omega: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: Model,
    #[arg(long)]
    pub beta: f64,
    #[arg(long)]
    pub d: usize,
    /// Size of each sample (see also --n-y).
    #[arg(long)]
    pub n: usize,
    /// Size of the second sample, if different from --n.
    #[arg(long)]
    pub n_y: Option<usize>,
    #[arg(long)]
    pub out_x: PathBuf,
    #[arg(long)]
    pub out_y: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 runtime failure, 2 usage error.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(io_err(path))
}

pub fn run(cli: Cli) -> CliResult<()> {
    let work = move || match cli.command {
        Command::Test(a) => run_test(a, cli.seed),
        Command::Pw(a) => run_pw(a, cli.seed),
        Command::Simulate(a) => run_simulate(a, cli.seed),
        Command::Bench(a) => run_bench(a, cli.seed),
    };
    match cli.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Input(format!("cannot start {n} threads: {e}")))?
            .install(work),
        None => work(),
    }
}

fn run_test(a: TestArgs, seed: Option<u64>) -> CliResult<()> {
    let x = load_dataset(&a.x)?.rows;
    let y = load_dataset(&a.y)?.rows;
    let mut config = match &a.config {
        Some(p) => TestConfig::from_json(&read_text(p)?)?,
        None => TestConfig::default(),
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    let report = multi_split_test(&x, &y, &config)?;
    if let Some(out) = &a.out {
        let mut text = report.to_json()?;
        text.push('\n');
        atomic_write(out, text.as_bytes())?;
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    println!("T = {}", report.t);
    println!("p = {}", report.p);
    println!(
        "decision: {} at alpha = {}",
        if report.reject {
            "reject H0"
        } else {
            "do not reject H0"
        },
        report.alpha
    );
    Ok(())
}

fn run_pw(a: PwArgs, seed: Option<u64>) -> CliResult<()> {
    let x = load_dataset(&a.x)?.rows;
    let y = load_dataset(&a.y)?.rows;
    let opts = ManPGOptions {
        seed: seed.unwrap_or(0),
        ..Default::default()
    };
    let value = match a.omega {
        Some(budget) => {
            let ladder = default_rho_ladder(&x, &y);
            let fit = l0_fit_projection(&x, &y, a.k, budget, &ladder, &opts)?;
            if fit.fallback {
                eprintln!("warning: no ladder fit was feasible; using coordinate selection");
            }
            fit.value
        }
        None => {
            let fit = manpg_fit_projection(&x, &y, a.k, a.rho.unwrap_or(0.0), &opts)?;
            empirical_projected_w1(&x, &y, &fit.u)?
        }
    };
    println!("{value}");
    Ok(())
}

fn run_simulate(a: SimulateArgs, seed: Option<u64>) -> CliResult<()> {
    let spec = ModelSpec {
        model: a.model,
        beta: a.beta,
        d: a.d,
        n_x: a.n,
        n_y: a.n_y.unwrap_or(a.n),
        seed: seed.unwrap_or(0),
    };
    let (x, y) = gen_model(&spec)?;
    atomic_write(&a.out_x, matrix_to_csv(&x).as_bytes())?;
    atomic_write(&a.out_y, matrix_to_csv(&y).as_bytes())?;
    Ok(())
}

fn run_bench(a: BenchArgs, seed: Option<u64>) -> CliResult<()> {
    let mut config = BenchConfig::from_json(&read_text(&a.config)?)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let table = power_study(&config)?;
    atomic_write(&a.out, table.to_csv_string()?.as_bytes())?;
    for r in &table.rows {
        println!(
            "{} model {} beta {} d {}: reject rate {} ({} failed)",
            r.method, r.model, r.beta, r.d, r.reject_rate, r.n_failed
        );
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_tmp(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn load_examples() {
        let dir = tempfile::tempdir().unwrap();
        let t = load_dataset(write_tmp(&dir, "a.csv", "1,2\n3,4")).unwrap();
        assert_eq!(t.rows, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert!(!t.had_header);
        let t = load_dataset(write_tmp(&dir, "b.csv", "a,b\n1,2")).unwrap();
        assert_eq!(t.rows, DMatrix::from_row_slice(1, 2, &[1.0, 2.0]));
        assert!(t.had_header);
        let e = load_dataset(write_tmp(&dir, "c.csv", "1,2\n3"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("line 2"), "{e}");
        let e = load_dataset(write_tmp(&dir, "d.csv", "1,2\n3,x\n"))
            .unwrap_err()
            .to_string();
        assert!(e.contains("row 2, column 2"), "{e}");
        assert!(load_dataset(write_tmp(&dir, "e.csv", "")).is_err());
        let t = load_dataset(write_tmp(&dir, "f.tsv", "1\t2\n3\t4\n")).unwrap();
        assert_eq!(t.rows.shape(), (2, 2));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = DMatrix::from_row_slice(2, 3, &[0.1, -2.5e-17, 3.0, 1.0 / 3.0, 7.0, -0.0]);
        let p = dir.path().join("m.csv");
        atomic_write(&p, matrix_to_csv(&m).as_bytes()).unwrap();
        assert_eq!(load_dataset(&p).unwrap().rows, m);
    }
}
