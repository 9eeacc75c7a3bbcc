use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nalgebra::DVector;

use safeproj::harness::{run_demo, run_section5, validate_config, write_run, DEMOS, SAFETY_TOLERANCE};
use safeproj::projection::project;
use safeproj::safe_set::ConstraintSet;
use safeproj::Error;

#[derive(Parser)]
#[command(name = "safeproj", version, about = "Safe-set projection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the tube MPC actor-critic experiment and write its CSV logs.
    #[command(name = "reproduce-sec5")]
    Reproduce {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed stored in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the CSV tables of a demonstration (fig1, fig2, bias-det, bias-stoch).
    Demo {
        name: String,
        /// Directory for the CSV files; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Project one input onto a set of halfspaces and balls and print M.
    Project {
        /// Candidate input, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        target: Vec<f64>,
        /// Halfspace `aᵀu ≤ b` given as `a1,...,am,b`. Repeatable.
        #[arg(long, allow_hyphen_values = true)]
        halfspace: Vec<String>,
        /// Ball `‖u − c‖ ≤ r` given as `c1,...,cm,r`. Repeatable.
        #[arg(long, allow_hyphen_values = true)]
        ball: Vec<String>,
    },
    /// Check a config file and print the resolved manifest.
    Validate { file: PathBuf },
}

fn parse_list(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidParameter(format!("`{p}`: {e}")))
        })
        .collect()
}

fn split_last(spec: &str, m: usize) -> Result<(Vec<f64>, f64), Error> {
    let mut v = parse_list(spec)?;
    if v.len() != m + 1 {
        return Err(Error::DimensionMismatch(format!(
            "`{spec}` needs {} numbers for a {m}-dimensional input",
            m + 1
        )));
    }
    let last = v.pop().unwrap();
    Ok((v, last))
}

fn fmt_row(v: impl Iterator<Item = f64>) -> String {
    // adding 0.0 turns -0 into 0
    v.map(|x| (x + 0.0).to_string()).collect::<Vec<_>>().join(",")
}

fn project_cmd(target: Vec<f64>, halfspaces: Vec<String>, balls: Vec<String>) -> Result<bool, Error> {
    let m = target.len();
    if m == 0 {
        return Err(Error::InvalidParameter("--target is empty".into()));
    }
    let mut set = ConstraintSet::new(1, m);
    for h in &halfspaces {
        let (a, b) = split_last(h, m)?;
        set = set.with_halfspace(&a, b)?;
    }
    for s in &balls {
        let (c, r) = split_last(s, m)?;
        set = set.with_ball(&c, r)?;
    }
    let out = project(&set, &DVector::zeros(1), &DVector::from_vec(target))?;
    let cols: Vec<String> = (1..=m).map(|i| format!("u{i}")).collect();
    println!("quantity,{}", cols.join(","));
    println!("u_proj,{}", fmt_row(out.u_proj.iter().copied()));
    match &out.correction {
        Some(mm) => {
            for (i, row) in mm.row_iter().enumerate() {
                println!("M{},{}", i + 1, fmt_row(row.iter().copied()));
            }
        }
        None => eprintln!("LICQ fails at the projection; M is undefined"),
    }
    println!("kkt_residual,{}", out.kkt_residual);
    Ok(out.kkt_residual <= 1e-8)
}

fn run(cli: Cli) -> Result<bool, Error> {
    match cli.command {
        Command::Reproduce { config, seed, out } => {
            let cfg = validate_config(&config).map_err(|d| safeproj::harness::config::diagnostics_to_error(&d))?;
            let seed = seed
                .or(cfg.seed)
                .ok_or_else(|| Error::Config("no seed: pass --seed or set `seed` in the config".into()))?;
            let log = run_section5(&cfg, seed)?;
            write_run(&out, &cfg, seed, &log)?;
            let violations = log.safety_violations();
            let excess = log.max_plan_excess();
            println!("quantity,value");
            println!("final_j_normalized,{}", log.final_normalized_j());
            println!("safety_violations,{violations}");
            println!("max_plan_excess,{excess}");
            Ok(violations == 0 && excess <= SAFETY_TOLERANCE)
        }
        Command::Demo { name, out, seed } => {
            let artifacts = run_demo(&name, seed)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    for a in &artifacts {
                        std::fs::write(dir.join(&a.name), &a.csv)?;
                        log::info!("wrote {}", dir.join(&a.name).display());
                    }
                }
                None => {
                    for a in &artifacts {
                        println!("# {}", a.name);
                        print!("{}", a.csv);
                    }
                }
            }
            Ok(true)
        }
        Command::Project {
            target,
            halfspace,
            ball,
        } => project_cmd(target, halfspace, ball),
        Command::Validate { file } => match validate_config(&file) {
            Ok(cfg) => {
                print!("{}", cfg.manifest(cfg.seed.unwrap_or(0))?);
                Ok(true)
            }
            Err(diags) => {
                for d in &diags {
                    eprintln!("{d}");
                }
                Ok(false)
            }
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Command::Demo { name, .. } = &cli.command {
        if !DEMOS.contains(&name.as_str()) {
            eprintln!("error: unknown demo `{name}` (expected one of {})", DEMOS.join(", "));
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
