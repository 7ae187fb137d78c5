use std::io::Write;
use std::process::ExitCode;

use clap::Parser;
use mksd_cli::commands::{self, Cli, Command};
use mksd_cli::error::Result;
use mksd_cli::ingest;

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Test(a) => {
            let out = commands::cmd_test(&a)?;
            let mut w = commands::open_output(a.output.as_deref())?;
            serde_json::to_writer_pretty(&mut w, &out).map_err(std::io::Error::other)?;
            writeln!(w)?;
        }
        Command::Criticize(a) => {
            let out = commands::cmd_criticize(&a)?;
            if let Some(prefix) = &a.output {
                for p in commands::write_criticism_files(&out, prefix)? {
                    log::info!("wrote {}", p.display());
                }
            }
            let mut stdout = std::io::stdout().lock();
            serde_json::to_writer_pretty(&mut stdout, &out).map_err(std::io::Error::other)?;
            writeln!(stdout)?;
        }
        Command::PowerSim(a) => {
            let (spec, rows) = commands::cmd_power_sim(&a)?;
            commands::write_csv(commands::open_output(a.output.as_deref())?, &spec, &rows)?;
        }
        Command::Efficiency(a) => {
            let (spec, rows) = commands::cmd_efficiency(&a)?;
            commands::write_csv(commands::open_output(a.output.as_deref())?, &spec, &rows)?;
        }
        Command::Sample(a) => {
            let (spec, pts) = commands::cmd_sample(&a)?;
            let mut w = commands::open_output(a.output.as_deref())?;
            ingest::emit(&mut w, &pts, &[format!("run_spec: {spec}")])?;
            w.flush()?;
        }
    }
    Ok(())
}


fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
