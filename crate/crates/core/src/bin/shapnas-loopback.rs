//! Reference evaluator speaking the line protocol on stdin/stdout.
//!
//! Usage: shapnas-loopback [--game SPEC | --echo] [--window N] [--fault F]

use std::io::{stdin, stdout, BufWriter};
use std::process::ExitCode;

use shapnas::protocol::{serve, Backend, Fault, ServeOptions};
use shapnas::GameSpec;

fn parse_args() -> Result<(Backend, ServeOptions), String> {
    let mut backend = Backend::Echo;
    let mut options = ServeOptions::default();
    let mut args = std::env::args().skip(1);
    while let Some(flag) = args.next() {
        let mut value = || args.next().ok_or_else(|| format!("{flag} needs a value"));
        match flag.as_str() {
            "--echo" => backend = Backend::Echo,
            "--game" => backend = Backend::Game(GameSpec::load(&value()?).map_err(|e| e.to_string())?),
            "--window" => {
                options.window = value()?.parse().map_err(|e| format!("--window: {e}"))?;
            }
            "--fault" => options.fault = Some(value()?.parse::<Fault>()?),
            "-h" | "--help" => {
                println!("usage: shapnas-loopback [--game SPEC | --echo] [--window N] [--fault F]");
                std::process::exit(0);
            }
            other => return Err(format!("unknown argument `{other}`")),
        }
    }
    Ok((backend, options))
}

fn main() -> ExitCode {
    let (backend, options) = match parse_args() {
        Ok(parsed) => parsed,
        Err(e) => {
            eprintln!("shapnas-loopback: {e}");
            return ExitCode::from(2);
        }
    };
    match serve(&backend, stdin().lock(), BufWriter::new(stdout().lock()), &options) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("shapnas-loopback: {e}");
            ExitCode::FAILURE
        }
    }
}
