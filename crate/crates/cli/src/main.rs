use std::io::Write;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use sgvqa_cli::error::exit;
use sgvqa_cli::{Cli, CliError};

fn fail(err: &CliError) -> ExitCode {
    let mut stdout = std::io::stdout();
    let _ = match err {
        CliError::Usage(msg) => writeln!(stdout, "{msg}"),
        _ => writeln!(stdout, "error: {err}"),
    };
    eprintln!("{}", err.envelope());
    ExitCode::from(err.exit_code() as u8)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.render().to_string().trim().to_string());
            debug_assert_eq!(err.exit_code(), exit::USAGE);
            return fail(&err);
        }
    };
    let mut stdout = std::io::stdout();
    let result = cli.run(&mut |line| {
        let _ = writeln!(stdout, "{line}");
        let _ = stdout.flush();
    });
    match result {
        Ok(summary) => {
            let _ = writeln!(std::io::stdout(), "{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(&e),
    }
}
