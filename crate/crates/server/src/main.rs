use clap::Parser;

use pgcm_server::cli::{run, serve, Cli, Command};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    if let Command::Serve { .. } = cli.command {
        let rt = tokio::runtime::Runtime::new()?;
        return rt.block_on(serve(&cli));
    }
    for p in run(&cli)? {
        println!("{}", p.display());
    }
    Ok(())
}
