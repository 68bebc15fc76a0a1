//! `tilepart-serve`: serves partitioning sessions over HTTP.

use std::path::PathBuf;

use clap::Parser;
use tilepart_service::{app, AppState};

#[derive(Parser)]
#[command(name = "tilepart-serve", version, about = "HTTP sessions for incremental partitioning")]
struct Cli {
    #[arg(long, default_value = "127.0.0.1:7878")]
    addr: String,
    /// Also write each applied tactic's IR and report under this directory.
    #[arg(long)]
    dump_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let cli = Cli::parse();
    let listener = tokio::net::TcpListener::bind(&cli.addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app(AppState::new(cli.dump_dir))).await
}
