use clap::Parser;

/// Standalone service daemon for the blendshape diffusion pipeline.
#[derive(Parser)]
#[command(name = "blenddiffd", version, about)]
struct Opts {
    /// Address to listen on.
    #[arg(long, default_value = "127.0.0.1:8490")]
    addr: String,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| "info".into()),
        )
        .init();
    let opts = Opts::parse();
    blenddiff_service::serve(&opts.addr).await
}
