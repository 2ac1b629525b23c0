use clap::Parser;

fn main() {
    let cli = mode_lab::cli::Cli::parse();
    if let Err(err) = mode_lab::cli::run(cli) {
        let record = serde_json::json!({
            "error": { "kind": err.kind(), "message": err.to_string() }
        });
        eprintln!("{}", record);
        std::process::exit(1);
    }
}
