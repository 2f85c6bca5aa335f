use clap::Parser;

fn main() {
    let cli = softvq::cli::Cli::parse();
    match softvq::cli::run(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            std::process::exit(e.exit_code());
        }
    }
}
