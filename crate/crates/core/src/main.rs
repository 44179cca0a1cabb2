fn main() {
    std::process::exit(regime_portfolio::cli::run(std::env::args_os()));
}
