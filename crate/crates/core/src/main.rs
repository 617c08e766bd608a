fn main() {
    std::process::exit(tacrl::cli::run_cli(std::env::args_os()));
}
