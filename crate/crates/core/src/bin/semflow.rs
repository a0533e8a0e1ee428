fn main() {
    std::process::exit(semflow::cli::run_cli(std::env::args_os()));
}
