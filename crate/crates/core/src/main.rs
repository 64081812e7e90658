fn main() {
    std::process::exit(fgsi::cli::run_cli(std::env::args_os()));
}
