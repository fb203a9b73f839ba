fn main() {
    std::process::exit(seqdistill::cli::run_cli(std::env::args().skip(1).collect()));
}
