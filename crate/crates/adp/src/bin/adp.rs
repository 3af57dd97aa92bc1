fn main() {
    std::process::exit(adp::harness::cli::run(std::env::args_os()));
}
