fn main() {
    std::process::exit(kurtlab::harness::run_cli(std::env::args_os()));
}
