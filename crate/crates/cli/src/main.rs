fn main() {
    std::process::exit(posedist_cli::run_from_args(std::env::args()));
}
