fn main() {
    std::process::exit(unansq_cli::run(std::env::args().collect()));
}
