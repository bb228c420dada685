fn main() {
    std::process::exit(melodi::cli::run(std::env::args()));
}
