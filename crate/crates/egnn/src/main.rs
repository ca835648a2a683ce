fn main() {
    std::process::exit(egnn::cli::run(std::env::args()));
}
