fn main() {
    std::process::exit(partialformer::cli::run(std::env::args().skip(1)));
}
