fn main() {
    std::process::exit(anchormark::cli::run(std::env::args_os()));
}
