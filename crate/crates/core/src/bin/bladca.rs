fn main() {
    std::process::exit(bladca::cli::run(std::env::args_os()));
}
