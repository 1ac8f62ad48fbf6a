fn main() {
    std::process::exit(rdoq::cli::run(std::env::args_os()));
}
