fn main() {
    std::process::exit(modkit::cli::run_from(std::env::args_os()));
}
