fn main() {
    std::process::exit(strokeopt::cli::run(std::env::args_os()));
}
