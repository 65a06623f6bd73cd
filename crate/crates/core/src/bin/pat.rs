fn main() {
    std::process::exit(pat_core::cli::run(std::env::args_os()));
}
