fn main() {
    std::process::exit(extrapolab::cli::run_from_args(std::env::args_os()));
}
