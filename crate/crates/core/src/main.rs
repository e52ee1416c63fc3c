fn main() {
    std::process::exit(cafusion::cli::dispatch(std::env::args_os()));
}
