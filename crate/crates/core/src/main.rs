fn main() {
    std::process::exit(conquer::cli::dispatch(std::env::args_os()));
}
