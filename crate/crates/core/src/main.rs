fn main() {
    std::process::exit(molekit::cli::dispatch(std::env::args_os()));
}
