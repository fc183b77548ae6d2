fn main() {
    std::process::exit(tden::cli::dispatch(std::env::args_os()));
}
