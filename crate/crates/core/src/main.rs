fn main() {
    std::process::exit(hostguard::cli::dispatch(std::env::args_os()));
}
