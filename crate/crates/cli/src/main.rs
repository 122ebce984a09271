fn main() {
    std::process::exit(msn_cli::dispatch(std::env::args_os()));
}
