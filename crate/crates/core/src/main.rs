fn main() {
    std::process::exit(hdrisk::cli::run_cli(std::env::args_os()));
}
