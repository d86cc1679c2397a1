fn main() {
    std::process::exit(ipcd::cli::run(std::env::args_os()));
}
