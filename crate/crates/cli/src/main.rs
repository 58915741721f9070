fn main() {
    std::process::exit(epd_cli::run(std::env::args_os()));
}
