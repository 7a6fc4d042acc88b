fn main() {
    std::process::exit(mposhare_cli::run(std::env::args_os()));
}
