fn main() {
    std::process::exit(fie_cli::run(std::env::args_os()));
}
