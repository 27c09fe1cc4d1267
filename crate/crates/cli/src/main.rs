fn main() {
    std::process::exit(multiway_cli::run_from(std::env::args_os()));
}
