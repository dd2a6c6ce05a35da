fn main() {
    std::process::exit(verbalized_cli::run(std::env::args_os()));
}
