fn main() {
    std::process::exit(prism_cli::run(std::env::args_os()));
}
