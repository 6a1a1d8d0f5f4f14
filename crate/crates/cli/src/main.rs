fn main() {
    std::process::exit(faegen_cli::run(std::env::args_os()));
}
