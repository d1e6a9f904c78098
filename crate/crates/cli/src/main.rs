fn main() {
    std::process::exit(accd_cli::run(std::env::args_os()));
}
