fn main() {
    std::process::exit(stam_cli::run(std::env::args_os()));
}
