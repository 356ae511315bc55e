fn main() {
    std::process::exit(cueguard::cli::run(std::env::args_os()));
}
