fn main() {
    std::process::exit(maskwave::cli::run(std::env::args_os()));
}
