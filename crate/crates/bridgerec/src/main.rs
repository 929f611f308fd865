fn main() {
    std::process::exit(bridgerec::cli::run(std::env::args_os()));
}
