fn main() {
    std::process::exit(kroprofac::cli::run(std::env::args_os()));
}
