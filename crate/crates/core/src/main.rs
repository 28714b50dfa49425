fn main() {
    std::process::exit(avsd::cli::run(std::env::args_os()));
}
