fn main() {
    std::process::exit(gmfm::cli::run(std::env::args_os()));
}
