fn main() {
    std::process::exit(makd::cli::run(std::env::args_os()));
}
