fn main() {
    std::process::exit(reppl::cli::run(std::env::args_os()));
}
