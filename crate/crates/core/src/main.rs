fn main() {
    std::process::exit(modalfuse::cli::run(std::env::args_os()));
}
