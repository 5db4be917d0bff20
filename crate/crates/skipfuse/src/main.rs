fn main() {
    std::process::exit(skipfuse::cli::run(std::env::args_os()));
}
