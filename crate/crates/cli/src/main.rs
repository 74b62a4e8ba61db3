fn main() {
    std::process::exit(aasrt_cli::run(std::env::args_os()));
}
