fn main() {
    std::process::exit(tal::cli::run(std::env::args_os()));
}
