fn main() {
    std::process::exit(dualdiff::cli::run(std::env::args_os()));
}
