fn main() {
    std::process::exit(polarloc::cli::main_with_args(std::env::args_os()));
}
