fn main() {
    std::process::exit(lorasim::cli::main_with_args(std::env::args_os()));
}
