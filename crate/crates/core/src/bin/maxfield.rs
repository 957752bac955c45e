fn main() {
    std::process::exit(maxfield::cli::main_from_args(std::env::args_os()));
}
