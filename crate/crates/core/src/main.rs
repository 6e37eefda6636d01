fn main() {
    std::process::exit(tome::cli::main_with_args(std::env::args_os()));
}
