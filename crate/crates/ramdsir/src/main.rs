fn main() {
    std::process::exit(ramdsir::cli::main_with_args(std::env::args_os()));
}
