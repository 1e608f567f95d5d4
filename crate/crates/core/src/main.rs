fn main() {
    std::process::exit(mixflow::cli::main_with_args(std::env::args_os()));
}
