fn main() {
    std::process::exit(modt::cli::main_with_args(std::env::args_os()));
}
