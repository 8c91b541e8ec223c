fn main() {
    std::process::exit(tailsens::cli::main_with_args(std::env::args_os()));
}
