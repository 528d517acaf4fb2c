fn main() {
    std::process::exit(iterboot::cli::main_with_args(std::env::args_os()));
}
