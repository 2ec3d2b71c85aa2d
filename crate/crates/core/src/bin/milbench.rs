fn main() {
    std::process::exit(milbench::cli::main_with_args(std::env::args_os()));
}
