fn main() {
    std::process::exit(avgclp::cli::main_with_args(std::env::args_os()));
}
